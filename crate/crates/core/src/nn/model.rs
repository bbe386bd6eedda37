//! The four history-conditioned model families and their two output heads.
//!
//! With the inductive-prior head a model emits a full object x location
//! weight matrix and the policy is the masked softmax of the picked
//! object's row. Without it the model emits `L` location logits directly
//! from its representation concatenated with the pick's embedding.

use std::fmt;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tokens::{object_token, sequence_len, TokenSequence, DEFAULT_HISTORY, VOCAB_SIZE};
use crate::env::EnvironmentSpec;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ShallowLinear,
    DeepLinear,
    Mlp,
    CausalTransformer,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::ShallowLinear,
        Family::DeepLinear,
        Family::Mlp,
        Family::CausalTransformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ShallowLinear => "shallow_linear",
            Family::DeepLinear => "deep_linear",
            Family::Mlp => "mlp",
            Family::CausalTransformer => "causal_transformer",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub with_prior: bool,
    pub spec: EnvironmentSpec,
    #[serde(default = "default_history")]
    pub history_len: usize,
}

fn default_history() -> usize {
    DEFAULT_HISTORY
}

impl ModelSpec {
    pub fn new(family: Family, spec: EnvironmentSpec, with_prior: bool) -> Self {
        ModelSpec {
            family,
            hidden_dim: 64,
            num_layers: 3,
            num_heads: 4,
            with_prior,
            spec,
            history_len: DEFAULT_HISTORY,
        }
    }

    pub fn with_dims(mut self, hidden_dim: usize, num_layers: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self.num_layers = num_layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.family != Family::ShallowLinear && (self.hidden_dim == 0 || self.num_layers == 0) {
            return Err(Error::Config(
                "hidden_dim and num_layers must be positive".into(),
            ));
        }
        if self.family == Family::CausalTransformer
            && (self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads))
        {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        sequence_len(self.history_len)
    }

    /// Width of the head's output: `O * L` with the prior, `L` without.
    pub fn head_width(&self) -> usize {
        if self.with_prior {
            self.spec.cells()
        } else {
            self.spec.num_locations
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaSource {
    Bootstrap,
    Online,
    Scratch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaEstimate {
    pub theta_hat: Array2<f64>,
    pub source: ThetaSource,
}

impl ThetaEstimate {
    pub fn zeros(spec: &EnvironmentSpec) -> Self {
        ThetaEstimate {
            theta_hat: Array2::zeros((spec.num_objects, spec.num_locations)),
            source: ThetaSource::Scratch,
        }
    }

    pub fn row(&self, a_h: usize) -> &[f64] {
        let l = self.theta_hat.ncols();
        &self.theta_hat.as_slice().expect("standard layout")[a_h * l..(a_h + 1) * l]
    }
}

/// One supervised step: history encoding, pick, vacant support and label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub a_h: usize,
    pub vacant: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
enum Layout {
    Shallow {
        table: ParamId,
    },
    Pooled {
        embed: ParamId,
        layers: Vec<(ParamId, Option<ParamId>)>,
        head_w: ParamId,
        head_b: Option<ParamId>,
        nonlinear: bool,
    },
    Transformer {
        embed: ParamId,
        pos: ParamId,
        blocks: Vec<Block>,
        lnf_g: ParamId,
        lnf_b: ParamId,
        head_w: ParamId,
        head_b: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    layout: Layout,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

/// Fan-in scaled uniform weight.
fn weight(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut p = ParamStore::default();
        let d = spec.hidden_dim;
        let (o, l) = (spec.spec.num_objects, spec.spec.num_locations);
        let head = spec.head_width();
        let layout = match spec.family {
            Family::ShallowLinear => {
                let shape = if spec.with_prior { (1, o * l) } else { (o, l) };
                Layout::Shallow {
                    table: p.insert("table", Array2::zeros(shape)),
                }
            }
            Family::DeepLinear | Family::Mlp => {
                let nonlinear = spec.family == Family::Mlp;
                let embed = p.insert("embed", uniform(VOCAB_SIZE, d, 1.0, &mut rng));
                let mut layers = Vec::with_capacity(spec.num_layers);
                for i in 0..spec.num_layers {
                    let w = p.insert(format!("layer{i}.w"), weight(d, d, &mut rng));
                    let b =
                        nonlinear.then(|| p.insert(format!("layer{i}.b"), Array2::zeros((1, d))));
                    layers.push((w, b));
                }
                let head_in = if spec.with_prior { d } else { 2 * d };
                let head_w = p.insert("head.w", Array2::zeros((head_in, head)));
                let head_b = nonlinear.then(|| p.insert("head.b", Array2::zeros((1, head))));
                Layout::Pooled {
                    embed,
                    layers,
                    head_w,
                    head_b,
                    nonlinear,
                }
            }
            Family::CausalTransformer => {
                let embed = p.insert("embed", uniform(VOCAB_SIZE, d, 1.0, &mut rng));
                let pos = p.insert("pos", uniform(spec.seq_len(), d, 1.0, &mut rng));
                let ones = || Array2::from_elem((1, d), 1.0);
                let mut blocks = Vec::with_capacity(spec.num_layers);
                for i in 0..spec.num_layers {
                    let mut w =
                        |name: &str, v: Array2<f64>| p.insert(format!("block{i}.{name}"), v);
                    blocks.push(Block {
                        ln1_g: w("ln1.g", ones()),
                        ln1_b: w("ln1.b", Array2::zeros((1, d))),
                        wqkv: w("attn.wqkv", weight(d, 3 * d, &mut rng)),
                        bqkv: w("attn.bqkv", Array2::zeros((1, 3 * d))),
                        wo: w("attn.wo", weight(d, d, &mut rng)),
                        bo: w("attn.bo", Array2::zeros((1, d))),
                        ln2_g: w("ln2.g", ones()),
                        ln2_b: w("ln2.b", Array2::zeros((1, d))),
                        w1: w("mlp.w1", weight(d, 4 * d, &mut rng)),
                        b1: w("mlp.b1", Array2::zeros((1, 4 * d))),
                        w2: w("mlp.w2", weight(4 * d, d, &mut rng)),
                        b2: w("mlp.b2", Array2::zeros((1, d))),
                    });
                }
                let lnf_g = p.insert("ln_f.g", ones());
                let lnf_b = p.insert("ln_f.b", Array2::zeros((1, d)));
                let head_in = if spec.with_prior { d } else { 2 * d };
                let head_w = p.insert("head.w", Array2::zeros((head_in, head)));
                let head_b = p.insert("head.b", Array2::zeros((1, head)));
                Layout::Transformer {
                    embed,
                    pos,
                    blocks,
                    lnf_g,
                    lnf_b,
                    head_w,
                    head_b,
                }
            }
        };
        Ok(Model {
            spec,
            params: p,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(spec: ModelSpec, named: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut model = Model::new(spec, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = model.params.find(&name).ok_or_else(|| {
                Error::DimensionMismatch(format!("unexpected parameter `{name}`"))
            })?;
            if model.params.get(id).dim() != value.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter `{name}` has the wrong shape"
                )));
            }
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::DimensionMismatch(format!(
                    "parameter `{name}` is not finite"
                )));
            }
            *model.params.get_mut(id) = value;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn env(&self) -> &EnvironmentSpec {
        &self.spec.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.tokens.len() != self.spec.seq_len() || seq.attention_mask.len() != seq.tokens.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected a {}-token sequence, got {}",
                self.spec.seq_len(),
                seq.tokens.len()
            )));
        }
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange(bad));
        }
        if seq.active_start() == seq.tokens.len() {
            return Err(Error::DimensionMismatch("sequence is all padding".into()));
        }
        Ok(())
    }

    fn check_pick(&self, a_h: usize) -> Result<()> {
        if a_h >= self.spec.spec.num_objects {
            return Err(Error::UnknownObject(a_h));
        }
        Ok(())
    }

    /// Final `1 x d` representation, `None` for the shallow family.
    fn representation(&self, tape: &mut Tape, seq: &TokenSequence) -> Option<Var> {
        match &self.layout {
            Layout::Shallow { .. } => None,
            Layout::Pooled {
                embed,
                layers,
                nonlinear,
                ..
            } => {
                let e = tape.gather(*embed, seq.active());
                let mut h = tape.mean_rows(e);
                for (w, b) in layers {
                    let wv = tape.param(*w);
                    h = tape.matmul(h, wv);
                    if let Some(b) = b {
                        let bv = tape.param(*b);
                        h = tape.add_row(h, bv);
                    }
                    if *nonlinear {
                        h = tape.gelu(h);
                    }
                }
                Some(h)
            }
            Layout::Transformer {
                embed,
                pos,
                blocks,
                lnf_g,
                lnf_b,
                ..
            } => {
                let start = seq.active_start();
                let mut x = self.transformer_input(tape, *embed, *pos, seq, start);
                for (i, block) in blocks.iter().enumerate() {
                    let last_only = i + 1 == blocks.len();
                    x = self.transformer_block(tape, block, x, last_only);
                }
                let g = tape.param(*lnf_g);
                let b = tape.param(*lnf_b);
                Some(tape.layer_norm(x, g, b))
            }
        }
    }

    fn transformer_input(
        &self,
        tape: &mut Tape,
        embed: ParamId,
        pos: ParamId,
        seq: &TokenSequence,
        start: usize,
    ) -> Var {
        let tok = tape.gather(embed, &seq.tokens[start..]);
        let positions: Vec<usize> = (start..seq.tokens.len()).collect();
        let p = tape.gather(pos, &positions);
        tape.add(tok, p)
    }

    /// Pre-norm causal block. With `last_only` the output is just the final row.
    fn transformer_block(&self, tape: &mut Tape, b: &Block, x: Var, last_only: bool) -> Var {
        let d = self.spec.hidden_dim;
        let heads = self.spec.num_heads;
        let hd = d / heads;
        let n = tape.value(x).nrows();
        let g1 = tape.param(b.ln1_g);
        let b1 = tape.param(b.ln1_b);
        let h = tape.layer_norm(x, g1, b1);
        let wqkv = tape.param(b.wqkv);
        let bqkv = tape.param(b.bqkv);
        let qkv = tape.matmul(h, wqkv);
        let qkv = tape.add_row(qkv, bqkv);
        let (q_src, offset, resid) = if last_only {
            (tape.rows(qkv, n - 1, 1), n - 1, tape.rows(x, n - 1, 1))
        } else {
            (qkv, 0, x)
        };
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let q = tape.cols(q_src, hi * hd, hd);
            let k = tape.cols(qkv, d + hi * hd, hd);
            let v = tape.cols(qkv, 2 * d + hi * hd, hd);
            let s = tape.matmul_t(q, k);
            let s = tape.scale(s, scale);
            let a = tape.causal_softmax(s, offset);
            outs.push(tape.matmul(a, v));
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let wo = tape.param(b.wo);
        let bo = tape.param(b.bo);
        let o = tape.matmul(o, wo);
        let o = tape.add_row(o, bo);
        let x = tape.add(resid, o);

        let g2 = tape.param(b.ln2_g);
        let b2n = tape.param(b.ln2_b);
        let h = tape.layer_norm(x, g2, b2n);
        let w1 = tape.param(b.w1);
        let bb1 = tape.param(b.b1);
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, bb1);
        let f = tape.gelu(f);
        let w2 = tape.param(b.w2);
        let bb2 = tape.param(b.b2);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, bb2);
        tape.add(x, f)
    }

    fn head(&self, tape: &mut Tape, input: Var) -> Var {
        let (w, b) = match &self.layout {
            Layout::Pooled { head_w, head_b, .. } => (*head_w, *head_b),
            Layout::Transformer { head_w, head_b, .. } => (*head_w, Some(*head_b)),
            Layout::Shallow { .. } => unreachable!("shallow models have no head"),
        };
        let wv = tape.param(w);
        let out = tape.matmul(input, wv);
        match b {
            Some(b) => {
                let bv = tape.param(b);
                tape.add_row(out, bv)
            }
            None => out,
        }
    }

    fn pick_embedding(&self, tape: &mut Tape, a_h: usize) -> Result<Var> {
        let embed = match &self.layout {
            Layout::Pooled { embed, .. } | Layout::Transformer { embed, .. } => *embed,
            Layout::Shallow { .. } => unreachable!("shallow models have no embedding"),
        };
        let tok = object_token(&self.spec.spec, a_h)?;
        Ok(tape.gather(embed, &[tok]))
    }

    /// `1 x (O * L)` weight matrix, row-major.
    pub fn build_theta(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        if !self.spec.with_prior {
            return Err(Error::PriorRequired);
        }
        self.check_sequence(seq)?;
        Ok(match &self.layout {
            Layout::Shallow { table } => tape.param(*table),
            _ => {
                let h = self.representation(tape, seq).expect("non-shallow");
                self.head(tape, h)
            }
        })
    }

    /// `1 x L` location scores for pick `a_h`, from whichever head the model has.
    pub fn build_location_logits(
        &self,
        tape: &mut Tape,
        seq: &TokenSequence,
        a_h: usize,
    ) -> Result<Var> {
        self.check_pick(a_h)?;
        let l = self.spec.spec.num_locations;
        if self.spec.with_prior {
            let theta = self.build_theta(tape, seq)?;
            return Ok(tape.cols(theta, a_h * l, l));
        }
        self.check_sequence(seq)?;
        Ok(match &self.layout {
            Layout::Shallow { table } => tape.gather(*table, &[a_h]),
            _ => {
                let h = self.representation(tape, seq).expect("non-shallow");
                let e = self.pick_embedding(tape, a_h)?;
                let cat = tape.concat_cols(&[h, e]);
                self.head(tape, cat)
            }
        })
    }

    pub fn forward_theta(&self, seq: &TokenSequence) -> Result<ThetaEstimate> {
        let mut tape = Tape::new(&self.params);
        let v = self.build_theta(&mut tape, seq)?;
        let (o, l) = (self.spec.spec.num_objects, self.spec.spec.num_locations);
        let flat = tape.value(v).to_owned();
        let theta_hat = flat
            .into_shape((o, l))
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Ok(ThetaEstimate {
            theta_hat,
            source: ThetaSource::Bootstrap,
        })
    }

    /// Direct logits of a prior-less model.
    pub fn forward_logits(&self, seq: &TokenSequence, a_h: usize) -> Result<Vec<f64>> {
        if self.spec.with_prior {
            return Err(Error::PriorNotSupported);
        }
        self.location_scores(seq, a_h)
    }

    /// Scores over all `L` locations for either head.
    pub fn location_scores(&self, seq: &TokenSequence, a_h: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let v = self.build_location_logits(&mut tape, seq, a_h)?;
        Ok(tape.value(v).iter().copied().collect())
    }

    pub fn example_loss(&self, tape: &mut Tape, ex: &Example) -> Result<Var> {
        if !ex.vacant.contains(&ex.label) {
            return Err(Error::LabelOutsideSupport(ex.label));
        }
        if let Some(&bad) = ex
            .vacant
            .iter()
            .find(|&&l| l >= self.spec.spec.num_locations)
        {
            return Err(Error::UnknownLocation(bad));
        }
        let logits = self.build_location_logits(tape, &ex.tokens, ex.a_h)?;
        Ok(tape.masked_cross_entropy(logits, &ex.vacant, ex.label))
    }

    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let v = self.example_loss(&mut tape, ex)?;
        Ok(tape.scalar(v))
    }

    /// Mean loss and its gradient over a minibatch.
    pub fn batch_gradients(&self, batch: &[&Example]) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(&self.params);
        if batch.is_empty() {
            return Ok((0.0, grads));
        }
        let w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            let mut tape = Tape::new(&self.params);
            let loss = self.example_loss(&mut tape, ex)?;
            total += tape.scalar(loss);
            tape.backward(loss, w, &mut grads);
        }
        Ok((total * w, grads))
    }

    /// Hidden states of every active position without the final-row shortcut.
    pub fn transformer_states(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        self.check_sequence(seq)?;
        let Layout::Transformer {
            embed, pos, blocks, ..
        } = &self.layout
        else {
            return Err(Error::Config("not a transformer".into()));
        };
        let mut tape = Tape::new(&self.params);
        let start = seq.active_start();
        let mut x = self.transformer_input(&mut tape, *embed, *pos, seq, start);
        for block in blocks {
            x = self.transformer_block(&mut tape, block, x, false);
        }
        Ok(tape.value(x).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tokens::{encode_history, HistoryWindow, PAD};

    fn tiny(family: Family, with_prior: bool) -> ModelSpec {
        ModelSpec {
            family,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            with_prior,
            spec: EnvironmentSpec::small(),
            history_len: 4,
        }
    }

    fn seq(entries: Vec<[usize; 3]>, pick: usize) -> TokenSequence {
        encode_history(
            &HistoryWindow {
                k: 4,
                entries,
                current_pick: pick,
            },
            &EnvironmentSpec::small(),
        )
        .unwrap()
    }

    fn randomize(m: &mut Model, seed: u64) {
        let mut rng = rng_for(seed, &[99]);
        for t in m.params_mut().tensors_mut() {
            t.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
    }

    #[test]
    fn untrained_prior_models_emit_zero_theta() {
        for family in Family::ALL {
            let m = Model::new(tiny(family, true), 1).unwrap();
            let th = m.forward_theta(&seq(vec![[0, 1, 2]], 3)).unwrap();
            assert_eq!(th.theta_hat.dim(), (5, 5));
            assert!(th.theta_hat.iter().all(|&v| v == 0.0), "{family}");
        }
    }

    #[test]
    fn zero_heads_give_uniform_logits() {
        for family in Family::ALL {
            let m = Model::new(tiny(family, false), 2).unwrap();
            let logits = m.forward_logits(&seq(vec![], 1), 1).unwrap();
            assert_eq!(logits.len(), 5);
            assert!(logits.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn heads_are_enforced() {
        let prior = Model::new(tiny(Family::Mlp, true), 0).unwrap();
        assert!(matches!(
            prior.forward_logits(&seq(vec![], 0), 0),
            Err(Error::PriorNotSupported)
        ));
        let direct = Model::new(tiny(Family::Mlp, false), 0).unwrap();
        assert!(matches!(
            direct.forward_theta(&seq(vec![], 0)),
            Err(Error::PriorRequired)
        ));
    }

    #[test]
    fn shallow_prior_ignores_input() {
        let mut m = Model::new(tiny(Family::ShallowLinear, true), 0).unwrap();
        randomize(&mut m, 3);
        let a = m.forward_theta(&seq(vec![], 0)).unwrap();
        let b = m
            .forward_theta(&seq(vec![[1, 2, 3], [0, 0, 4]], 2))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deep_linear_is_linear_in_embeddings() {
        let mut m = Model::new(tiny(Family::DeepLinear, true), 0).unwrap();
        randomize(&mut m, 4);
        let s = seq(vec![[1, 2, 3]], 2);
        let base = m.forward_theta(&s).unwrap().theta_hat;
        let id = m.params().find("embed").unwrap();
        m.params_mut().get_mut(id).mapv_inplace(|v| v * 2.5);
        let scaled = m.forward_theta(&s).unwrap().theta_hat;
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a * 2.5 - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        assert!(base.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn transformer_ignores_padding_tokens() {
        for prior in [true, false] {
            let mut m = Model::new(tiny(Family::CausalTransformer, prior), 0).unwrap();
            randomize(&mut m, 5);
            let s = seq(vec![[1, 2, 3]], 2);
            let mut perturbed = s.clone();
            assert_eq!(perturbed.tokens[0], PAD);
            perturbed.tokens[0] = 150;
            perturbed.tokens[3] = 17;
            let a = m.location_scores(&s, 2).unwrap();
            let b = m.location_scores(&perturbed, 2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn transformer_is_causal_and_shortcut_matches() {
        let mut m = Model::new(tiny(Family::CausalTransformer, true), 0).unwrap();
        randomize(&mut m, 6);
        let s = seq(vec![[1, 2, 3], [0, 4, 4]], 2);
        let full = m.transformer_states(&s).unwrap();
        let mut later = s.clone();
        let n = later.tokens.len();
        later.tokens[n - 1] = 108 + 4;
        later.tokens[n - 2] = 8 + 1;
        let changed = m.transformer_states(&later).unwrap();
        let rows = full.nrows();
        for r in 0..rows - 2 {
            assert_eq!(full.row(r), changed.row(r));
        }
        assert_ne!(full.row(rows - 1), changed.row(rows - 1));

        let mut tape = Tape::new(m.params());
        let rep = m.representation(&mut tape, &s).unwrap();
        let short = tape.value(rep).to_owned();
        let Layout::Transformer { lnf_g, lnf_b, .. } = &m.layout else {
            unreachable!()
        };
        let mut t2 = Tape::new(m.params());
        let x = t2.constant(full.row(rows - 1).to_owned().insert_axis(ndarray::Axis(0)));
        let g = t2.param(*lnf_g);
        let b = t2.param(*lnf_b);
        let y = t2.layer_norm(x, g, b);
        for (a, b) in short.iter().zip(t2.value(y).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shallow_prior_gradient_is_softmax_residual() {
        let mut m = Model::new(tiny(Family::ShallowLinear, true), 0).unwrap();
        randomize(&mut m, 7);
        let ex = Example {
            tokens: seq(vec![], 3),
            a_h: 3,
            vacant: vec![0, 2, 4],
            label: 2,
        };
        let (_, grads) = m.batch_gradients(&[&ex]).unwrap();
        let g = grads.get(ParamId(0));
        let th = m.forward_theta(&ex.tokens).unwrap();
        let probs = crate::policy::action_distribution(th.row(3), &ex.vacant).unwrap();
        for l in 0..5 {
            let expected = if ex.vacant.contains(&l) {
                probs[l] - if l == ex.label { 1.0 } else { 0.0 }
            } else {
                0.0
            };
            assert!((g[[0, 3 * 5 + l]] - expected).abs() < 1e-12);
        }
        for row in [0, 1, 2, 4] {
            for l in 0..5 {
                assert_eq!(g[[0, row * 5 + l]], 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::new(tiny(Family::Mlp, true), 0).unwrap();
        let mut s = seq(vec![], 0);
        s.tokens.push(0);
        s.attention_mask.push(false);
        assert!(m.forward_theta(&s).is_err());
        let ex = Example {
            tokens: seq(vec![], 0),
            a_h: 0,
            vacant: vec![1],
            label: 0,
        };
        assert!(matches!(m.loss(&ex), Err(Error::LabelOutsideSupport(0))));
        assert!(m.location_scores(&seq(vec![], 0), 9).is_err());
        let bad = ModelSpec {
            num_heads: 3,
            ..tiny(Family::CausalTransformer, true)
        };
        assert!(Model::new(bad, 0).is_err());
    }
}
