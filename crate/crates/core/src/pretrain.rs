//! Behavior cloning from expert demonstrations, sweeps, and zero-shot
//! evaluation.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{EnvironmentSpec, WorldState};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, TrainingMeta};
use crate::nn::model::{Example, Family, Model, ModelSpec, ThetaEstimate};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::tokens::{encode_history, History, HistoryWindow};
use crate::policy::masked_argmax;
use crate::population::{DemonstrationDataset, PreferenceMatrix};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 10,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_environment: BTreeMap<String, f64>,
    pub num_predictions: usize,
}

/// Tracks the best eval score and says when patience has run out.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records `score` for 1-based `epoch`; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

/// Episodes grouped by preference in first-appearance order.
fn by_preference(dataset: &DemonstrationDataset) -> Vec<(&str, Vec<&crate::env::Episode>)> {
    let mut order: Vec<(&str, Vec<&crate::env::Episode>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for ep in &dataset.episodes {
        let id = ep.preference_id.as_str();
        let slot = *index.entry(id).or_insert_with(|| {
            order.push((id, Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(ep);
    }
    order
}

/// One example per demonstration step. Each preference keeps its own rolling
/// history across its episodes.
pub fn build_training_examples(dataset: &DemonstrationDataset, k: usize) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(dataset.num_steps());
    for (_, episodes) in by_preference(dataset) {
        let mut history = History::new(k);
        for ep in episodes {
            for step in &ep.steps {
                let vacant = step.state_before.vacant_locations();
                if !vacant.contains(&step.a_c) {
                    return Err(Error::MalformedEpisode(format!(
                        "label {} is not vacant in `{}`",
                        step.a_c, ep.preference_id
                    )));
                }
                let tokens = encode_history(&history.window(step.a_h), &ep.spec)?;
                out.push(Example {
                    tokens,
                    a_h: step.a_h,
                    vacant,
                    label: step.a_c,
                });
                history.push(step.actions());
            }
        }
    }
    Ok(out)
}

/// Anything that proposes a placement from the interaction history.
pub trait ZeroShotPolicy {
    fn propose(
        &self,
        window: &HistoryWindow,
        state: &WorldState,
        vacant: &[usize],
    ) -> Result<usize>;
    fn history_len(&self) -> usize;
}

impl ZeroShotPolicy for Model {
    fn propose(
        &self,
        window: &HistoryWindow,
        _state: &WorldState,
        vacant: &[usize],
    ) -> Result<usize> {
        let seq = encode_history(window, self.env())?;
        let scores = self.location_scores(&seq, window.current_pick)?;
        masked_argmax(&scores, vacant)
    }

    fn history_len(&self) -> usize {
        self.spec().history_len
    }
}

impl ZeroShotPolicy for ThetaEstimate {
    fn propose(
        &self,
        window: &HistoryWindow,
        _state: &WorldState,
        vacant: &[usize],
    ) -> Result<usize> {
        masked_argmax(self.row(window.current_pick), vacant)
    }

    fn history_len(&self) -> usize {
        0
    }
}

impl ZeroShotPolicy for PreferenceMatrix {
    fn propose(
        &self,
        window: &HistoryWindow,
        _state: &WorldState,
        vacant: &[usize],
    ) -> Result<usize> {
        crate::population::expert_placement(self, window.current_pick, vacant)
    }

    fn history_len(&self) -> usize {
        0
    }
}

/// Replays every episode, letting `policy` propose at each step. The
/// history fed back holds the policy's own proposals and the true
/// corrections. Nothing is learned.
pub fn evaluate_zero_shot(
    policy: &dyn ZeroShotPolicy,
    dataset: &DemonstrationDataset,
    spec: &EnvironmentSpec,
) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (_, episodes) in by_preference(dataset) {
        let mut history = History::new(policy.history_len());
        for ep in episodes {
            if ep.spec != *spec {
                return Err(Error::DimensionMismatch(format!(
                    "episode of `{}` was recorded in a different environment",
                    ep.preference_id
                )));
            }
            for step in &ep.steps {
                let vacant = step.state_before.vacant_locations();
                let a_r = policy.propose(&history.window(step.a_h), &step.state_before, &vacant)?;
                if a_r == step.a_c {
                    correct += 1;
                }
                total += 1;
                history.push([step.a_h, a_r, step.a_c]);
            }
        }
    }
    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };
    let mut per_environment = BTreeMap::new();
    per_environment.insert(spec.name.to_string(), accuracy);
    Ok(EvalReport {
        accuracy,
        per_environment,
        num_predictions: total,
    })
}

/// Mean loss of `model` on `examples`.
pub fn mean_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        total += model.loss(ex)?;
    }
    Ok(total / examples.len() as f64)
}

/// Minibatch training with per-epoch evaluation and early stopping. The
/// returned checkpoint holds the parameters of the best eval epoch.
pub fn train(
    mut model: Model,
    train_set: &DemonstrationDataset,
    eval_set: &DemonstrationDataset,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let env = *model.env();
    let examples = build_training_examples(train_set, model.spec().history_len)?;
    if examples.is_empty() {
        return Err(Error::Config("training set has no steps".into()));
    }
    if let Some(ep) = train_set.episodes.iter().find(|e| e.spec != env) {
        return Err(Error::DimensionMismatch(format!(
            "training episode of `{}` does not match the model environment",
            ep.preference_id
        )));
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.params().clone();
    let mut eval_history = Vec::new();
    let mut loss_history = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = model.batch_gradients(&batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            optimizer.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        epoch_loss /= examples.len() as f64;
        let acc = evaluate_zero_shot(&model, eval_set, &env)?.accuracy;
        loss_history.push(epoch_loss);
        eval_history.push(acc);
        epochs = epoch;
        let improved = stopper.observe(epoch, acc);
        if improved {
            best_params = model.params().clone();
        }
        info!(
            "{} prior={} epoch {epoch}: loss {epoch_loss:.4} eval {acc:.4}{}",
            model.spec().family,
            model.spec().with_prior,
            if improved { " *" } else { "" }
        );
        if stopper.should_stop() {
            debug!("early stop after epoch {epoch}");
            break;
        }
    }

    let (best_epoch, best_eval_accuracy) = stopper.best().expect("at least one epoch ran");
    *model.params_mut() = best_params;
    Ok(Checkpoint {
        model,
        training: TrainingMeta {
            epochs,
            best_epoch,
            best_eval_accuracy,
            seed: cfg.seed,
            learning_rate: cfg.learning_rate,
            optimizer: cfg.optimizer,
            batch_size: cfg.batch_size,
            eval_accuracy_history: eval_history,
            train_loss_history: loss_history,
        },
    })
}

/// Learning rates tried by default sweeps.
pub const SWEEP_LEARNING_RATES: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub model: ModelSpec,
    pub config: TrainConfig,
    pub init_seed: u64,
}

/// Every family and head crossed with every learning rate.
pub fn default_grid(
    env: &EnvironmentSpec,
    base: &ModelSpec,
    cfg: &TrainConfig,
    lrs: &[f64],
) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for family in Family::ALL {
        for with_prior in [true, false] {
            for &lr in lrs {
                cells.push(SweepCell {
                    model: ModelSpec {
                        family,
                        with_prior,
                        spec: *env,
                        ..base.clone()
                    },
                    config: TrainConfig {
                        learning_rate: lr,
                        ..cfg.clone()
                    },
                    init_seed: cfg.seed,
                });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: Family,
    pub prior: bool,
    pub lr: f64,
    pub hidden: usize,
    pub layers: usize,
    pub eval_acc: f64,
    pub test_acc: Option<f64>,
}

pub struct SweepOutcome {
    /// Selected row per (family, prior), in family order.
    pub table: Vec<SweepRow>,
    pub trials: Vec<SweepRow>,
    pub best: BTreeMap<(Family, bool), Checkpoint>,
}

/// Total order used to pick a winner: higher eval accuracy, then fewer
/// parameters, then the lower learning rate.
fn better(a: (f64, usize, f64), b: (f64, usize, f64)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    a.2 < b.2
}

pub fn sweep(
    cells: &[SweepCell],
    train_set: &DemonstrationDataset,
    eval_set: &DemonstrationDataset,
    test_set: Option<&DemonstrationDataset>,
    jobs: usize,
) -> Result<SweepOutcome> {
    let run = |cell: &SweepCell| -> Result<(Checkpoint, SweepRow)> {
        let model = Model::new(cell.model.clone(), cell.init_seed)?;
        let ck = train(model, train_set, eval_set, &cell.config)?;
        let test_acc = match test_set {
            Some(t) => Some(evaluate_zero_shot(&ck.model, t, &cell.model.spec)?.accuracy),
            None => None,
        };
        let row = SweepRow {
            family: cell.model.family,
            prior: cell.model.with_prior,
            lr: cell.config.learning_rate,
            hidden: cell.model.hidden_dim,
            layers: cell.model.num_layers,
            eval_acc: ck.training.best_eval_accuracy,
            test_acc,
        };
        Ok((ck, row))
    };

    let results: Vec<Result<(Checkpoint, SweepRow)>> = if jobs <= 1 || cells.len() <= 1 {
        cells.iter().map(run).collect()
    } else {
        let per = cells.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .chunks(per)
                .map(|chunk| s.spawn(|| chunk.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };

    let mut trials = Vec::with_capacity(results.len());
    let mut best: BTreeMap<(Family, bool), (Checkpoint, SweepRow)> = BTreeMap::new();
    for r in results {
        let (ck, row) = r?;
        trials.push(row.clone());
        let key = (row.family, row.prior);
        let score = (row.eval_acc, ck.model.num_parameters(), row.lr);
        let replace = match best.get(&key) {
            None => true,
            Some((old, old_row)) => better(
                score,
                (old_row.eval_acc, old.model.num_parameters(), old_row.lr),
            ),
        };
        if replace {
            best.insert(key, (ck, row));
        }
    }
    let table = best.values().map(|(_, r)| r.clone()).collect();
    let best = best.into_iter().map(|(k, (ck, _))| (k, ck)).collect();
    Ok(SweepOutcome {
        table,
        trials,
        best,
    })
}

/// CSV with columns `family,prior,lr,hidden,layers,eval_acc,test_acc`.
pub fn sweep_table_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "family", "prior", "lr", "hidden", "layers", "eval_acc", "test_acc",
    ])?;
    for r in rows {
        w.write_record([
            r.family.to_string(),
            r.prior.to_string(),
            format!("{:e}", r.lr),
            r.hidden.to_string(),
            r.layers.to_string(),
            format!("{:.6}", r.eval_acc),
            r.test_acc.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
