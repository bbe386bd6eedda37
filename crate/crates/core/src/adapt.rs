//! Online adaptation: the corrective rank-one update, the three agents, and
//! the stationary/nonstationary protocols.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{
    new_episode, pick_rng, random_pick, resolve_turn, EnvironmentSpec, Episode, WorldState,
};
use crate::error::{Error, Result};
use crate::nn::flops::{
    count_flops, forward_macs, linear_inference_flops, linear_update_flops, FlopMode, FlopSubject,
    UpdatePlan,
};
use crate::nn::model::{Example, Family, Model, ThetaEstimate, ThetaSource};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::tokens::{encode_history, History, HistoryWindow};
use crate::policy::{action_distribution, masked_argmax};
use crate::population::{expert_placement, PreferenceMatrix};
use crate::rng::{derive_seed, rng_for, stream};

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_TRANSFORMER_LR: f64 = 1e-2;
pub const DEFAULT_EPISODES: usize = 20;
pub const DEFAULT_SWITCH_AFTER: usize = 10;

/// One changed entry of the weight estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaDelta {
    pub object: usize,
    pub location: usize,
    pub change: f64,
}

/// Lowers `(a_h, a_r)` by `alpha` and raises `(a_h, a_c)` by `alpha`. The
/// two terms cancel when the proposal was accepted.
pub fn sgd_update(
    theta: &mut Array2<f64>,
    a_h: usize,
    a_r: usize,
    a_c: usize,
    alpha: f64,
) -> Result<Vec<ThetaDelta>> {
    let (o, l) = theta.dim();
    if a_h >= o {
        return Err(Error::UnknownObject(a_h));
    }
    if let Some(&bad) = [a_r, a_c].iter().find(|&&x| x >= l) {
        return Err(Error::UnknownLocation(bad));
    }
    if a_r == a_c {
        return Ok(Vec::new());
    }
    theta[[a_h, a_r]] -= alpha;
    theta[[a_h, a_c]] += alpha;
    Ok(vec![
        ThetaDelta {
            object: a_h,
            location: a_r,
            change: -alpha,
        },
        ThetaDelta {
            object: a_h,
            location: a_c,
            change: alpha,
        },
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineLinearLearner {
    pub theta_hat: ThetaEstimate,
    pub alpha: f64,
}

impl OnlineLinearLearner {
    pub fn new(theta_hat: ThetaEstimate, alpha: f64) -> Self {
        OnlineLinearLearner { theta_hat, alpha }
    }

    pub fn sgd_update(&mut self, a_h: usize, a_r: usize, a_c: usize) -> Result<Vec<ThetaDelta>> {
        let delta = sgd_update(&mut self.theta_hat.theta_hat, a_h, a_r, a_c, self.alpha)?;
        if !delta.is_empty() {
            self.theta_hat.source = ThetaSource::Online;
        }
        Ok(delta)
    }
}

/// Initial weights read off a prior-head model from `entries` of history.
/// The first pick is uniform, so the estimate averages the emitted matrix
/// over every object as the pending pick.
pub fn bootstrap_theta(model: &Model, entries: &[[usize; 3]]) -> Result<ThetaEstimate> {
    if !model.spec().with_prior {
        return Err(Error::PriorRequired);
    }
    let env = *model.env();
    let mut acc = Array2::zeros((env.num_objects, env.num_locations));
    for pick in 0..env.num_objects {
        let window = HistoryWindow {
            k: model.spec().history_len,
            entries: entries.to_vec(),
            current_pick: pick,
        };
        let seq = encode_history(&window, &env)?;
        acc += &model.forward_theta(&seq)?.theta_hat;
    }
    acc /= env.num_objects as f64;
    Ok(ThetaEstimate {
        theta_hat: acc,
        source: ThetaSource::Bootstrap,
    })
}

/// Compute cost of [`bootstrap_theta`] from an empty history.
pub fn bootstrap_flops(model: &Model) -> u64 {
    model.env().num_objects as u64 * forward_macs(model.spec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    LinearScratch,
    BlrHac,
    OnlineTransformer,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [
        AgentKind::LinearScratch,
        AgentKind::BlrHac,
        AgentKind::OnlineTransformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::LinearScratch => "linear_scratch",
            AgentKind::BlrHac => "blr_hac",
            AgentKind::OnlineTransformer => "online_transformer",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != AgentKind::LinearScratch
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub update: u64,
    pub inference: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub a_r: usize,
    /// Probability per location; occupied locations are exactly zero.
    pub distribution: Vec<f64>,
}

/// An assistant that proposes placements and learns from corrections.
pub trait Agent: Send {
    fn kind(&self) -> AgentKind;
    fn propose(&mut self, state: &WorldState, a_h: usize, vacant: &[usize]) -> Result<Proposal>;
    /// Observes the resolved turn; returns any immediate weight changes.
    fn learn(
        &mut self,
        state_before: &WorldState,
        a_h: usize,
        a_r: usize,
        a_c: usize,
    ) -> Result<Vec<ThetaDelta>>;
    /// Called between consecutive episodes.
    fn between_episodes(&mut self) -> Result<()> {
        Ok(())
    }
    fn theta(&self) -> Option<&ThetaEstimate>;
    fn flops(&self) -> FlopLedger;
}

/// Shallow linear policy updated after every step. Covers both the zero
/// start and the bootstrapped start.
#[derive(Clone, Debug)]
pub struct LinearAgent {
    kind: AgentKind,
    learner: OnlineLinearLearner,
    spec: EnvironmentSpec,
    ledger: FlopLedger,
}

impl LinearAgent {
    pub fn scratch(spec: &EnvironmentSpec, alpha: f64) -> Self {
        LinearAgent {
            kind: AgentKind::LinearScratch,
            learner: OnlineLinearLearner::new(ThetaEstimate::zeros(spec), alpha),
            spec: *spec,
            ledger: FlopLedger::default(),
        }
    }

    /// BLR-HAC: starts from a bootstrapped estimate whose cost is charged
    /// to inference.
    pub fn bootstrapped(
        spec: &EnvironmentSpec,
        theta: ThetaEstimate,
        alpha: f64,
        bootstrap_cost: u64,
    ) -> Result<Self> {
        if theta.theta_hat.dim() != (spec.num_objects, spec.num_locations) {
            return Err(Error::DimensionMismatch(
                "bootstrap estimate does not match the environment".into(),
            ));
        }
        Ok(LinearAgent {
            kind: AgentKind::BlrHac,
            learner: OnlineLinearLearner::new(theta, alpha),
            spec: *spec,
            ledger: FlopLedger {
                update: 0,
                inference: bootstrap_cost,
            },
        })
    }

    pub fn learner(&self) -> &OnlineLinearLearner {
        &self.learner
    }
}

impl Agent for LinearAgent {
    fn kind(&self) -> AgentKind {
        self.kind
    }

    fn propose(&mut self, _state: &WorldState, a_h: usize, vacant: &[usize]) -> Result<Proposal> {
        if a_h >= self.spec.num_objects {
            return Err(Error::UnknownObject(a_h));
        }
        let row = self.learner.theta_hat.row(a_h);
        let a_r = masked_argmax(row, vacant)?;
        let distribution = action_distribution(row, vacant)?;
        self.ledger.inference += linear_inference_flops(&self.spec);
        Ok(Proposal { a_r, distribution })
    }

    fn learn(
        &mut self,
        _state: &WorldState,
        a_h: usize,
        a_r: usize,
        a_c: usize,
    ) -> Result<Vec<ThetaDelta>> {
        // every step is charged, agreement or not
        self.ledger.update += linear_update_flops(&self.spec);
        self.learner.sgd_update(a_h, a_r, a_c)
    }

    fn theta(&self) -> Option<&ThetaEstimate> {
        Some(&self.learner.theta_hat)
    }

    fn flops(&self) -> FlopLedger {
        self.ledger
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerAdaptConfig {
    pub learning_rate: f64,
    pub plan: UpdatePlan,
}

impl Default for TransformerAdaptConfig {
    fn default() -> Self {
        TransformerAdaptConfig {
            learning_rate: DEFAULT_TRANSFORMER_LR,
            plan: UpdatePlan::default(),
        }
    }
}

/// Transformer that keeps its inference path fixed and fine-tunes all
/// parameters on the session replay between episodes.
#[derive(Clone, Debug)]
pub struct OnlineTransformerAgent {
    model: Model,
    cfg: TransformerAdaptConfig,
    history: History,
    replay: Vec<Example>,
    seed: u64,
    finetunes: usize,
    ledger: FlopLedger,
}

impl OnlineTransformerAgent {
    pub fn new(model: Model, cfg: TransformerAdaptConfig, seed: u64) -> Result<Self> {
        if model.spec().family != Family::CausalTransformer {
            return Err(Error::Config(format!(
                "online fine-tuning needs a causal_transformer, got {}",
                model.spec().family
            )));
        }
        let k = model.spec().history_len;
        Ok(OnlineTransformerAgent {
            model,
            cfg,
            history: History::new(k),
            replay: Vec::new(),
            seed,
            finetunes: 0,
            ledger: FlopLedger::default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    /// Five (by default) plain gradient steps over minibatches drawn from
    /// the replay. No-op on an empty replay.
    pub fn finetune(&mut self) -> Result<usize> {
        if self.replay.is_empty() {
            return Ok(0);
        }
        let mut rng = rng_for(self.seed, &[stream::REPLAY, self.finetunes as u64]);
        self.finetunes += 1;
        let mut opt = Optimizer::new(
            OptimizerKind::Sgd,
            self.cfg.learning_rate,
            self.model.params(),
        );
        let bs = self.cfg.plan.batch_size.max(1);
        for step in 0..self.cfg.plan.steps {
            let batch: Vec<&Example> = if self.replay.len() <= bs {
                self.replay.iter().collect()
            } else {
                self.replay.choose_multiple(&mut rng, bs).collect()
            };
            let (loss, grads) = self.model.batch_gradients(&batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch: self.finetunes,
                    batch: step,
                });
            }
            opt.step(self.model.params_mut(), &grads);
        }
        self.ledger.update += count_flops(
            FlopSubject::Model(self.model.spec()),
            FlopMode::Update,
            self.model.env(),
            self.cfg.plan,
        );
        Ok(self.cfg.plan.steps)
    }
}

impl Agent for OnlineTransformerAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::OnlineTransformer
    }

    fn propose(&mut self, _state: &WorldState, a_h: usize, vacant: &[usize]) -> Result<Proposal> {
        let seq = encode_history(&self.history.window(a_h), self.model.env())?;
        let scores = self.model.location_scores(&seq, a_h)?;
        let a_r = masked_argmax(&scores, vacant)?;
        let distribution = action_distribution(&scores, vacant)?;
        self.ledger.inference += forward_macs(self.model.spec());
        Ok(Proposal { a_r, distribution })
    }

    fn learn(
        &mut self,
        state_before: &WorldState,
        a_h: usize,
        a_r: usize,
        a_c: usize,
    ) -> Result<Vec<ThetaDelta>> {
        let tokens = encode_history(&self.history.window(a_h), self.model.env())?;
        self.replay.push(Example {
            tokens,
            a_h,
            vacant: state_before.vacant_locations(),
            label: a_c,
        });
        self.history.push([a_h, a_r, a_c]);
        Ok(Vec::new())
    }

    fn between_episodes(&mut self) -> Result<()> {
        self.finetune().map(|_| ())
    }

    fn theta(&self) -> Option<&ThetaEstimate> {
        None
    }

    fn flops(&self) -> FlopLedger {
        self.ledger
    }
}

/// Builds fresh agents of one kind, one per adapted preference.
#[derive(Clone, Debug)]
pub enum AgentFactory {
    LinearScratch {
        alpha: f64,
    },
    BlrHac {
        alpha: f64,
        bootstrap: ThetaEstimate,
        bootstrap_cost: u64,
    },
    OnlineTransformer {
        model: Model,
        cfg: TransformerAdaptConfig,
    },
}

impl AgentFactory {
    pub fn blr_hac(model: &Model, alpha: f64) -> Result<Self> {
        Ok(AgentFactory::BlrHac {
            alpha,
            bootstrap: bootstrap_theta(model, &[])?,
            bootstrap_cost: bootstrap_flops(model),
        })
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            AgentFactory::LinearScratch { .. } => AgentKind::LinearScratch,
            AgentFactory::BlrHac { .. } => AgentKind::BlrHac,
            AgentFactory::OnlineTransformer { .. } => AgentKind::OnlineTransformer,
        }
    }

    pub fn build(&self, spec: &EnvironmentSpec, seed: u64) -> Result<Box<dyn Agent>> {
        Ok(match self {
            AgentFactory::LinearScratch { alpha } => Box::new(LinearAgent::scratch(spec, *alpha)),
            AgentFactory::BlrHac {
                alpha,
                bootstrap,
                bootstrap_cost,
            } => Box::new(LinearAgent::bootstrapped(
                spec,
                bootstrap.clone(),
                *alpha,
                *bootstrap_cost,
            )?),
            AgentFactory::OnlineTransformer { model, cfg } => {
                if model.env() != spec {
                    return Err(Error::DimensionMismatch(
                        "checkpoint environment differs".into(),
                    ));
                }
                Box::new(OnlineTransformerAgent::new(model.clone(), *cfg, seed)?)
            }
        })
    }
}

/// Seed of adaptation episode `episode` (0-based) for test preference `pref`.
pub fn adapt_episode_seed(seed: u64, pref: usize, episode: usize) -> u64 {
    derive_seed(seed, &[stream::ADAPT, pref as u64, episode as u64])
}

/// Seed handed to the agent built for preference `pref`.
pub fn agent_seed(seed: u64, pref: usize) -> u64 {
    derive_seed(seed, &[stream::SESSION, pref as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub episode: Episode,
    pub accuracy: f64,
    pub deltas: Vec<Vec<ThetaDelta>>,
}

/// Plays one episode: uniform picks, agent proposal, expert correction,
/// agent learns from every resolved turn.
pub fn run_adaptation_episode(
    agent: &mut dyn Agent,
    spec: &EnvironmentSpec,
    theta_true: &PreferenceMatrix,
    episode_seed: u64,
) -> Result<EpisodeOutcome> {
    let mut state = new_episode(spec, episode_seed)?;
    let mut picks = pick_rng(episode_seed);
    let mut steps = Vec::with_capacity(spec.num_locations);
    let mut deltas = Vec::with_capacity(spec.num_locations);
    while !state.is_complete() {
        let a_h = random_pick(&state, &mut picks)?;
        let vacant = state.vacant_locations();
        let a_r = agent.propose(&state, a_h, &vacant)?.a_r;
        let a_c = expert_placement(theta_true, a_h, &vacant)?;
        let record = resolve_turn(&state, a_h, a_r, a_c)?;
        deltas.push(agent.learn(&state, a_h, a_r, a_c)?);
        state = record.state_after.clone();
        steps.push(record);
    }
    let episode = Episode {
        spec: *spec,
        preference_id: theta_true.preference_id.clone(),
        seed: episode_seed,
        steps,
    };
    Ok(EpisodeOutcome {
        accuracy: episode.accuracy(),
        episode,
        deltas,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Stationary,
    Nonstationary,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Stationary => "stationary",
            Protocol::Nonstationary => "nonstationary",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Protocol::Stationary),
            "nonstationary" => Ok(Protocol::Nonstationary),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub episodes: usize,
    /// Episodes played before the switch in the nonstationary protocol.
    pub switch_after: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            episodes: DEFAULT_EPISODES,
            switch_after: DEFAULT_SWITCH_AFTER,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationCurve {
    pub protocol: Protocol,
    pub env: String,
    pub agent: AgentKind,
    pub switch_episode: Option<usize>,
    pub num_preferences: usize,
    pub per_episode_accuracy: Vec<f64>,
    pub stderr: Vec<f64>,
    pub cumulative_update_flops: Vec<u64>,
    pub cumulative_inference_flops: Vec<u64>,
}

/// Per-preference accuracy series and FLOP ledgers after each episode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub accuracy: Vec<f64>,
    pub ledgers: Vec<FlopLedger>,
}

/// Index of the replacement preference for run `pref`; never `pref` itself.
pub fn switch_target(seed: u64, pref: usize, n: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::Config(
            "a preference switch needs at least two test preferences".into(),
        ));
    }
    let mut rng = rng_for(seed, &[stream::SWITCH, pref as u64]);
    let j = rng.gen_range(0..n - 1);
    Ok(if j >= pref { j + 1 } else { j })
}

fn run_preference(
    factory: &AgentFactory,
    test: &[PreferenceMatrix],
    spec: &EnvironmentSpec,
    cfg: &ExperimentConfig,
    protocol: Protocol,
    pref: usize,
) -> Result<RunTrace> {
    let mut agent = factory.build(spec, agent_seed(cfg.seed, pref))?;
    let switched = match protocol {
        Protocol::Stationary => None,
        Protocol::Nonstationary => Some(switch_target(cfg.seed, pref, test.len())?),
    };
    let mut trace = RunTrace {
        accuracy: Vec::with_capacity(cfg.episodes),
        ledgers: Vec::with_capacity(cfg.episodes),
    };
    for e in 0..cfg.episodes {
        if e > 0 {
            agent.between_episodes()?;
        }
        let theta = match switched {
            Some(j) if e >= cfg.switch_after => &test[j],
            _ => &test[pref],
        };
        let out = run_adaptation_episode(
            agent.as_mut(),
            spec,
            theta,
            adapt_episode_seed(cfg.seed, pref, e),
        )?;
        trace.accuracy.push(out.accuracy);
        trace.ledgers.push(agent.flops());
    }
    Ok(trace)
}

/// One trace per test preference, in population order.
pub fn run_protocol_traces(
    factory: &AgentFactory,
    test: &[PreferenceMatrix],
    spec: &EnvironmentSpec,
    cfg: &ExperimentConfig,
    protocol: Protocol,
) -> Result<Vec<RunTrace>> {
    if test.is_empty() {
        return Err(Error::Config("test population is empty".into()));
    }
    let run = |p: usize| run_preference(factory, test, spec, cfg, protocol, p);
    let idx: Vec<usize> = (0..test.len()).collect();
    let results: Vec<Result<RunTrace>> = if cfg.jobs <= 1 {
        idx.into_iter().map(run).collect()
    } else {
        let per = idx.len().div_ceil(cfg.jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .chunks(per)
                .map(|chunk| s.spawn(move || chunk.iter().map(|&p| run(p)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("adaptation worker panicked"))
                .collect()
        })
    };
    results.into_iter().collect()
}

/// Averages traces into a curve. Ledgers are per session, so the mean
/// over preferences is reported (they are identical for fixed-cost agents).
pub fn summarize(
    traces: &[RunTrace],
    protocol: Protocol,
    spec: &EnvironmentSpec,
    agent: AgentKind,
    cfg: &ExperimentConfig,
) -> AdaptationCurve {
    let n = traces.len();
    let episodes = traces.first().map_or(0, |t| t.accuracy.len());
    let mut mean = Vec::with_capacity(episodes);
    let mut stderr = Vec::with_capacity(episodes);
    let mut upd = Vec::with_capacity(episodes);
    let mut inf = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let xs: Vec<f64> = traces.iter().map(|t| t.accuracy[e]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        mean.push(m);
        stderr.push(se);
        let mean_u64 = |f: &dyn Fn(&FlopLedger) -> u64| {
            (traces
                .iter()
                .map(|t| f(&t.ledgers[e]) as u128)
                .sum::<u128>()
                / n as u128) as u64
        };
        upd.push(mean_u64(&|l| l.update));
        inf.push(mean_u64(&|l| l.inference));
    }
    AdaptationCurve {
        protocol,
        env: spec.name.to_string(),
        agent,
        switch_episode: (protocol == Protocol::Nonstationary).then_some(cfg.switch_after),
        num_preferences: n,
        per_episode_accuracy: mean,
        stderr,
        cumulative_update_flops: upd,
        cumulative_inference_flops: inf,
    }
}

pub fn stationary_experiment(
    factory: &AgentFactory,
    test: &[PreferenceMatrix],
    spec: &EnvironmentSpec,
    cfg: &ExperimentConfig,
) -> Result<AdaptationCurve> {
    let traces = run_protocol_traces(factory, test, spec, cfg, Protocol::Stationary)?;
    Ok(summarize(
        &traces,
        Protocol::Stationary,
        spec,
        factory.kind(),
        cfg,
    ))
}

pub fn nonstationary_experiment(
    factory: &AgentFactory,
    test: &[PreferenceMatrix],
    spec: &EnvironmentSpec,
    cfg: &ExperimentConfig,
) -> Result<AdaptationCurve> {
    if cfg.switch_after >= cfg.episodes {
        return Err(Error::Config(
            "switch must happen before the last episode".into(),
        ));
    }
    let traces = run_protocol_traces(factory, test, spec, cfg, Protocol::Nonstationary)?;
    Ok(summarize(
        &traces,
        Protocol::Nonstationary,
        spec,
        factory.kind(),
        cfg,
    ))
}

/// Long-form CSV, one row per (curve, episode); episodes are 1-based.
pub fn curves_csv(curves: &[AdaptationCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "protocol",
        "env",
        "agent",
        "episode",
        "mean_accuracy",
        "stderr",
        "cum_update_flops",
        "cum_inference_flops",
    ])?;
    for c in curves {
        for e in 0..c.per_episode_accuracy.len() {
            w.write_record([
                c.protocol.to_string(),
                c.env.clone(),
                c.agent.to_string(),
                (e + 1).to_string(),
                format!("{:.6}", c.per_episode_accuracy[e]),
                format!("{:.6}", c.stderr[e]),
                c.cumulative_update_flops[e].to_string(),
                c.cumulative_inference_flops[e].to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelSpec;
    use crate::population::{sample_population, PopulationConfig, Split};
    use ndarray::array;

    fn test_prefs(n: usize, seed: u64) -> Vec<PreferenceMatrix> {
        let mut cfg = PopulationConfig::desk(seed);
        cfg.prefs_per_split.test = n;
        sample_population(&cfg, &EnvironmentSpec::small())
            .unwrap()
            .split(Split::Test)
            .to_vec()
    }

    #[test]
    fn update_rule_worked_example() {
        let mut th = Array2::zeros((5, 5));
        let d = sgd_update(&mut th, 2, 0, 3, 1.0).unwrap();
        let mut want = Array2::<f64>::zeros((5, 5));
        want[[2, 0]] = -1.0;
        want[[2, 3]] = 1.0;
        assert_eq!(th, want);
        assert_eq!(d.len(), 2);
        let before = th.clone();
        assert!(sgd_update(&mut th, 4, 1, 1, 10.0).unwrap().is_empty());
        assert_eq!(th, before);
        assert!(sgd_update(&mut th, 5, 1, 1, 1.0).is_err());
        assert!(sgd_update(&mut th, 0, 5, 1, 1.0).is_err());
    }

    #[test]
    fn repeated_disagreements_accumulate() {
        let mut th = array![[0.0, 0.0], [0.0, 0.0]];
        for _ in 0..7 {
            sgd_update(&mut th, 1, 0, 1, 5.0).unwrap();
        }
        assert_eq!(th, array![[0.0, 0.0], [-35.0, 35.0]]);
    }

    #[test]
    fn untrained_bootstrap_is_zero() {
        let env = EnvironmentSpec::small();
        let mut spec = ModelSpec::new(Family::CausalTransformer, env, true).with_dims(8, 1);
        spec.num_heads = 2;
        let m = Model::new(spec, 3).unwrap();
        let th = bootstrap_theta(&m, &[]).unwrap();
        assert_eq!(th.theta_hat, Array2::<f64>::zeros((5, 5)));
        assert_eq!(
            bootstrap_theta(&m, &[[0, 1, 1]]).unwrap(),
            bootstrap_theta(&m, &[[0, 1, 1]]).unwrap()
        );
        let no_prior = Model::new(
            ModelSpec {
                with_prior: false,
                ..m.spec().clone()
            },
            3,
        )
        .unwrap();
        assert!(matches!(
            bootstrap_theta(&no_prior, &[]),
            Err(Error::PriorRequired)
        ));
    }

    #[test]
    fn true_theta_agent_is_perfect_and_static() {
        let env = EnvironmentSpec::small();
        let prefs = test_prefs(3, 1);
        for p in &prefs {
            let est = ThetaEstimate {
                theta_hat: p.theta.clone(),
                source: ThetaSource::Bootstrap,
            };
            let mut agent = LinearAgent::bootstrapped(&env, est, 10.0, 0).unwrap();
            for e in 0..3 {
                let out = run_adaptation_episode(&mut agent, &env, p, 100 + e).unwrap();
                assert_eq!(out.accuracy, 1.0);
            }
            assert_eq!(agent.learner().theta_hat.theta_hat, p.theta);
        }
    }

    #[test]
    fn disagreements_touch_two_entries_each() {
        let env = EnvironmentSpec::small();
        let prefs = test_prefs(4, 2);
        let mut agent = LinearAgent::scratch(&env, 10.0);
        let before = agent.learner().theta_hat.theta_hat.clone();
        let out = run_adaptation_episode(&mut agent, &env, &prefs[0], 9).unwrap();
        let d = out.episode.steps.iter().filter(|s| !s.agreed()).count();
        let after = &agent.learner().theta_hat.theta_hat;
        let changed = before
            .iter()
            .zip(after.iter())
            .filter(|(a, b)| a != b)
            .count();
        // each object is picked once per episode, so no entry is hit twice
        assert_eq!(changed, 2 * d);
        assert_eq!(out.deltas.iter().map(Vec::len).sum::<usize>(), 2 * d);
    }

    #[test]
    fn linear_ledger_charges_every_step() {
        let env = EnvironmentSpec::small();
        let prefs = test_prefs(2, 3);
        let cfg = ExperimentConfig {
            episodes: 4,
            ..ExperimentConfig::default()
        };
        let curve = stationary_experiment(
            &AgentFactory::LinearScratch { alpha: 10.0 },
            &prefs,
            &env,
            &cfg,
        )
        .unwrap();
        for (e, &u) in curve.cumulative_update_flops.iter().enumerate() {
            assert_eq!(u, (e as u64 + 1) * 5 * 50);
            assert_eq!(curve.cumulative_inference_flops[e], (e as u64 + 1) * 5 * 25);
        }
    }

    #[test]
    fn switch_target_differs() {
        for p in 0..10 {
            let j = switch_target(4, p, 10).unwrap();
            assert_ne!(j, p);
            assert!(j < 10);
        }
        assert!(switch_target(0, 0, 1).is_err());
    }

    #[test]
    fn protocols_share_the_prefix() {
        let env = EnvironmentSpec::small();
        let prefs = test_prefs(6, 4);
        let cfg = ExperimentConfig {
            episodes: 14,
            switch_after: 10,
            seed: 8,
            jobs: 1,
        };
        let f = AgentFactory::LinearScratch { alpha: 10.0 };
        let s = stationary_experiment(&f, &prefs, &env, &cfg).unwrap();
        let n = nonstationary_experiment(&f, &prefs, &env, &cfg).unwrap();
        assert_eq!(s.per_episode_accuracy[..10], n.per_episode_accuracy[..10]);
        assert_eq!(n.switch_episode, Some(10));
        assert_eq!(s.switch_episode, None);
        let par =
            stationary_experiment(&f, &prefs, &env, &ExperimentConfig { jobs: 3, ..cfg }).unwrap();
        assert_eq!(par, s);
    }

    #[test]
    fn transformer_finetune_runs_between_episodes() {
        let env = EnvironmentSpec::small();
        let mut spec = ModelSpec::new(Family::CausalTransformer, env, false).with_dims(8, 1);
        spec.num_heads = 2;
        spec.history_len = 6;
        let model = Model::new(spec, 5).unwrap();
        let cfg = TransformerAdaptConfig {
            learning_rate: 1e-2,
            plan: UpdatePlan {
                steps: 5,
                batch_size: 4,
            },
        };
        let mut agent = OnlineTransformerAgent::new(model.clone(), cfg, 1).unwrap();
        assert_eq!(agent.finetune().unwrap(), 0);
        assert_eq!(agent.flops().update, 0);
        let prefs = test_prefs(2, 5);
        run_adaptation_episode(&mut agent, &env, &prefs[0], 3).unwrap();
        assert_eq!(agent.replay_len(), 5);
        agent.between_episodes().unwrap();
        let per = count_flops(
            FlopSubject::Model(agent.model().spec()),
            FlopMode::Update,
            &env,
            cfg.plan,
        );
        assert_eq!(agent.flops().update, per);
        assert_ne!(agent.model().params(), model.params());
        assert!(per > 100 * linear_update_flops(&env));
    }

    #[test]
    fn curve_csv_shape() {
        let env = EnvironmentSpec::small();
        let prefs = test_prefs(2, 6);
        let cfg = ExperimentConfig {
            episodes: 3,
            ..ExperimentConfig::default()
        };
        let c = stationary_experiment(
            &AgentFactory::LinearScratch { alpha: 1.0 },
            &prefs,
            &env,
            &cfg,
        )
        .unwrap();
        let csv = curves_csv(&[c]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("protocol,env,agent,episode,mean_accuracy,stderr,cum_update_flops,cum_inference_flops")
        );
        assert_eq!(lines.count(), 3);
    }
}
