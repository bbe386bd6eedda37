//! Turn-by-turn collaboration session: pick, proposal, correction.
//!
//! Episode seeds and agent seeds follow the offline harness for preference
//! slot 0, so a session fed the harness's actions reproduces its trajectory.

use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_episode_seed, agent_seed, Agent, AgentFactory, AgentKind, FlopLedger, Proposal,
    ThetaDelta,
};
use crate::env::{
    new_episode, pick_rng, random_pick, resolve_turn, EnvironmentSpec, StepRecord, WorldState,
};
use crate::error::{Error, Result};
use crate::population::{expert_placement, PreferenceMatrix};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingTurn {
    pub a_h: usize,
    pub proposal: Proposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub a_h: usize,
    pub a_r: usize,
    pub a_c: usize,
    pub agreed: bool,
    pub theta_delta: Vec<ThetaDelta>,
    /// 0-based index of the episode this turn belonged to.
    pub episode_index: usize,
    /// Set when this turn finished its episode.
    pub episode_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub env: EnvironmentSpec,
    pub agent: AgentKind,
    pub episode_index: usize,
    pub turn_index: usize,
    pub episode_objects: Vec<usize>,
    /// Location of each episode object, aligned with `episode_objects`.
    pub placements: Vec<Option<usize>>,
    pub vacant: Vec<usize>,
    pub unplaced: Vec<usize>,
    pub pending: Option<PendingTurn>,
    pub simulated_leader: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub per_episode_accuracy: Vec<f64>,
    pub flops: FlopLedger,
    pub steps: usize,
    /// Row-major `O x L` estimate for linear agents.
    pub theta: Option<Vec<Vec<f64>>>,
}

pub struct Session {
    spec: EnvironmentSpec,
    seed: u64,
    agent: Box<dyn Agent>,
    leader: Option<PreferenceMatrix>,
    state: WorldState,
    picks: Rng,
    episode_index: usize,
    pending: Option<PendingTurn>,
    steps: Vec<StepRecord>,
    accuracy: Vec<f64>,
    total_steps: usize,
}

fn theta_rows(agent: &dyn Agent) -> Option<Vec<Vec<f64>>> {
    agent
        .theta()
        .map(|t| t.theta_hat.outer_iter().map(|r| r.to_vec()).collect())
}

impl Session {
    /// `leader` holds the weights of a simulated leader; `None` means a
    /// human supplies picks and corrections.
    pub fn new(
        spec: &EnvironmentSpec,
        factory: &AgentFactory,
        seed: u64,
        leader: Option<PreferenceMatrix>,
    ) -> Result<Self> {
        spec.validate()?;
        if let Some(p) = &leader {
            if !p.matches(spec) {
                return Err(Error::DimensionMismatch(
                    "leader preference does not match the environment".into(),
                ));
            }
        }
        let agent = factory.build(spec, agent_seed(seed, 0))?;
        let ep_seed = adapt_episode_seed(seed, 0, 0);
        Ok(Session {
            spec: *spec,
            seed,
            agent,
            leader,
            state: new_episode(spec, ep_seed)?,
            picks: pick_rng(ep_seed),
            episode_index: 0,
            pending: None,
            steps: Vec::new(),
            accuracy: Vec::new(),
            total_steps: 0,
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn agent_kind(&self) -> AgentKind {
        self.agent.kind()
    }

    pub fn world(&self) -> &WorldState {
        &self.state
    }

    pub fn episode_seed(&self) -> u64 {
        adapt_episode_seed(self.seed, 0, self.episode_index)
    }

    pub fn theta(&self) -> Option<Vec<Vec<f64>>> {
        theta_rows(self.agent.as_ref())
    }

    pub fn submit_pick(&mut self, a_h: usize) -> Result<Proposal> {
        if self.pending.is_some() {
            return Err(Error::OutOfTurn("a correction is pending"));
        }
        if !self.state.contains_object(a_h) {
            return Err(Error::UnknownObject(a_h));
        }
        if !self.state.is_unplaced(a_h) {
            return Err(Error::AlreadyPlaced(a_h));
        }
        let vacant = self.state.vacant_locations();
        let proposal = self.agent.propose(&self.state, a_h, &vacant)?;
        self.pending = Some(PendingTurn {
            a_h,
            proposal: proposal.clone(),
        });
        Ok(proposal)
    }

    pub fn submit_correction(&mut self, a_c: usize) -> Result<TurnResult> {
        let Some(pending) = self.pending.as_ref() else {
            return Err(Error::OutOfTurn("no pick is awaiting correction"));
        };
        let (a_h, a_r) = (pending.a_h, pending.proposal.a_r);
        let record = resolve_turn(&self.state, a_h, a_r, a_c)?;
        let delta = self.agent.learn(&self.state, a_h, a_r, a_c)?;
        self.pending = None;
        self.state = record.state_after.clone();
        self.steps.push(record);
        self.total_steps += 1;
        let episode_index = self.episode_index;
        let mut episode_accuracy = None;
        if self.state.is_complete() {
            let acc =
                self.steps.iter().filter(|s| s.agreed()).count() as f64 / self.steps.len() as f64;
            self.accuracy.push(acc);
            episode_accuracy = Some(acc);
            self.advance_episode()?;
        }
        Ok(TurnResult {
            a_h,
            a_r,
            a_c,
            agreed: a_r == a_c,
            theta_delta: delta,
            episode_index,
            episode_accuracy,
        })
    }

    fn advance_episode(&mut self) -> Result<()> {
        self.agent.between_episodes()?;
        self.episode_index += 1;
        let ep_seed = self.episode_seed();
        self.state = new_episode(&self.spec, ep_seed)?;
        self.picks = pick_rng(ep_seed);
        self.steps.clear();
        Ok(())
    }

    /// The simulated leader picks the next object and corrects the proposal.
    pub fn simulate_turn(&mut self) -> Result<(Proposal, TurnResult)> {
        let Some(leader) = self.leader.clone() else {
            return Err(Error::Session("session has no simulated leader".into()));
        };
        if self.pending.is_some() {
            return Err(Error::OutOfTurn("a correction is pending"));
        }
        let a_h = random_pick(&self.state, &mut self.picks)?;
        let proposal = self.submit_pick(a_h)?;
        let vacant = self.state.vacant_locations();
        let a_c = expert_placement(&leader, a_h, &vacant)?;
        let result = self.submit_correction(a_c)?;
        Ok((proposal, result))
    }

    pub fn state(&self) -> SessionState {
        let objects = self.state.episode_objects().to_vec();
        SessionState {
            env: self.spec,
            agent: self.agent.kind(),
            episode_index: self.episode_index,
            turn_index: self.state.turn_index(),
            placements: objects
                .iter()
                .map(|&o| self.state.placement_of(o))
                .collect(),
            episode_objects: objects,
            vacant: self.state.vacant_locations(),
            unplaced: self.state.unplaced_objects(),
            pending: self.pending.clone(),
            simulated_leader: self.leader.is_some(),
        }
    }

    pub fn metrics(&self) -> SessionMetrics {
        SessionMetrics {
            per_episode_accuracy: self.accuracy.clone(),
            flops: self.agent.flops(),
            steps: self.total_steps,
            theta: self.theta(),
        }
    }
}
