//! Wire types. Every response body carries `"schema": "blrhac.api/1"`.

use serde::{Deserialize, Serialize};

use blrhac::adapt::{AgentKind, Proposal};
use blrhac::nn::ModelSpec;
use blrhac::session::{SessionMetrics, SessionState, TurnResult};
use blrhac::{EnvName, EnvironmentSpec};

pub const API_SCHEMA: &str = "blrhac.api/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Envelope {
            schema: API_SCHEMA.to_string(),
            body,
        }
    }
}

/// Either a preset name or explicit dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvRequest {
    Preset(EnvName),
    Spec(EnvironmentSpec),
}

impl EnvRequest {
    pub fn resolve(&self) -> blrhac::Result<EnvironmentSpec> {
        match self {
            EnvRequest::Preset(name) => EnvironmentSpec::preset(*name),
            EnvRequest::Spec(spec) => Ok(*spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderRequest {
    /// Index into the server's test preferences.
    pub preference_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub env: EnvRequest,
    pub agent: AgentKind,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub simulated_leader: Option<LeaderRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub state: SessionState,
    pub theta: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PickRequest {
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickResponse {
    pub proposal: Proposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    pub location: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResponse {
    pub result: TurnResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub proposal: Proposal,
    pub result: TurnResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub state: SessionState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub metrics: SessionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub name: String,
    pub model: ModelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointList {
    pub checkpoints: Vec<CheckpointInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

/// Messages pushed on a session's event stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Proposal { proposal: Proposal },
    Turn { result: TurnResult },
    State { state: SessionState },
    Metrics { metrics: SessionMetrics },
    Theta { theta: Vec<Vec<f64>> },
}

impl SessionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SessionEvent::Proposal { .. } => "proposal",
            SessionEvent::Turn { .. } => "turn",
            SessionEvent::State { .. } => "state",
            SessionEvent::Metrics { .. } => "metrics",
            SessionEvent::Theta { .. } => "theta",
        }
    }
}
