//! Small dense numerical stack: reverse-mode tape, model families, history
//! tokens, optimizers, checkpoints and analytic compute counters.

pub mod checkpoint;
pub mod flops;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tokens;

pub use checkpoint::{Checkpoint, CheckpointFile, TrainingMeta};
pub use flops::{count_flops, FlopMode, FlopSubject, UpdatePlan};
pub use model::{Example, Family, Model, ModelSpec, ThetaEstimate, ThetaSource};
pub use optim::{Optimizer, OptimizerKind};
pub use tokens::{encode_history, History, HistoryWindow, TokenSequence};
