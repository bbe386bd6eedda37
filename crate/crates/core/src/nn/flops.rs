//! Analytic compute accounting under a dense-operation convention.
//!
//! The linear policy `phi(a_h) . theta . phi(A_r)` costs `O * L` to evaluate
//! and its corrective update touches the two rank-one terms, `2 * O * L`.
//! Neural models are charged multiply-accumulates of a full-length window;
//! backward is charged twice the forward, and an update is
//! `steps * batch * (forward + backward)`.

use serde::{Deserialize, Serialize};

use super::model::{Family, ModelSpec};
use crate::env::EnvironmentSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopMode {
    Inference,
    Update,
}

#[derive(Clone, Copy, Debug)]
pub enum FlopSubject<'a> {
    LinearPolicy,
    Model(&'a ModelSpec),
}

/// Gradient steps and minibatch size charged per neural update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatePlan {
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for UpdatePlan {
    fn default() -> Self {
        UpdatePlan {
            steps: 5,
            batch_size: 16,
        }
    }
}

pub fn linear_inference_flops(spec: &EnvironmentSpec) -> u64 {
    spec.cells() as u64
}

pub fn linear_update_flops(spec: &EnvironmentSpec) -> u64 {
    2 * spec.cells() as u64
}

/// Forward multiply-accumulates of one full-window pass.
pub fn forward_macs(model: &ModelSpec) -> u64 {
    let t = model.seq_len() as u64;
    let d = model.hidden_dim as u64;
    let layers = model.num_layers as u64;
    let cells = model.spec.cells() as u64;
    let head_out = model.head_width() as u64;
    let head_in = if model.with_prior { d } else { 2 * d };
    let readout = if model.with_prior { cells } else { 0 };
    match model.family {
        Family::ShallowLinear => {
            if model.with_prior {
                cells
            } else {
                model.spec.num_locations as u64
            }
        }
        Family::DeepLinear | Family::Mlp => t * d + layers * d * d + head_in * head_out + readout,
        Family::CausalTransformer => {
            let per_block = t * 3 * d * d + 2 * t * t * d + t * d * d + 8 * t * d * d;
            layers * per_block + head_in * head_out + readout
        }
    }
}

pub fn count_flops(
    subject: FlopSubject<'_>,
    mode: FlopMode,
    spec: &EnvironmentSpec,
    plan: UpdatePlan,
) -> u64 {
    match (subject, mode) {
        (FlopSubject::LinearPolicy, FlopMode::Inference) => linear_inference_flops(spec),
        (FlopSubject::LinearPolicy, FlopMode::Update) => linear_update_flops(spec),
        (FlopSubject::Model(m), FlopMode::Inference) => forward_macs(m),
        (FlopSubject::Model(m), FlopMode::Update) => {
            plan.steps as u64 * plan.batch_size as u64 * 3 * forward_macs(m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_policy_counts() {
        let plan = UpdatePlan::default();
        let small = EnvironmentSpec::small();
        let large = EnvironmentSpec::large();
        assert_eq!(
            count_flops(FlopSubject::LinearPolicy, FlopMode::Update, &small, plan),
            50
        );
        assert_eq!(
            count_flops(FlopSubject::LinearPolicy, FlopMode::Inference, &large, plan),
            625
        );
        assert_eq!(
            count_flops(FlopSubject::LinearPolicy, FlopMode::Update, &large, plan),
            1250
        );
    }

    #[test]
    fn transformer_update_dwarfs_linear() {
        let small = EnvironmentSpec::small();
        let spec = ModelSpec::new(Family::CausalTransformer, small, true);
        let plan = UpdatePlan::default();
        let t = count_flops(FlopSubject::Model(&spec), FlopMode::Update, &small, plan);
        let l = count_flops(FlopSubject::LinearPolicy, FlopMode::Update, &small, plan);
        assert!(t > 100 * l);
        assert!(forward_macs(&spec) > forward_macs(&ModelSpec::new(Family::Mlp, small, true)));
    }

    #[test]
    fn shallow_prior_model_matches_linear_policy() {
        let spec = ModelSpec::new(Family::ShallowLinear, EnvironmentSpec::medium(), true);
        assert_eq!(forward_macs(&spec), 100);
    }
}
