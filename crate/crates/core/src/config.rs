//! Versioned JSON run configuration. Command-line flags override fields
//! after loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{ExperimentConfig, TransformerAdaptConfig, DEFAULT_ALPHA};
use crate::env::EnvironmentSpec;
use crate::error::{Error, Result};
use crate::nn::model::{Family, ModelSpec};
use crate::nn::tokens::DEFAULT_HISTORY;
use crate::population::PopulationConfig;
use crate::pretrain::{TrainConfig, SWEEP_LEARNING_RATES};

pub const CONFIG_SCHEMA: &str = "blrhac.config/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub with_prior: bool,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub history_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::CausalTransformer,
            with_prior: true,
            hidden_dim: 64,
            num_layers: 3,
            num_heads: 4,
            history_len: DEFAULT_HISTORY,
        }
    }
}

impl ModelConfig {
    pub fn to_spec(&self, env: &EnvironmentSpec) -> ModelSpec {
        ModelSpec {
            family: self.family,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            with_prior: self.with_prior,
            spec: *env,
            history_len: self.history_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub transformer: TransformerAdaptConfig,
    pub experiment: ExperimentConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: DEFAULT_ALPHA,
            transformer: TransformerAdaptConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    pub families: Vec<Family>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            learning_rates: SWEEP_LEARNING_RATES.to_vec(),
            families: Family::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    pub env: EnvironmentSpec,
    pub seed: u64,
    pub population: PopulationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Small environment, laptop-sized population and the default model.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA.to_string(),
            env: EnvironmentSpec::small(),
            seed,
            population: PopulationConfig::desk(seed),
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            adapt: AdaptConfig {
                experiment: ExperimentConfig {
                    seed,
                    ..ExperimentConfig::default()
                },
                ..AdaptConfig::default()
            },
            sweep: SweepConfig::default(),
        }
    }

    /// Propagates one seed to every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.population.seed = seed;
        self.train.seed = seed;
        self.adapt.experiment.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema_version `{}`, expected `{CONFIG_SCHEMA}`",
                self.schema_version
            )));
        }
        self.env.validate()?;
        self.population.validate()?;
        self.train.validate()?;
        self.model.to_spec(&self.env).validate()?;
        if !(self.adapt.alpha.is_finite() && self.adapt.alpha > 0.0) {
            return Err(Error::Config("adapt.alpha must be positive".into()));
        }
        if self.adapt.experiment.episodes == 0 {
            return Err(Error::Config(
                "adapt.experiment.episodes must be positive".into(),
            ));
        }
        if self
            .sweep
            .learning_rates
            .iter()
            .any(|lr| !(lr.is_finite() && *lr > 0.0))
        {
            return Err(Error::Config(
                "sweep learning rates must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
