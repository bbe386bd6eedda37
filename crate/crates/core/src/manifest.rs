use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;

pub const MANIFEST_SCHEMA: &str = "blrhac.manifest/1";

/// Provenance record written next to every command's artifacts. Output
/// paths are relative to the output directory. `duration_secs` is the only
/// field that varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seed: config.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(out_dir.as_ref().join(Self::file_name(&self.command)), self)
    }
}
