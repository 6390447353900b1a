use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: Option<&ExperimentConfig>, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            config_hash: config.map(ExperimentConfig::hash),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            artifacts: Vec::new(),
        }
    }

    /// Writes `manifest.json` and, when there is one, the effective config
    /// next to the artifacts so the run can be repeated from the directory.
    pub fn write(&self, dir: &Path, config: Option<&ExperimentConfig>) -> std::io::Result<()> {
        if let Some(c) = config {
            std::fs::write(dir.join("config.json"), c.to_json())?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifests serialize");
        std::fs::write(dir.join("manifest.json"), text)
    }
}
