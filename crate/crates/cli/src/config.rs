//! The TOML run configuration.
//!
//! ```toml
//! data = "data"            # optional, relative to this file
//!
//! [model]
//! lag = 3
//! seed = 7
//!
//! [simulate]
//! kappa = 40.0
//!
//! [[contrasts]]
//! kind = "switch"
//! covariate = "x2"
//! from = 0.0
//! to = 1.0
//!
//! [bench]
//! replicates = 2
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmfreg_bench::benchmark::BenchGrid;
use vmfreg_bench::SyntheticConfig;
use vmfreg_core::inference::ContrastSpec;
use vmfreg_core::model::ModelConfig;

use crate::error::{input, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Data directory holding `atlas.json`, `covariates.csv` and `directions.csv`.
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub simulate: SyntheticConfig,
    pub contrasts: Vec<ContrastSpec>,
    pub bench: BenchGrid,
}

impl RunConfig {
    /// Reads and validates a configuration file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| input(format!("config {}: {e}", path.display())))?;
        if let Some(d) = &cfg.data {
            let resolved = path.parent().unwrap_or(Path::new(".")).join(d);
            if !resolved.is_dir() {
                return Err(input(format!("data: directory {} does not exist", resolved.display())));
            }
            cfg.data = Some(resolved);
        }
        Ok(cfg)
    }

    pub fn validate_model(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| input(format!("model.{}", strip_prefix(&e.to_string()))))
    }

    pub fn validate_simulate(&self) -> CliResult<()> {
        self.simulate.validate().map_err(|e| input(format!("simulate.{e}")))
    }

    pub fn validate_bench(&self) -> CliResult<()> {
        self.bench.validate().map_err(|e| input(format!("bench.{e}")))
    }

    /// The data directory from a flag, else from the configuration.
    pub fn data_dir(&self, flag: Option<&Path>) -> CliResult<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data.clone())
            .ok_or_else(|| input("no data directory: pass --data or set `data` in the config"))
    }
}

fn strip_prefix(msg: &str) -> &str {
    msg.strip_prefix("invalid configuration: ").unwrap_or(msg)
}
