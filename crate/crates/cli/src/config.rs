//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use idflow::io::{format_major, FORMAT_MAJOR, FORMAT_VERSION};
use idflow::flow::SamplerConfig;
use idflow::model::ToyDiTConfig;
use idflow::training::{FusionEval, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::exit::{Failure, Outcome};

pub const SEED_ENV: &str = "IDFLOW_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Written on dumps; a file with another major version is rejected.
    pub format_version: Option<String>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ToyDiTConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub fusion: FusionEval,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))?;
        if let Some(v) = &cfg.format_version {
            if format_major(v) != Some(FORMAT_MAJOR) {
                return Err(Failure::usage(format!("config {} has unsupported format version {v:?}", path.display())));
            }
        }
        Ok(cfg)
    }

    /// Flag, then file, then `IDFLOW_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Outcome<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn dump_to(&self, path: &Path) -> Outcome<()> {
        let stamped = Self {
            format_version: Some(FORMAT_VERSION.into()),
            ..self.clone()
        };
        let text = toml::to_string_pretty(&stamped).map_err(|e| Failure::usage(format!("cannot encode config: {e}")))?;
        idflow::io::write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    /// Writes `config.toml` into `dir`.
    pub fn dump(&self, dir: &Path) -> Outcome<()> {
        self.dump_to(&dir.join("config.toml"))
    }
}

/// Dumps the config next to an output file: `d.bin` gets `d.config.toml`.
pub fn dump_beside(cfg: &RunConfig, file: &Path) -> Outcome<()> {
    cfg.dump_to(&file.with_extension("config.toml"))
}
