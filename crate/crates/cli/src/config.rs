use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mfse_core::field::NetworkConfig;
use mfse_core::frontend::FrontendConfig;
use mfse_core::objective::ObjectiveConfig;
use mfse_core::path::PathConfig;
use mfse_core::sampler::SamplerConfig;
use mfse_core::toy_data::CorpusSpec;
use mfse_core::trainer::{TrainConfig, TrainSetup};
use serde::{Deserialize, Serialize};

/// Error class that maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Every tunable value, one TOML section per component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub path: PathConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub frontend: FrontendConfig,
    pub sampler: SamplerConfig,
    pub corpus: CorpusSpec,
    pub network: NetworkConfig,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
        };
        Ok(cfg)
    }

    /// Checks every section; failures are usage errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: String| usage(format!("config: {e}"));
        self.path.validate().map_err(|e| wrap(e.to_string()))?;
        self.objective.validate().map_err(|e| wrap(e.to_string()))?;
        self.train.validate().map_err(|e| wrap(e.to_string()))?;
        self.corpus.validate().map_err(|e| wrap(e.to_string()))?;
        self.network.validate().map_err(|e| wrap(e.to_string()))?;
        self.sampler.schedule().map_err(|e| wrap(e.to_string()))?;
        mfse_core::frontend::Stft::new(&self.frontend).map_err(|e| wrap(e.to_string()))?;
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            objective: self.objective.clone(),
            path: self.path.clone(),
            frontend: self.frontend.clone(),
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, toml::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Resolves `p` against the working directory unless it is absolute.
pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// Worker count from `MFSE_THREADS`, falling back to available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var("MFSE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!(
                "MFSE_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 7\n[sampler]\nnfe = 3\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.sampler.nfe, 3);
        assert_eq!(cfg.train.lr, 5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nstpes = 7\n", "[nope]\nx = 1\n", "top = 1\n"] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{text}");
        }
    }
}
