//! The JSON run configuration. Every section is optional and falls back to
//! the desk-scale defaults; unknown keys are rejected.

use std::path::Path;

use guided_inpaint_core::datagen::DatagenConfig;
use guided_inpaint_core::eval::LcmConfig;
use guided_inpaint_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, usage, CliResult};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub datagen: DatagenConfig,
    pub lcm: LcmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::desk();
        Self { datagen: DatagenConfig::with_resolution(train.model.resolution), train, lcm: LcmConfig::default() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_at(p))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    /// Applies `--seed` to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.datagen.seed = s;
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| usage(format!("train: {e}")))?;
        self.datagen.validate().map_err(|e| usage(format!("datagen: {e}")))?;
        if self.datagen.resolution != self.train.model.resolution {
            return Err(usage(format!(
                "datagen.resolution {} differs from train.model.resolution {}",
                self.datagen.resolution, self.train.model.resolution
            )));
        }
        if self.lcm.scales.is_empty() || self.lcm.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(usage(format!("lcm: scales {:?} must be positive", self.lcm.scales)));
        }
        Ok(())
    }

    /// Writes the effective configuration as `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        write_atomic(&dir.join("config.json"), text.as_bytes())
    }
}

/// First 16 hex digits of the SHA-256 of the compact JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Identity of a training configuration for resume checks: the run length
/// and checkpoint cadence may change between sessions, nothing else.
pub fn train_hash(cfg: &TrainConfig) -> String {
    hash_json(&TrainConfig { max_iterations: 0, checkpoint_interval: 1, ..cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"batch_sise": 3}}"#).unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        std::fs::write(&p, r#"{"train": {"batch_size": 3}, "lcm": {"context_width": 4}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.lcm.context_width, 4);
        assert_eq!(cfg.train.model, TrainConfig::desk().model);
    }

    #[test]
    fn train_hash_ignores_run_length() {
        let a = TrainConfig::desk();
        let b = TrainConfig { max_iterations: 7, checkpoint_interval: 3, ..a.clone() };
        assert_eq!(train_hash(&a), train_hash(&b));
        assert_ne!(train_hash(&a), train_hash(&TrainConfig { seed: 9, ..a }));
    }
}
