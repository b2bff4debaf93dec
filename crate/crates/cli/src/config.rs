//! Run configuration files, TOML or JSON by extension.
//!
//! ```toml
//! [model]
//! d = 32
//! layers = 2
//!
//! [train]
//! steps = 5000
//! lr = 1e-3
//! ```
//!
//! Missing sections and fields take their defaults; unknown fields are
//! rejected.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use setinfer_core::trainer::{Precision, TrainConfig};
use setinfer_core::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        Ok(cfg)
    }

    /// Apply command-line overrides. A seed sets both initialisation and
    /// training streams.
    pub fn with_overrides(mut self, seed: Option<u64>, precision: Option<Precision>) -> Self {
        if let Some(s) = seed {
            self.model.init_seed = s;
            self.train.seed = s;
        }
        if let Some(p) = precision {
            self.train.precision = p;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        std::fs::write(&t, "[model]\nd = 32\nlayers = 2\n[train]\nsteps = 10\nprecision = \"f32\"\n").unwrap();
        std::fs::write(&j, r#"{"model": {"d": 32, "layers": 2}, "train": {"steps": 10, "precision": "f32"}}"#).unwrap();
        let a = RunConfig::load(&t).unwrap();
        assert_eq!(a, RunConfig::load(&j).unwrap());
        assert_eq!(a.model.d, 32);
        assert_eq!(a.model.heads, ModelConfig::default().heads);
        assert_eq!(a.train.precision, Precision::F32);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[model]\nwidth = 32\n").unwrap();
        assert!(RunConfig::load(&t).is_err());
    }

    #[test]
    fn seed_override_reaches_both_streams() {
        let c = RunConfig::default().with_overrides(Some(9), Some(Precision::F32));
        assert_eq!((c.model.init_seed, c.train.seed), (9, 9));
        assert_eq!(c.train.precision, Precision::F32);
    }
}
