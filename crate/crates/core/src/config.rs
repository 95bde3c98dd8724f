//! The single JSON document describing a training run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Preset;
use crate::frontend::FrontendConfig;
use crate::objective::LossConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths are resolved against the config file's directory.
    pub manifest: PathBuf,
    pub image_features: PathBuf,
    pub preset: Preset,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
}

fn default_ensemble_size() -> usize {
    2
}

impl RunConfig {
    pub fn new(
        manifest: impl Into<PathBuf>,
        image_features: impl Into<PathBuf>,
        preset: Preset,
    ) -> Self {
        RunConfig {
            manifest: manifest.into(),
            image_features: image_features.into(),
            preset,
            frontend: FrontendConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            ensemble_size: default_ensemble_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.ensemble_size == 0 || self.ensemble_size > self.train.n_snapshots() {
            return Err(Error::Config(format!(
                "ensemble_size must be between 1 and the snapshot count ({}), got {}",
                self.train.n_snapshots(),
                self.ensemble_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. Paths are kept as written so the hash does not
    /// depend on where the file lives; see [`RunConfig::resolve`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Manifest and image-feature paths relative to the config file at `config_path`.
    pub fn resolve(&self, config_path: &Path) -> (PathBuf, PathBuf) {
        let base = config_path.parent().unwrap_or(Path::new("."));
        (base.join(&self.manifest), base.join(&self.image_features))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the key-sorted compact JSON form, as lowercase hex.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex_digest(value.to_string().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(
            r#"{"manifest":"m","image_features":"i","preset":"toy","learning_rate":1}"#,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("learning_rate")),
            "{err}"
        );
        let err = RunConfig::from_json(
            r#"{"manifest":"m","image_features":"i","preset":"toy","train":{"epochz":3}}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_json(
            r#"{"manifest":"m","image_features":"i","preset":"toy","loss":{"margin":0.3,"hard_fraction":0.5}}"#,
        )
        .unwrap();
        let b = RunConfig::from_json(
            r#"{"loss":{"hard_fraction":0.5,"margin":0.3},"preset":"toy","image_features":"i","manifest":"m"}"#,
        )
        .unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
        let c = RunConfig::from_json(
            r#"{"manifest":"m","image_features":"i","preset":"toy","loss":{"margin":0.31,"hard_fraction":0.5}}"#,
        )
        .unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn pretty_form_round_trips() {
        let cfg = RunConfig::new("a/manifest.jsonl", "a/img.f32m", Preset::Toy);
        assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
    }
}
