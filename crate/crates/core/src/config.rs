//! Experiment configuration as TOML, with every default materialised.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::damma::AdaptConfig;
use crate::datagen::DatagenConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datagen: DatagenConfig,
    pub decoder: DecoderConfig,
    pub encoder: EncoderConfig,
    pub losses: LossConfig,
    pub adapt: AdaptConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// SHA-256 of the materialised TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// Cross-section consistency on top of each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        self.decoder.validate()?;
        self.encoder.validate()?;
        self.adapt.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.decoder.output_size() != self.datagen.hr_size {
            return Err(Error::Config(format!(
                "decoder output {} differs from datagen.hr_size {}",
                self.decoder.output_size(),
                self.datagen.hr_size
            )));
        }
        if self.encoder.lr_size != self.datagen.lr_size() {
            return Err(Error::Config(format!(
                "encoder.lr_size {} differs from datagen LR size {}",
                self.encoder.lr_size,
                self.datagen.lr_size()
            )));
        }
        Ok(())
    }

    /// Global seed override: training, adaptation and split seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.decoder.seed = seed;
        self.train.encoder.seed = seed;
        self.adapt.seed = seed;
        self.eval.split_seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn partial_file_materialises_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[adapt]\nxi = 0.5\nouter_budget = 3\n", Path::new("p.toml")).unwrap();
        assert_eq!(cfg.adapt.xi, 0.5);
        assert_eq!(cfg.adapt.eta, AdaptConfig::default().eta);
        assert!(cfg.to_toml_string().contains("eta = "));
    }

    #[test]
    fn rejects_unknown_keys_and_mismatched_sizes() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[adapt]\nbogus = 1\n", Path::new("b.toml")),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[datagen]\nfactor = 4\n", Path::new("c.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = ExperimentConfig::default();
        let b = a.clone().with_seed(7);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.adapt.seed, 7);
    }
}
