//! Run configuration, loaded from TOML. Every section has defaults so a
//! partial file is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data_io::{TextureSource, ToySpec};
use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::network::NetworkConfig;
use crate::objectives::LossWeights;
use crate::optim::OptimConfig;
use crate::pieg::PiegConfig;
use crate::synthesis::{AugmentSpec, LocalAnomalySpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub ratio: f64,
    pub cap: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig { ratio: 0.1, cap: 2048 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed {
        value: f64,
    },
    /// Maximize image-level F1 on labelled validation maps.
    Fmax,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Gaussian smoothing of the full-resolution map, in pixels; 0 disables.
    pub smoothing_sigma: f64,
    pub threshold: ThresholdPolicy,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            smoothing_sigma: 4.0,
            threshold: ThresholdPolicy::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// One optimizer step per epoch.
    pub epochs: usize,
    /// Images per step; 0 uses every training image.
    pub batch_size: usize,
    /// Side of the square working resolution.
    pub working_size: usize,
    /// Coverage above which a grid cell counts as corrupted.
    pub mask_overlap: f64,
    pub backbone: BackboneConfig,
    pub bank: BankConfig,
    pub loss: LossWeights,
    pub pieg: PiegConfig,
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub augment: AugmentSpec,
    pub anomaly: LocalAnomalySpec,
    pub texture: TextureSource,
    pub inference: InferenceConfig,
    pub ablation: Ablation,
    pub toy: ToySpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 300,
            batch_size: 0,
            working_size: 256,
            mask_overlap: 0.3,
            backbone: BackboneConfig::default(),
            bank: BankConfig::default(),
            loss: LossWeights::default(),
            pieg: PiegConfig::default(),
            network: NetworkConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentSpec::default(),
            anomaly: LocalAnomalySpec::default(),
            texture: TextureSource::default(),
            inference: InferenceConfig::default(),
            ablation: Ablation::default(),
            toy: ToySpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::TomlDe(inner) => Error::Config(format!("{}: {inner}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.working_size < 32 {
            return Err(Error::Config("working_size must be at least 32".into()));
        }
        if !(0.0..1.0).contains(&self.mask_overlap) {
            return Err(Error::Config("mask_overlap must lie in [0, 1)".into()));
        }
        if !(self.bank.ratio > 0.0 && self.bank.ratio <= 1.0) || self.bank.cap == 0 {
            return Err(Error::Config("bank ratio must lie in (0, 1] and cap be positive".into()));
        }
        if self.inference.smoothing_sigma < 0.0 {
            return Err(Error::Config("smoothing_sigma must be non-negative".into()));
        }
        if let ThresholdPolicy::Fixed { value } = self.inference.threshold {
            if !value.is_finite() {
                return Err(Error::Config("fixed threshold must be finite".into()));
            }
        }
        self.loss.validate()?;
        self.pieg.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        self.anomaly.validate()?;
        self.toy.validate()
    }

    /// PiEG settings after applying the ablation's drop_init_noise switch.
    pub fn effective_pieg(&self) -> PiegConfig {
        PiegConfig {
            retain_noise: self.pieg.retain_noise && !self.ablation.drop_init_noise,
            ..self.pieg
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_and_policies() {
        let cfg = RunConfig::from_toml_str(
            "epochs = 5\n[pieg]\neta = 0.05\n[inference]\nthreshold = { policy = \"fixed\", value = 0.4 }\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.pieg.eta, 0.05);
        assert_eq!(cfg.pieg.steps, 20);
        assert_eq!(cfg.inference.threshold, ThresholdPolicy::Fixed { value: 0.4 });
        let f = RunConfig::from_toml_str("[inference]\nthreshold = { policy = \"fmax\" }\n").unwrap();
        assert_eq!(f.inference.threshold, ThresholdPolicy::Fmax);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml_str("[pieg]\netta = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[loss]\nfocal_alpha = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("working_size = 8\n").is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["mri-like.toml", "xray-like.toml", "toy.toml"] {
            RunConfig::load(&dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        let mri = RunConfig::load(&dir.join("mri-like.toml")).unwrap();
        let xray = RunConfig::load(&dir.join("xray-like.toml")).unwrap();
        assert_eq!(mri.pieg.eta, 0.01);
        assert_eq!(xray.pieg.eta, 0.05);
    }
}
