use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionPreset, SparsityConfig, MIN_INPUT_SIZE};
use crate::data::ScaleSet;
use crate::error::{Error, Result};
use crate::nn::{AdamWConfig, PadMode};
use crate::regularizers::{AblationFlags, GridTransform, LossWeights, TransformSet};
use crate::scale::ScalePreset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Proposed,
    NoSmooth,
    NoEquiv,
    NoSparse,
    NoWsi,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Proposed,
        Variant::NoSmooth,
        Variant::NoEquiv,
        Variant::NoSparse,
        Variant::NoWsi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::NoSmooth => "no-smooth",
            Variant::NoEquiv => "no-equiv",
            Variant::NoSparse => "no-sparse",
            Variant::NoWsi => "no-wsi",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{name}'; expected one of proposed, no-smooth, no-equiv, no-sparse, no-wsi"
                ))
            })
    }

    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            smooth_on: self != Variant::NoSmooth,
            equiv_on: self != Variant::NoEquiv,
            sparse_on: self != Variant::NoSparse,
        }
    }

    /// Whether training tiles come from single pre-extracted patches rather
    /// than a slide manifest.
    pub fn uses_patches(self) -> bool {
        self == Variant::NoWsi
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub minibatches_per_epoch: usize,
    pub crop_size: usize,
    pub eta: f64,
    pub r: f64,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub scale_set: ScaleSet,
    pub attention_preset: AttentionPreset,
    /// Border handling of the attention network's convolutions.
    pub attention_padding: PadMode,
    pub scale_preset: ScalePreset,
    pub smooth_weight: f64,
    pub equiv_weight: f64,
    pub transforms: Vec<GridTransform>,
    /// Directory holding `manifest.jsonl` and `tiles/`.
    pub data_dir: Option<PathBuf>,
    /// Directory of pre-extracted patches, used by the `no-wsi` variant.
    pub patch_dir: Option<PathBuf>,
    /// Magnification the patches were scanned at.
    pub patch_magnification: u32,
    /// Directory with `tiles/` (or `images/`) and matching binary `masks/`.
    pub validation_dir: Option<PathBuf>,
    pub validation_threshold: f32,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            minibatches_per_epoch: 100,
            crop_size: 160,
            eta: 93.0,
            r: 20.0,
            epochs: 60,
            seed: 0,
            variant: Variant::Proposed,
            scale_set: ScaleSet::default(),
            attention_preset: AttentionPreset::Standard,
            attention_padding: PadMode::Zero,
            scale_preset: ScalePreset::Resnet34,
            smooth_weight: 1.0,
            equiv_weight: 1.0,
            transforms: GridTransform::ALL.to_vec(),
            data_dir: None,
            patch_dir: None,
            patch_magnification: 40,
            validation_dir: None,
            validation_threshold: 0.5,
        }
    }
}

impl TrainRunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("r", self.r),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("smooth_weight", self.smooth_weight),
            ("equiv_weight", self.equiv_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size < self.scale_set.count() {
            return Err(Error::Config(format!(
                "batch_size {} is smaller than the {} magnification levels",
                self.batch_size,
                self.scale_set.count()
            )));
        }
        if self.minibatches_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and minibatches_per_epoch must be positive".into()));
        }
        if self.crop_size < MIN_INPUT_SIZE {
            return Err(Error::Config(format!(
                "crop_size {} is below the network minimum {MIN_INPUT_SIZE}",
                self.crop_size
            )));
        }
        if !(self.validation_threshold > 0.0 && self.validation_threshold < 1.0) {
            return Err(Error::Config("validation_threshold must lie in (0, 1)".into()));
        }
        self.sparsity().validate()?;
        TransformSet::new(self.transforms.clone())?;
        Ok(())
    }

    pub fn sparsity(&self) -> SparsityConfig {
        SparsityConfig {
            eta: self.eta,
            r: self.r,
            sparse_enabled: self.variant.flags().sparse_on,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            smooth: self.smooth_weight,
            equiv: self.equiv_weight,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainRunConfig::default();
        c.validate().unwrap();
        let back = TrainRunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = TrainRunConfig::from_toml("epochs = 3\nvariant = \"no-sparse\"\nscale_set = [10, 20]\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.variant, Variant::NoSparse);
        assert!(!c.sparsity().sparse_enabled);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(TrainRunConfig::from_toml("variant = \"shiny\""), Err(Error::Config(_))));
        assert!(TrainRunConfig::from_toml("batch_size = 2").is_err());
        assert!(TrainRunConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(TrainRunConfig::from_toml("crop_size = 32").is_err());
        assert!(TrainRunConfig::from_toml("unknown_key = 1").is_err());
        assert!(TrainRunConfig::from_toml("transforms = []").is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
        assert!(!Variant::NoEquiv.flags().equiv_on);
        assert!(Variant::NoWsi.flags().equiv_on && Variant::NoWsi.uses_patches());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = TrainRunConfig::default();
        let b = TrainRunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }
}
