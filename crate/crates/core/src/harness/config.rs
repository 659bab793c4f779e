//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::TextureDatasetSpec;
use crate::augment::AugmentConfig;
use crate::chaos::{ChaoticMapSpec, MapKind};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::fusion::FusionTrainConfig;
use crate::seeding::derive_seed;
use crate::ssl::{EncoderSpec, PretrainConfig, ProjectorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Cycles per pixel of class 0.
    pub base_frequency: f64,
    pub frequency_ratio: f64,
    pub base_orientation_deg: f64,
    pub orientation_step_deg: f64,
    pub noise_amplitude: f64,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 4,
            images_per_class: 600,
            channels: 3,
            height: 32,
            width: 32,
            base_frequency: 0.08,
            frequency_ratio: 1.15,
            base_orientation_deg: 20.0,
            orientation_step_deg: 10.0,
            noise_amplitude: 1.5,
            train_fraction: 5.0 / 6.0,
        }
    }
}

impl DatasetConfig {
    pub fn to_spec(&self, seed: u64) -> TextureDatasetSpec {
        TextureDatasetSpec {
            classes: TextureDatasetSpec::graded(
                self.num_classes,
                self.base_frequency,
                self.frequency_ratio,
                self.base_orientation_deg,
                self.orientation_step_deg,
                self.noise_amplitude,
            ),
            images_per_class: self.images_per_class,
            channels: self.channels,
            height: self.height,
            width: self.width,
            train_fraction: self.train_fraction,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Map section; `param` falls back to the kind's standard value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub kind: MapKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<f64>,
    pub epsilon: f64,
    pub k_min: u32,
    pub k_max: u32,
    pub reclamp_each_step: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        let spec = ChaoticMapSpec::default();
        MapConfig {
            kind: spec.kind,
            param: None,
            epsilon: spec.epsilon,
            k_min: spec.k_min,
            k_max: spec.k_max,
            reclamp_each_step: spec.reclamp_each_step,
        }
    }
}

impl MapConfig {
    pub fn to_spec(&self) -> ChaoticMapSpec {
        ChaoticMapSpec {
            kind: self.kind,
            param: self.param.unwrap_or(self.kind.default_param()),
            epsilon: self.epsilon,
            k_min: self.k_min,
            k_max: self.k_max,
            reclamp_each_step: self.reclamp_each_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tiny_hidden: Vec<usize>,
    pub tiny_feature: usize,
    pub large_hidden: Vec<usize>,
    pub large_feature: usize,
    pub projector_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (tiny, large) = (EncoderSpec::tiny(1), EncoderSpec::large(1));
        let proj = ProjectorSpec::default();
        ModelConfig {
            tiny_hidden: tiny.hidden_dims,
            tiny_feature: tiny.feature_dim,
            large_hidden: large.hidden_dims,
            large_feature: large.feature_dim,
            projector_hidden: [proj.layer_dims[0], proj.layer_dims[1]],
        }
    }
}

impl ModelConfig {
    pub fn tiny(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            hidden_dims: self.tiny_hidden.clone(),
            feature_dim: self.tiny_feature,
        }
    }

    pub fn large(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            hidden_dims: self.large_hidden.clone(),
            feature_dim: self.large_feature,
        }
    }

    pub fn projector(&self) -> ProjectorSpec {
        ProjectorSpec::new(self.projector_hidden[0], self.projector_hidden[1])
    }
}

/// Everything a run depends on. Stage seeds are derived from `seed`, so the
/// `seed` keys inside the stage sections are overwritten on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Also fine-tune a randomly initialised tiny encoder for comparison.
    pub run_baseline: bool,
    pub dataset: DatasetConfig,
    pub map: MapConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune_tiny: FinetuneConfig,
    pub finetune_large: FinetuneConfig,
    pub fusion: FusionTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            run_baseline: true,
            dataset: DatasetConfig::default(),
            map: MapConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune_tiny: FinetuneConfig::default(),
            finetune_large: FinetuneConfig { epochs: 20, ..FinetuneConfig::default() },
            fusion: FusionTrainConfig::default(),
        };
        cfg.resolve_seeds();
        cfg
    }
}

mod stage_ids {
    pub const DATASET: u64 = 101;
    pub const PRETRAIN: u64 = 102;
    pub const FINETUNE_TINY: u64 = 103;
    pub const FINETUNE_LARGE: u64 = 104;
    pub const FUSION: u64 = 105;
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the global seed and re-derives every stage seed from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.resolve_seeds();
    }

    pub fn resolve_seeds(&mut self) {
        self.pretrain.seed = derive_seed(self.seed, &[stage_ids::PRETRAIN]);
        self.finetune_tiny.seed = derive_seed(self.seed, &[stage_ids::FINETUNE_TINY]);
        self.finetune_large.seed = derive_seed(self.seed, &[stage_ids::FINETUNE_LARGE]);
        self.fusion.seed = derive_seed(self.seed, &[stage_ids::FUSION]);
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, &[stage_ids::DATASET])
    }

    pub fn dataset_spec(&self) -> TextureDatasetSpec {
        self.dataset.to_spec(self.dataset_seed())
    }

    pub fn map_spec(&self) -> ChaoticMapSpec {
        self.map.to_spec()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.map_spec().validate()?;
        self.augment.validate()?;
        let input = self.dataset.input_dim();
        self.model.tiny(input).validate()?;
        self.model.large(input).validate()?;
        if self.model.projector_hidden.contains(&0) {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        self.pretrain.validate()?;
        self.finetune_tiny.validate()?;
        self.finetune_large.validate()?;
        self.fusion.validate()?;
        Ok(())
    }

    /// SHA-256 over the settings that influence results, so output
    /// locations do not change it.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_a_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn shipped_default_file_matches_the_code() {
        let cfg = ExperimentConfig::from_toml(include_str!("../../../../configs/default.toml")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[map]\nkind = \"logistic\"\n[pretrain]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.map_spec().param, 3.99);
        assert_eq!(cfg.pretrain.epochs, 2);
        assert_eq!(cfg.pretrain.batch_size, 64);
        assert_eq!(cfg.pretrain.seed, derive_seed(3, &[stage_ids::PRETRAIN]));
    }

    #[test]
    fn bad_files_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[map]\nkind = \"henon\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[map]\nk_min = 4\nk_max = 2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.set_seed(9);
        assert_ne!(a.hash(), b.hash());
    }
}
