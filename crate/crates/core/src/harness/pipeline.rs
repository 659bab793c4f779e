//! The three-stage run: contrastive pre-training, fine-tuning, fusion, then
//! evaluation. Every stage reads its inputs from and writes its outputs to
//! the run directory, so stages can also be invoked one at a time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{encoder_from_named, load_checkpoint, save_checkpoint, Checkpoint};
use super::config::ExperimentConfig;
use super::data::{gen_dataset, load_dataset, save_dataset, LabeledSet};
use super::metrics::{evaluate, MetricsReport};
use crate::error::{Error, Result, Stage};
use crate::finetune::{finetune, Classifier};
use crate::fusion::{train_fusion, FusionModel};
use crate::seeding::{derive_rng, streams};
use crate::ssl::{pretrain, EncoderWeights};

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.csds")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.csds")
    }

    pub fn checkpoint(&self, role: Role) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", role.as_str()))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

/// Which model a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    SslEncoder,
    TinySsl,
    TinyRandom,
    Large,
    Fusion,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::SslEncoder => "ssl_encoder",
            Role::TinySsl => "tiny_ssl",
            Role::TinyRandom => "tiny_random",
            Role::Large => "large",
            Role::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub epoch_losses: Vec<f64>,
    pub test: MetricsReport,
}

/// Contents of `metrics.json`. The top-level metrics are the fused model's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub map: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub pretrain_losses: Vec<f64>,
    pub tiny_ssl: ModelReport,
    pub tiny_random: Option<ModelReport>,
    pub large: ModelReport,
    pub fusion: ModelReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serialises");
        text.push('\n');
        text
    }
}

fn losses_json(losses: &[f64]) -> String {
    serde_json::to_string(losses).expect("losses serialise")
}

fn losses_of(ckpt: &Checkpoint) -> Result<Vec<f64>> {
    serde_json::from_str(ckpt.meta("epoch_losses")?)
        .map_err(|e| Error::Format(format!("epoch_losses metadata: {e}")))
}

fn stamp(ckpt: Checkpoint, cfg: &ExperimentConfig, stage: Stage, epochs: usize, losses: &[f64]) -> Checkpoint {
    ckpt.with_meta("stage", stage)
        .with_meta("epochs", epochs)
        .with_meta("seed", cfg.seed)
        .with_meta("map", cfg.map.kind)
        .with_meta("config_hash", cfg.hash())
        .with_meta("epoch_losses", losses_json(losses))
}

fn prefixed(prefix: &str, tensors: Vec<(String, crate::tensor::Tensor)>) -> Vec<(String, crate::tensor::Tensor)> {
    tensors.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn load_split(path: &Path, cfg: &ExperimentConfig) -> Result<LabeledSet> {
    let set = load_dataset(path)?;
    let m = cfg.dataset.num_classes;
    if let Some(&bad) = set.labels.iter().find(|&&y| y >= m) {
        return Err(Error::Format(format!("{}: label {bad} outside {m} classes", path.display())));
    }
    let want = cfg.dataset.input_dim();
    if set.images.first().map(|i| i.pixels().len()) != Some(want) {
        return Err(Error::Format(format!(
            "{}: images do not match the configured {}×{}×{} shape",
            path.display(),
            cfg.dataset.channels,
            cfg.dataset.height,
            cfg.dataset.width
        )));
    }
    Ok(set)
}

/// Generates and writes the train and test splits.
pub fn stage_gen_data(cfg: &ExperimentConfig) -> Result<(LabeledSet, LabeledSet)> {
    let run = || {
        let paths = RunPaths::new(&cfg.out_dir);
        let (train, test) = gen_dataset(&cfg.dataset_spec())?;
        save_dataset(&paths.train_data(), &train)?;
        save_dataset(&paths.test_data(), &test)?;
        Ok((train, test))
    };
    run().map_err(|e: Error| e.at(Stage::Data))
}

/// Contrastive pre-training of the tiny encoder on the (unlabelled) train split.
pub fn stage_pretrain(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let run = || {
        let paths = RunPaths::new(&cfg.out_dir);
        let train = load_split(&paths.train_data(), cfg)?;
        let out = pretrain(
            &train.images,
            &cfg.augment,
            &cfg.map_spec(),
            &cfg.pretrain,
            &cfg.model.tiny(cfg.dataset.input_dim()),
            &cfg.model.projector(),
        )?;
        let ckpt = Checkpoint::new(prefixed("encoder", out.encoder.tensors));
        let ckpt = stamp(ckpt, cfg, Stage::Pretrain, cfg.pretrain.epochs, &out.epoch_losses);
        save_checkpoint(&paths.checkpoint(Role::SslEncoder), &ckpt)?;
        Ok(ckpt)
    };
    run().map_err(|e: Error| e.at(Stage::Pretrain))
}

/// The tiny encoder at the initialisation pre-training starts from.
pub fn random_tiny_encoder(cfg: &ExperimentConfig) -> Result<EncoderWeights> {
    let spec = cfg.model.tiny(cfg.dataset.input_dim());
    EncoderWeights::random(&spec, &mut derive_rng(cfg.pretrain.seed, &[streams::INIT]))
}

fn finetune_role(
    cfg: &ExperimentConfig,
    role: Role,
    weights: &EncoderWeights,
    ft: &crate::finetune::FinetuneConfig,
    train: &LabeledSet,
) -> Result<Checkpoint> {
    let mut head_rng = derive_rng(ft.seed, &[streams::HEAD]);
    let model = Classifier::new(weights, cfg.dataset.num_classes, &mut head_rng)?;
    let out = finetune(model, &train.images, &train.labels, ft)?;
    let ckpt = Checkpoint::new(out.model.store.export()).with_meta("role", role.as_str());
    let ckpt = stamp(ckpt, cfg, Stage::Finetune, ft.epochs, &out.epoch_losses);
    save_checkpoint(&RunPaths::new(&cfg.out_dir).checkpoint(role), &ckpt)?;
    Ok(ckpt)
}

/// Fine-tunes the pre-trained tiny encoder and a randomly initialised large
/// one, plus the random-init tiny baseline when enabled.
pub fn stage_finetune(cfg: &ExperimentConfig) -> Result<()> {
    let run = || {
        let paths = RunPaths::new(&cfg.out_dir);
        let train = load_split(&paths.train_data(), cfg)?;
        let ssl = load_checkpoint(&paths.checkpoint(Role::SslEncoder))?;
        let ssl_weights = encoder_from_named(ssl.scoped("encoder"))?;
        finetune_role(cfg, Role::TinySsl, &ssl_weights, &cfg.finetune_tiny, &train)?;
        if cfg.run_baseline {
            let random = random_tiny_encoder(cfg)?;
            finetune_role(cfg, Role::TinyRandom, &random, &cfg.finetune_tiny, &train)?;
        }
        let large_spec = cfg.model.large(cfg.dataset.input_dim());
        let large = EncoderWeights::random(&large_spec, &mut derive_rng(cfg.finetune_large.seed, &[streams::INIT]))?;
        finetune_role(cfg, Role::Large, &large, &cfg.finetune_large, &train)?;
        Ok(())
    };
    run().map_err(|e: Error| e.at(Stage::Finetune))
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<Classifier> {
    let weights = encoder_from_named(ckpt.scoped("encoder"))?;
    Classifier::from_parts(&weights, ckpt.tensor("head.weight")?, ckpt.tensor("head.bias")?)
}

pub fn fusion_from_checkpoint(ckpt: &Checkpoint) -> Result<FusionModel> {
    let b1 = encoder_from_named(ckpt.scoped("b1"))?;
    let b2 = encoder_from_named(ckpt.scoped("b2"))?;
    let m = ckpt.tensor("fusion_head.bias")?.numel();
    FusionModel::from_named(&b1.spec, &b2.spec, m, &ckpt.tensors)
}

/// Trains the gated fusion of the two fine-tuned backbones.
pub fn stage_fuse(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let run = || {
        let paths = RunPaths::new(&cfg.out_dir);
        let train = load_split(&paths.train_data(), cfg)?;
        let tiny = classifier_from_checkpoint(&load_checkpoint(&paths.checkpoint(Role::TinySsl))?)?;
        let large = classifier_from_checkpoint(&load_checkpoint(&paths.checkpoint(Role::Large))?)?;
        let mut rng = derive_rng(cfg.fusion.seed, &[streams::HEAD]);
        let model = FusionModel::new(
            &tiny.encoder_weights(),
            &large.encoder_weights(),
            cfg.dataset.num_classes,
            &mut rng,
        )?;
        let out = train_fusion(model, &train.images, &train.labels, &cfg.fusion)?;
        let ckpt = Checkpoint::new(out.model.store.export()).with_meta("role", Role::Fusion.as_str());
        let ckpt = stamp(ckpt, cfg, Stage::Fusion, cfg.fusion.epochs, &out.epoch_losses);
        save_checkpoint(&paths.checkpoint(Role::Fusion), &ckpt)?;
        Ok(ckpt)
    };
    run().map_err(|e: Error| e.at(Stage::Fusion))
}

/// Scores every trained model on the test split and writes `metrics.json`.
pub fn stage_evaluate(cfg: &ExperimentConfig) -> Result<RunReport> {
    let run = || {
        let paths = RunPaths::new(&cfg.out_dir);
        let test = load_split(&paths.test_data(), cfg)?;
        let classifier_report = |role: Role| -> Result<ModelReport> {
            let ckpt = load_checkpoint(&paths.checkpoint(role))?;
            let model = classifier_from_checkpoint(&ckpt)?;
            Ok(ModelReport {
                epoch_losses: losses_of(&ckpt)?,
                test: evaluate(&model, &test.images, &test.labels)?,
            })
        };
        let pretrain_losses = losses_of(&load_checkpoint(&paths.checkpoint(Role::SslEncoder))?)?;
        let tiny_ssl = classifier_report(Role::TinySsl)?;
        let tiny_random = if cfg.run_baseline {
            Some(classifier_report(Role::TinyRandom)?)
        } else {
            None
        };
        let large = classifier_report(Role::Large)?;
        let fusion_ckpt = load_checkpoint(&paths.checkpoint(Role::Fusion))?;
        let fusion_model = fusion_from_checkpoint(&fusion_ckpt)?;
        let fusion = ModelReport {
            epoch_losses: losses_of(&fusion_ckpt)?,
            test: evaluate(&fusion_model, &test.images, &test.labels)?,
        };
        let report = RunReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            map: cfg.map.kind.to_string(),
            metrics: fusion.test.clone(),
            pretrain_losses,
            tiny_ssl,
            tiny_random,
            large,
            fusion,
        };
        fs::create_dir_all(&paths.root)?;
        fs::write(paths.metrics(), report.to_json())?;
        Ok(report)
    };
    run().map_err(|e: Error| e.at(Stage::Evaluate))
}

/// All stages in order; the first failure aborts the run.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    stage_gen_data(cfg)?;
    stage_pretrain(cfg)?;
    stage_finetune(cfg)?;
    stage_fuse(cfg)?;
    stage_evaluate(cfg)
}
