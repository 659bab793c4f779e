//! Supervised fine-tuning: linear head, cross-entropy and cosine annealing.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chaos::ImageTensor;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{images_to_matrix, Linear};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::seeding::{derive_rng, permutation, streams};
use crate::ssl::{Encoder, EncoderWeights};
use crate::tensor::{validate_groups, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Batch size used when running inference over a whole set.
pub const EVAL_BATCH: usize = 256;

/// Anything that maps images to class logits.
pub trait Classify {
    fn num_classes(&self) -> usize;

    /// `[B × M]` logits for a batch.
    fn logits(&self, images: &[&ImageTensor]) -> Result<Tensor>;
}

/// Argmax per row, ties resolved toward the lowest class index.
pub fn predict(logits: &Tensor) -> Result<Vec<usize>> {
    let (rows, _) = logits.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Class predictions for a whole set, evaluated in chunks of [`EVAL_BATCH`].
pub fn predict_all<C: Classify + ?Sized>(model: &C, images: &[ImageTensor]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        out.extend(predict(&model.logits(&refs)?)?);
    }
    Ok(out)
}

pub fn accuracy<C: Classify + ?Sized>(model: &C, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return contract_err("accuracy needs a non-empty set with one label per image");
    }
    let pred = predict_all(model, images)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return contract_err(format!("label {bad} outside {num_classes} classes"));
    }
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * num_classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

/// Mean over the batch of `−Σ_c y_c log softmax(logits)_c`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let (rows, cols) = targets.dims2()?;
    if g.shape(logits) != [rows, cols] {
        return dim_err(format!(
            "logits {:?} vs targets {:?}",
            g.shape(logits),
            targets.shape()
        ));
    }
    for r in 0..rows {
        let row = targets.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract_err(format!("target row {r} is not one-hot"));
        }
    }
    let log_p = g.log_softmax(logits)?;
    let y = g.constant(targets);
    let picked = g.mul(log_p, y)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// `η_min + ½(η_max − η_min)(1 + cos(π t / T_max))`.
pub fn cosine_annealing_lr(t: usize, t_max: usize, eta_max: f64, eta_min: f64) -> Result<f64> {
    if t > t_max {
        return contract_err(format!("epoch {t} beyond schedule length {t_max}"));
    }
    // Endpoints are returned verbatim so they hold exactly.
    if t == 0 {
        return Ok(eta_max);
    }
    if t == t_max {
        return Ok(eta_min);
    }
    let phase = PI * t as f64 / t_max as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + phase.cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr_max: 1e-3,
            lr_min: 0.0,
            batch_size: 64,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune batch_size must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }
}

/// `logits = features·Wᵀ + b` with `W` of shape `[M × d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    /// Weights and bias uniform in `±1/√d`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(ClassifierHead {
            linear: Linear::new(store, "head", feature_dim, num_classes, true, rng)?,
            num_classes,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.linear.weight
    }

    pub fn bias(&self) -> ParamId {
        self.linear.bias.expect("head has a bias")
    }
}

/// Encoder with a linear head; every parameter is trained.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(weights: &EncoderWeights, num_classes: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::load(&mut store, "encoder", weights)?;
        let head = ClassifierHead::new(&mut store, weights.spec.feature_dim, num_classes, rng)?;
        Ok(Classifier { store, encoder, head })
    }

    /// Rebuilds a trained classifier from its encoder and head tensors.
    pub fn from_parts(weights: &EncoderWeights, head_weight: &Tensor, head_bias: &Tensor) -> Result<Self> {
        let (m, d) = head_weight.dims2()?;
        if d != weights.spec.feature_dim || head_bias.numel() != m {
            return dim_err(format!(
                "head {:?}/{:?} does not fit feature width {}",
                head_weight.shape(),
                head_bias.shape(),
                weights.spec.feature_dim
            ));
        }
        let mut model = Classifier::new(weights, m, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        model.store.get_mut(model.head.weight()).data_mut().copy_from_slice(head_weight.data());
        model.store.get_mut(model.head.bias()).data_mut().copy_from_slice(head_bias.data());
        Ok(model)
    }

    pub fn forward(&self, g: &mut Graph, batch: Var) -> Result<Var> {
        let f = self.encoder.encode(g, &self.store, batch)?;
        self.head.linear.forward(g, &self.store, f)
    }

    pub fn encoder_weights(&self) -> EncoderWeights {
        self.encoder.weights(&self.store)
    }

    pub fn head_tensors(&self) -> (Tensor, Tensor) {
        let copy = |id| {
            let t: &Tensor = self.store.get(id);
            Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor")
        };
        (copy(self.head.weight()), copy(self.head.bias()))
    }
}

impl Classify for Classifier {
    fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    fn logits(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let x = images_to_matrix(images)?;
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = self.forward(&mut g, xv)?;
        Ok(g.tensor(out))
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Classifier,
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
}

fn check_labels(images: &[ImageTensor], labels: &[usize], num_classes: usize) -> Result<()> {
    if images.is_empty() || images.len() != labels.len() {
        return contract_err(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return contract_err(format!("label {bad} but the head has {num_classes} classes"));
    }
    Ok(())
}

/// Trains encoder and head together with AdamW; the learning rate follows
/// the cosine schedule, stepped once per epoch.
pub fn finetune(
    mut model: Classifier,
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_labels(images, labels, model.head.num_classes)?;
    let all: Vec<ParamId> = model.store.ids().collect();
    let mut groups = vec![ParamGroup::new("all", all, cfg.lr_max)];
    validate_groups(&model.store, &groups)?;
    let mut state = AdamWState::new(&model.store, cfg.adamw);
    let m = model.head.num_classes;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_lrs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_annealing_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        groups[0].lr = lr;
        let order = permutation(&mut derive_rng(cfg.seed, &[streams::SHUFFLE, epoch as u64]), images.len());
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&ImageTensor> = batch.iter().map(|&i| &images[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = images_to_matrix(&refs)?;
            let y = one_hot(&ys, m)?;
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let logits = model.forward(&mut g, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            sum += g.scalar(loss)? * batch.len() as f64;
            seen += batch.len();
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads)?;
            adamw_step(&mut model.store, &groups, &mut state)?;
        }
        epoch_losses.push(sum / seen as f64);
        epoch_lrs.push(lr);
    }
    Ok(FinetuneOutcome {
        model,
        epoch_losses,
        epoch_lrs,
    })
}
