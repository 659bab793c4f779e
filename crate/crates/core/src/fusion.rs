//! Attention-gated fusion of two backbones.
//!
//! `f_concat = [B1(x), B2(x)]`, `w = σ(W2·ReLU(W1·f_concat))`,
//! `logits = W_class·(f_concat ⊙ w) + b_class`. The gating layers carry no
//! bias; the classifier does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chaos::ImageTensor;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::finetune::{cross_entropy, one_hot, Classify};
use crate::nn::{images_to_matrix, Linear};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::seeding::{derive_rng, permutation, streams};
use crate::ssl::{Encoder, EncoderSpec, EncoderWeights};
use crate::tensor::{validate_groups, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Bottleneck width of the gate: `max(8, (d1 + d2) / 16)`.
pub fn reduced_dim(d1: usize, d2: usize) -> usize {
    ((d1 + d2) / 16).max(8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            epochs: 10,
            lr_backbone: 1e-6,
            lr_head: 1e-4,
            batch_size: 64,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl FusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("fusion batch_size must be at least 1".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0) {
            return Err(Error::Config("fusion learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Intermediate values of one fused forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionParts {
    pub concat: Var,
    pub gate: Var,
    pub attended: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub store: ParamStore,
    pub backbone1: Encoder,
    pub backbone2: Encoder,
    /// `[d_r × (d1 + d2)]`
    pub w1: ParamId,
    /// `[(d1 + d2) × d_r]`
    pub w2: ParamId,
    pub classifier: Linear,
    pub d_r: usize,
    pub num_classes: usize,
}

impl FusionModel {
    pub fn new<R: Rng + ?Sized>(
        b1: &EncoderWeights,
        b2: &EncoderWeights,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if b1.spec.input_dim != b2.spec.input_dim {
            return contract_err(format!(
                "backbones take inputs of width {} and {}",
                b1.spec.input_dim, b2.spec.input_dim
            ));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut store = ParamStore::new();
        let backbone1 = Encoder::load(&mut store, "b1", b1)?;
        let backbone2 = Encoder::load(&mut store, "b2", b2)?;
        let width = b1.spec.feature_dim + b2.spec.feature_dim;
        let d_r = reduced_dim(b1.spec.feature_dim, b2.spec.feature_dim);
        let gate1 = Linear::new(&mut store, "gate.w1", width, d_r, false, rng)?;
        let gate2 = Linear::new(&mut store, "gate.w2", d_r, width, false, rng)?;
        let classifier = Linear::new(&mut store, "fusion_head", width, num_classes, true, rng)?;
        Ok(FusionModel {
            store,
            backbone1,
            backbone2,
            w1: gate1.weight,
            w2: gate2.weight,
            classifier,
            d_r,
            num_classes,
        })
    }

    /// Layout-only model whose tensors are then overwritten from `named`.
    pub fn from_named(
        b1: &EncoderSpec,
        b2: &EncoderSpec,
        num_classes: usize,
        named: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut scratch = rand::rngs::mock::StepRng::new(0, 0);
        let w1 = EncoderWeights::random(b1, &mut scratch)?;
        let w2 = EncoderWeights::random(b2, &mut scratch)?;
        let mut model = FusionModel::new(&w1, &w2, num_classes, &mut scratch)?;
        model.store.import(named)?;
        Ok(model)
    }

    pub fn width(&self) -> usize {
        self.backbone1.feature_dim() + self.backbone2.feature_dim()
    }

    /// `[B1(x) | B2(x)]`, backbone 1 first.
    pub fn extract_concat(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f1 = self.backbone1.encode(g, &self.store, x)?;
        let f2 = self.backbone2.encode(g, &self.store, x)?;
        g.concat_cols(f1, f2)
    }

    /// `σ(W2·ReLU(W1·f))` row by row.
    pub fn se_attention(&self, g: &mut Graph, concat: Var) -> Result<Var> {
        match g.shape(concat) {
            [_, w] if *w == self.width() => {}
            s => return dim_err(format!("gate expects width {}, got {s:?}", self.width())),
        }
        let w1 = g.param(&self.store, self.w1);
        let squeezed = g.matmul_nt(concat, w1)?;
        let act = g.relu(squeezed);
        let w2 = g.param(&self.store, self.w2);
        let excited = g.matmul_nt(act, w2)?;
        Ok(g.sigmoid(excited))
    }

    pub fn forward_parts(&self, g: &mut Graph, x: Var) -> Result<FusionParts> {
        let concat = self.extract_concat(g, x)?;
        let gate = self.se_attention(g, concat)?;
        let attended = g.mul(concat, gate)?;
        let logits = self.classifier.forward(g, &self.store, attended)?;
        Ok(FusionParts {
            concat,
            gate,
            attended,
            logits,
        })
    }

    pub fn fuse_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, x)?.logits)
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut ids = self.backbone1.params();
        ids.extend(self.backbone2.params());
        ids
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.w2];
        ids.extend(self.classifier.params());
        ids
    }

    pub fn groups(&self, lr_backbone: f64, lr_head: f64) -> Vec<ParamGroup> {
        vec![
            ParamGroup::new("backbones", self.backbone_params(), lr_backbone),
            ParamGroup::new("head", self.head_params(), lr_head),
        ]
    }
}

impl Classify for FusionModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let x = images_to_matrix(images)?;
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let l = self.fuse_forward(&mut g, xv)?;
        Ok(g.tensor(l))
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutcome {
    pub model: FusionModel,
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy training with constant, group-specific learning rates.
pub fn train_fusion(
    mut model: FusionModel,
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &FusionTrainConfig,
) -> Result<FusionOutcome> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return contract_err(format!("{} images with {} labels", images.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes) {
        return contract_err(format!("label {bad} but the model has {} classes", model.num_classes));
    }
    let input = images[0].pixels().len();
    if input != model.backbone1.spec.input_dim {
        return contract_err(format!(
            "images flatten to {input} values, backbones take {}",
            model.backbone1.spec.input_dim
        ));
    }
    let groups = model.groups(cfg.lr_backbone, cfg.lr_head);
    validate_groups(&model.store, &groups)?;
    let mut state = AdamWState::new(&model.store, cfg.adamw);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut derive_rng(cfg.seed, &[streams::SHUFFLE, epoch as u64]), images.len());
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&ImageTensor> = batch.iter().map(|&i| &images[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = images_to_matrix(&refs)?;
            let y = one_hot(&ys, model.num_classes)?;
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let logits = model.fuse_forward(&mut g, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            sum += g.scalar(loss)? * batch.len() as f64;
            seen += batch.len();
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads)?;
            adamw_step(&mut model.store, &groups, &mut state)?;
        }
        epoch_losses.push(sum / seen as f64);
    }
    Ok(FusionOutcome { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::accuracy;
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(feature_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim: 12,
            hidden_dims: vec![6],
            feature_dim,
        }
    }

    fn model(rng: &mut ChaCha8Rng) -> FusionModel {
        let b1 = EncoderWeights::random(&spec(5), rng).unwrap();
        let b2 = EncoderWeights::random(&spec(3), rng).unwrap();
        FusionModel::new(&b1, &b2, 3, rng).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::new(&[n, 12], (0..n * 12).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn zero(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn reduced_dim_rule() {
        assert_eq!(reduced_dim(64, 128), 12);
        assert_eq!(reduced_dim(5, 3), 8);
        assert_eq!(reduced_dim(512, 512), 64);
    }

    #[test]
    fn concat_layout_is_backbone1_then_backbone2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = model(&mut rng);
        // sentinel: backbone 1 outputs its bias 1.0, backbone 2 outputs 2.0
        let (p1, p2) = (m.backbone1.params(), m.backbone2.params());
        zero(&mut m.store, &p1);
        zero(&mut m.store, &p2);
        let last1 = *p1.last().unwrap();
        let last2 = *p2.last().unwrap();
        m.store.get_mut(last1).data_mut().iter_mut().for_each(|v| *v = 1.0);
        m.store.get_mut(last2).data_mut().iter_mut().for_each(|v| *v = 2.0);
        let x = batch(&mut rng, 2);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let c = m.extract_concat(&mut g, xv).unwrap();
        let row: Vec<f64> = g.value(c)[..8].to_vec();
        assert_eq!(row, vec![1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = model(&mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let c = m.extract_concat(&mut g, xv).unwrap();
        let f1 = m.backbone1.encode(&mut g, &m.store, xv).unwrap();
        assert_eq!(&g.value(c)[..5], &g.value(f1)[..5]);
    }

    #[test]
    fn zero_gate_weights_give_half_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = model(&mut rng);
        let (w1, w2) = (m.w1, m.w2);
        zero(&mut m.store, &[w1, w2]);
        let x = batch(&mut rng, 4);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let parts = m.forward_parts(&mut g, xv).unwrap();
        assert!(g.value(parts.gate).iter().all(|&v| v == 0.5));
        // logits = W_class·(0.5 f) + b
        let f = g.tensor(parts.concat);
        let w = m.store.get(m.classifier.weight).data().to_vec();
        let b = m.store.get(m.classifier.bias.unwrap()).data().to_vec();
        let logits = g.tensor(parts.logits);
        for r in 0..4 {
            for c in 0..3 {
                let want = (0..8).map(|j| w[c * 8 + j] * 0.5 * f.row(r)[j]).sum::<f64>() + b[c];
                assert!((logits.row(r)[c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_backbones_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = model(&mut rng);
        let ids = m.backbone_params();
        zero(&mut m.store, &ids);
        let x = batch(&mut rng, 3);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let c = m.extract_concat(&mut g, xv).unwrap();
        assert!(g.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_is_open_interval_and_contracts_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = model(&mut rng);
        let x = batch(&mut rng, 1000);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let p = m.forward_parts(&mut g, xv).unwrap();
        assert!(g.value(p.gate).iter().all(|&v| v > 0.0 && v < 1.0));
        for (a, c) in g.value(p.attended).iter().zip(g.value(p.concat)) {
            assert!(a.abs() <= c.abs());
        }
    }

    #[test]
    fn gradients_through_gate_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = model(&mut rng);
        let x = batch(&mut rng, 4);
        let y = one_hot(&[0, 2, 1, 2], 3).unwrap();
        let loss_of = |store: &ParamStore| -> Result<f64> {
            let mm = FusionModel {
                store: store.clone(),
                ..m.clone()
            };
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let l = mm.fuse_forward(&mut g, xv)?;
            let ce = cross_entropy(&mut g, l, &y)?;
            g.scalar(ce)
        };
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let l = m.fuse_forward(&mut g, xv).unwrap();
        let ce = cross_entropy(&mut g, l, &y).unwrap();
        let grads = g.backward(ce).unwrap();
        let mut store = m.store.clone();
        store.accumulate(&grads).unwrap();
        for id in [m.w1, m.w2, m.classifier.weight, m.backbone1.params()[0], m.backbone2.params()[2]] {
            let fd = finite_diff_grad(
                |t| {
                    let mut s = m.store.clone();
                    s.get_mut(id).data_mut().copy_from_slice(t.data());
                    loss_of(&s)
                },
                m.store.get(id),
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(store.get(id).grad().unwrap(), fd.data());
            assert!(err <= 1e-6, "{}: {err}", store.name(id));
        }
    }

    #[test]
    fn bias_shift_does_not_change_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(&mut rng);
        let images: Vec<ImageTensor> = (0..20)
            .map(|_| ImageTensor::new(3, 2, 2, (0..12).map(|_| rng.gen::<f64>()).collect()).unwrap())
            .collect();
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let before = crate::finetune::predict(&m.logits(&refs).unwrap()).unwrap();
        let mut shifted = m.clone();
        let b = shifted.classifier.bias.unwrap();
        shifted.store.get_mut(b).data_mut().iter_mut().for_each(|v| *v += 3.25);
        let after = crate::finetune::predict(&shifted.logits(&refs).unwrap()).unwrap();
        assert_eq!(before, after);
    }

    fn toy_set(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ImageTensor>, Vec<usize>) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 3;
            let px = (0..12)
                .map(|j| {
                    let centre: f64 = if j % 3 == y { 0.8 } else { 0.2 };
                    (centre + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)
                })
                .collect();
            images.push(ImageTensor::new(3, 2, 2, px).unwrap());
            labels.push(y);
        }
        (images, labels)
    }

    #[test]
    fn zero_backbone_lr_freezes_backbones_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(&mut rng);
        let (images, labels) = toy_set(&mut rng, 30);
        let cfg = FusionTrainConfig {
            epochs: 2,
            lr_backbone: 0.0,
            lr_head: 1e-2,
            batch_size: 8,
            ..FusionTrainConfig::default()
        };
        let out = train_fusion(m.clone(), &images, &labels, &cfg).unwrap();
        for id in m.backbone_params() {
            assert_eq!(out.model.store.get(id).data(), m.store.get(id).data());
        }
        for id in m.head_params() {
            assert_ne!(out.model.store.get(id).data(), m.store.get(id).data());
        }

        let none = FusionTrainConfig { epochs: 0, ..cfg };
        let out = train_fusion(m.clone(), &images, &labels, &none).unwrap();
        assert_eq!(out.model.store.export(), m.store.export());
    }

    #[test]
    fn training_learns_the_toy_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = model(&mut rng);
        let (images, labels) = toy_set(&mut rng, 60);
        let before = accuracy(&m, &images, &labels).unwrap();
        let cfg = FusionTrainConfig {
            epochs: 30,
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            batch_size: 10,
            ..FusionTrainConfig::default()
        };
        let out = train_fusion(m, &images, &labels, &cfg).unwrap();
        let after = accuracy(&out.model, &images, &labels).unwrap();
        assert!(after > before && after > 0.8, "{before} -> {after}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b1 = EncoderWeights::random(&spec(5), &mut rng).unwrap();
        let other = EncoderSpec {
            input_dim: 10,
            ..spec(3)
        };
        let b2 = EncoderWeights::random(&other, &mut rng).unwrap();
        assert!(matches!(FusionModel::new(&b1, &b2, 3, &mut rng), Err(Error::Contract(_))));

        let m = model(&mut rng);
        let (images, _) = toy_set(&mut rng, 4);
        let err = train_fusion(m, &images, &[0, 1, 2, 3], &FusionTrainConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn named_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = model(&mut rng);
        let rebuilt = FusionModel::from_named(&spec(5), &spec(3), 3, &m.store.export()).unwrap();
        assert_eq!(rebuilt.store.export(), m.store.export());
    }
}
