//! Contrastive pre-training: encoder, projector, NT-Xent loss and the
//! two-group AdamW training loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_contrastive_views, AugmentConfig};
use crate::chaos::{ChaoticMapSpec, ImageTensor};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{images_to_matrix, Mlp};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::seeding::{derive_rng, permutation, streams};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Width of the contrastive projection space.
pub const PROJECTION_DIM: usize = 128;

/// Fully connected encoder on flattened pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl EncoderSpec {
    /// Smaller backbone, the one that is contrastively pre-trained.
    pub fn tiny(input_dim: usize) -> Self {
        EncoderSpec {
            input_dim,
            hidden_dims: vec![256, 128],
            feature_dim: 64,
        }
    }

    /// Wider backbone trained from random initialisation.
    pub fn large(input_dim: usize) -> Self {
        EncoderSpec {
            input_dim,
            hidden_dims: vec![512, 256],
            feature_dim: 128,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims().iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("encoder widths {:?} must be positive", self.layer_dims())));
        }
        Ok(())
    }
}

/// Three affine layers; the output width is [`PROJECTION_DIM`] outside tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub layer_dims: [usize; 3],
}

impl ProjectorSpec {
    pub fn new(hidden1: usize, hidden2: usize) -> Self {
        ProjectorSpec {
            layer_dims: [hidden1, hidden2, PROJECTION_DIM],
        }
    }

    /// Narrow output for gradient checks on tiny models.
    pub fn reduced(hidden1: usize, hidden2: usize, out: usize) -> Self {
        ProjectorSpec {
            layer_dims: [hidden1, hidden2, out],
        }
    }
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec::new(256, 256)
    }
}

/// Named tensors of a trained encoder, detached from any store.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub spec: EncoderSpec,
    pub tensors: Vec<(String, Tensor)>,
}

impl EncoderWeights {
    pub fn random<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", spec, rng)?;
        Ok(enc.weights(&store))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    mlp: Mlp,
    prefix: String,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(Encoder {
            spec: spec.clone(),
            mlp: Mlp::new(store, prefix, &spec.layer_dims(), rng)?,
            prefix: prefix.to_string(),
        })
    }

    /// Registers `weights` in `store` under `prefix`.
    pub fn load(store: &mut ParamStore, prefix: &str, weights: &EncoderWeights) -> Result<Self> {
        // Build the layout with throwaway values, then overwrite every tensor.
        let mut scratch = rand::rngs::mock::StepRng::new(0, 0);
        let enc = Encoder::new(store, prefix, &weights.spec, &mut scratch)?;
        let ids = enc.params();
        if ids.len() != weights.tensors.len() {
            return dim_err(format!(
                "encoder expects {} tensors, weights hold {}",
                ids.len(),
                weights.tensors.len()
            ));
        }
        for (id, (name, t)) in ids.iter().zip(&weights.tensors) {
            let local = &store.name(*id)[prefix.len() + 1..];
            if local != name || store.get(*id).shape() != t.shape() {
                return dim_err(format!(
                    "weight `{name}` {:?} does not fit `{local}` {:?}",
                    t.shape(),
                    store.get(*id).shape()
                ));
            }
            store.get_mut(*id).data_mut().copy_from_slice(t.data());
        }
        Ok(enc)
    }

    pub fn weights(&self, store: &ParamStore) -> EncoderWeights {
        let tensors = self
            .params()
            .into_iter()
            .map(|id| {
                let name = store.name(id)[self.prefix.len() + 1..].to_string();
                let t = store.get(id);
                (name, Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor"))
            })
            .collect();
        EncoderWeights {
            spec: self.spec.clone(),
            tensors,
        }
    }

    /// `[B × input_dim]` → `[B × feature_dim]`. Pixel values are mapped from
    /// `[0, 1]` to `[−1, 1]` before the first layer.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: Var) -> Result<Var> {
        let scaled = g.scale(batch, 2.0);
        let shift = g.constant(&Tensor::new(&[self.spec.input_dim], vec![-1.0; self.spec.input_dim])?);
        let centred = g.add_bias(scaled, shift)?;
        self.mlp.forward(g, store, centred)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }
}

/// Plain-tensor convenience around [`Encoder::encode`].
pub fn encode_images(enc: &Encoder, store: &ParamStore, images: &[&ImageTensor]) -> Result<Tensor> {
    let x = images_to_matrix(images)?;
    if x.shape()[1] != enc.spec.input_dim {
        return dim_err(format!(
            "images flatten to {} values, encoder takes {}",
            x.shape()[1],
            enc.spec.input_dim
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let f = enc.encode(&mut g, store, xv)?;
    Ok(g.tensor(f))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projector {
    mlp: Mlp,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        spec: &ProjectorSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let [a, b, c] = spec.layer_dims;
        Ok(Projector {
            mlp: Mlp::new(store, prefix, &[feature_dim, a, b, c], rng)?,
        })
    }

    /// Three affine layers, ReLU after the first two.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        self.mlp.forward(g, store, features)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }
}

/// Encoder and projector sharing one store, each in its own optimizer group.
#[derive(Clone, Debug)]
pub struct ContrastiveModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projector: Projector,
}

impl ContrastiveModel {
    pub fn new<R: Rng + ?Sized>(enc: &EncoderSpec, proj: &ProjectorSpec, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", enc, rng)?;
        let projector = Projector::new(&mut store, "projector", enc.feature_dim, proj, rng)?;
        Ok(ContrastiveModel {
            store,
            encoder,
            projector,
        })
    }

    pub fn forward(&self, g: &mut Graph, batch: Var) -> Result<Var> {
        let f = self.encoder.encode(g, &self.store, batch)?;
        self.projector.project(g, &self.store, f)
    }

    pub fn groups(&self, lr_encoder: f64, lr_projector: f64) -> Vec<ParamGroup> {
        vec![
            ParamGroup::new("encoder", self.encoder.params(), lr_encoder),
            ParamGroup::new("projector", self.projector.params(), lr_projector),
        ]
    }
}

/// `i ↔ i + n` for a batch laid out as `[views₁; views₂]`.
pub fn standard_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

fn check_pairing(rows: usize, pairing: &[usize], tau: f64) -> Result<()> {
    if rows == 0 || rows % 2 != 0 {
        return contract_err(format!("NT-Xent needs an even, nonzero row count, got {rows}"));
    }
    if pairing.len() != rows {
        return contract_err(format!("pairing has {} entries for {rows} rows", pairing.len()));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= rows || j == i || pairing[j] != i {
            return contract_err(format!("pairing is not a perfect matching at row {i}"));
        }
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return contract_err(format!("temperature {tau} must be positive"));
    }
    Ok(())
}

/// NT-Xent over the rows of `z`, recorded on the graph.
///
/// `L = (1/2N) Σᵢ −log[ exp(sim(zᵢ, z_pair(i))/τ) / Σ_{k≠i} exp(sim(zᵢ, z_k)/τ) ]`
/// with cosine similarity.
pub fn nt_xent_loss(g: &mut Graph, z: Var, pairing: &[usize], tau: f64) -> Result<Var> {
    let rows = match g.shape(z) {
        [r, _] => *r,
        s => return dim_err(format!("NT-Xent input must be a matrix, got {s:?}")),
    };
    check_pairing(rows, pairing, tau)?;
    let unit = g.normalize_rows(z)?;
    let sim = g.matmul_nt(unit, unit)?;
    let logits = g.scale(sim, 1.0 / tau);
    let masked = g.mask_diagonal(logits)?;
    let log_prob = g.log_softmax(masked)?;
    let positives = g.gather(log_prob, pairing)?;
    let mean = g.mean(positives);
    Ok(g.scale(mean, -1.0))
}

/// Value of [`nt_xent_loss`] for a plain matrix.
pub fn nt_xent_value(z: &Tensor, pairing: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(z);
    let l = nt_xent_loss(&mut g, v, pairing, tau)?;
    g.scalar(l)
}

/// Direct double loop over all pairwise cosine similarities.
pub fn nt_xent_oracle(z: &Tensor, pairing: &[usize], tau: f64) -> Result<f64> {
    let (rows, _) = z.dims2()?;
    check_pairing(rows, pairing, tau)?;
    let norm = |i: usize| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..rows {
        if !(norm(i) > 0.0) {
            return Err(Error::Domain(format!("row {i} has zero norm")));
        }
    }
    let sim = |i: usize, k: usize| {
        let dot: f64 = z.row(i).iter().zip(z.row(k)).map(|(a, b)| a * b).sum();
        dot / (norm(i) * norm(k))
    };
    let mut total = 0.0;
    for i in 0..rows {
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (sim(i, k) / tau).exp();
            }
        }
        let numer = (sim(i, pairing[i]) / tau).exp();
        total += -(numer / denom).ln();
    }
    Ok(total / rows as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub lr_encoder: f64,
    pub lr_projector: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            temperature: 0.5,
            lr_encoder: 1e-3,
            lr_projector: 1e-3,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.lr_encoder >= 0.0 && self.lr_projector >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Encoder only; the projector is dropped after training.
    pub encoder: EncoderWeights,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Stage-1 contrastive training on unlabeled images.
///
/// Each epoch shuffles the data and drops the incomplete final batch. Views of
/// image `i` in epoch `e` come from a stream derived from `(seed, e, i)`, so
/// results do not depend on how batches are scheduled.
pub fn pretrain(
    images: &[ImageTensor],
    aug: &AugmentConfig,
    map: &ChaoticMapSpec,
    cfg: &PretrainConfig,
    encoder_spec: &EncoderSpec,
    projector_spec: &ProjectorSpec,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    map.validate()?;
    if images.is_empty() {
        return contract_err("pretraining needs at least one image");
    }
    if cfg.batch_size > images.len() {
        return contract_err(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            images.len()
        ));
    }
    let mut init = derive_rng(cfg.seed, &[streams::INIT]);
    let mut model = ContrastiveModel::new(encoder_spec, projector_spec, &mut init)?;
    let groups = model.groups(cfg.lr_encoder, cfg.lr_projector);
    crate::tensor::validate_groups(&model.store, &groups)?;
    let mut state = AdamWState::new(&model.store, cfg.adamw);
    let pairing = standard_pairing(cfg.batch_size);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut derive_rng(cfg.seed, &[streams::SHUFFLE, epoch as u64]), images.len());
        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks_exact(cfg.batch_size) {
            let mut first = Vec::with_capacity(batch.len());
            let mut second = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = derive_rng(cfg.seed, &[streams::VIEWS, epoch as u64, i as u64]);
                let pair = make_contrastive_views(&images[i], &mut rng, aug, map)?;
                first.push(pair.v1);
                second.push(pair.v_chaos);
            }
            let views: Vec<&ImageTensor> = first.iter().chain(&second).collect();
            let x = images_to_matrix(&views)?;

            let mut g = Graph::new();
            let xv = g.constant(&x);
            let z = model.forward(&mut g, xv)?;
            let loss = nt_xent_loss(&mut g, z, &pairing, cfg.temperature)?;
            let value = g.scalar(loss)?;
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads)?;
            adamw_step(&mut model.store, &groups, &mut state)?;

            step_losses.push(value);
            sum += value;
            steps += 1;
        }
        epoch_losses.push(sum / steps as f64);
    }
    Ok(PretrainOutcome {
        encoder: model.encoder.weights(&model.store),
        epoch_losses,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::MapKind;
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn nt_xent_identical_single_pair_is_zero() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.3, -1.2, 2.0]]).unwrap();
        let p = standard_pairing(1);
        assert_eq!(nt_xent_value(&z, &p, 0.5).unwrap(), 0.0);
        assert_eq!(nt_xent_oracle(&z, &p, 0.5).unwrap(), 0.0);
        let scaled = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![3.0, -12.0, 20.0]]).unwrap();
        assert!(nt_xent_value(&scaled, &p, 0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nt_xent_two_orthogonal_pairs() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = standard_pairing(2);
        // every row: −log(e² / (e² + 2)) = log(1 + 2e⁻²)
        let closed = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((closed - 0.23954).abs() < 1e-5);
        let fast = nt_xent_value(&z, &p, 0.5).unwrap();
        let slow = nt_xent_oracle(&z, &p, 0.5).unwrap();
        assert!((fast - closed).abs() < 1e-14);
        assert!((slow - closed).abs() < 1e-14);
    }

    #[test]
    fn nt_xent_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for n in 1..=4 {
            for width in [2, 128] {
                for _ in 0..10 {
                    let z = random_matrix(&mut rng, 2 * n, width);
                    let tau = rng.gen_range(0.1..1.0);
                    let p = standard_pairing(n);
                    let a = nt_xent_value(&z, &p, tau).unwrap();
                    let b = nt_xent_oracle(&z, &p, tau).unwrap();
                    assert!((a - b).abs() <= 1e-10);
                    assert!(a >= 0.0);
                }
            }
        }
    }

    #[test]
    fn nt_xent_contract_errors() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(nt_xent_value(&z, &[1, 0], 0.5), Err(Error::Domain(_))));
        assert!(matches!(nt_xent_oracle(&z, &[1, 0], 0.5), Err(Error::Domain(_))));
        let odd = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!(matches!(nt_xent_value(&odd, &[1, 0, 2], 0.5), Err(Error::Contract(_))));
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(nt_xent_value(&z, &[0, 1], 0.5).is_err());
        assert!(nt_xent_value(&z, &[1, 0], 0.0).is_err());
    }

    #[test]
    fn nt_xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_matrix(&mut rng, 6, 5);
        let p = standard_pairing(3);
        let mut g = Graph::new();
        let v = g.leaf(&z.clone().with_requires_grad(true));
        let l = nt_xent_loss(&mut g, v, &p, 0.5).unwrap();
        let auto = g.backward(l).unwrap().get(v).unwrap().to_vec();
        let fd = finite_diff_grad(|t| nt_xent_oracle(t, &p, 0.5), &z, 1e-6).unwrap();
        assert!(max_relative_error(&auto, fd.data()) <= 1e-7);
    }

    #[test]
    fn encoder_and_projector_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = EncoderSpec {
            input_dim: 12,
            hidden_dims: vec![8],
            feature_dim: 6,
        };
        let mut model = ContrastiveModel::new(&spec, &ProjectorSpec::new(16, 16), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 12);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let z = model.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(z), &[5, PROJECTION_DIM]);
        assert_eq!(model.projector.out_dim(), PROJECTION_DIM);

        // permuting the batch permutes the features
        let f = model.encoder.encode(&mut g, &model.store, xv).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let xpv = g.constant(&xp);
        let fp = model.encoder.encode(&mut g, &model.store, xpv).unwrap();
        let (fa, fb) = (g.tensor(f), g.tensor(fp));
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(fb.row(r), fa.row(i));
        }

        // zero parameters give zero features and projections
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let f = model.encoder.encode(&mut g, &model.store, xv).unwrap();
        assert!(g.value(f).iter().all(|&v| v == 0.0));
        let z = model.projector.project(&mut g, &model.store, f).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.0));

        let bad = g.constant(&Tensor::zeros(&[2, 11]));
        assert!(model.encoder.encode(&mut g, &model.store, bad).is_err());
    }

    #[test]
    fn encoder_weights_round_trip_through_a_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = EncoderSpec {
            input_dim: 6,
            hidden_dims: vec![4],
            feature_dim: 3,
        };
        let w = EncoderWeights::random(&spec, &mut rng).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::load(&mut store, "b1", &w).unwrap();
        assert_eq!(enc.weights(&store), w);

        let other = EncoderSpec {
            feature_dim: 4,
            ..spec
        };
        let wrong = EncoderWeights {
            spec: other,
            tensors: w.tensors.clone(),
        };
        assert!(Encoder::load(&mut ParamStore::new(), "b1", &wrong).is_err());
    }

    fn tiny_images(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|_| ImageTensor::new(3, 2, 2, (0..12).map(|_| rng.gen::<f64>()).collect()).unwrap())
            .collect()
    }

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 12,
            hidden_dims: vec![16],
            feature_dim: 8,
        }
    }

    #[test]
    fn frozen_optimizer_keeps_weights_and_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let images = tiny_images(&mut rng, 4);
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 4,
            lr_encoder: 0.0,
            lr_projector: 0.0,
            ..PretrainConfig::default()
        };
        let map = ChaoticMapSpec::new(MapKind::Tent).with_k_range(2, 2);
        let out = pretrain(&images, &AugmentConfig::identity(), &map, &cfg, &tiny_spec(), &ProjectorSpec::new(8, 8)).unwrap();
        // each epoch sees the same batch in a different row order
        assert!(out.epoch_losses.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12));
        let init = ContrastiveModel::new(
            &tiny_spec(),
            &ProjectorSpec::new(8, 8),
            &mut derive_rng(cfg.seed, &[streams::INIT]),
        )
        .unwrap();
        assert_eq!(out.encoder, init.encoder.weights(&init.store));
    }

    #[test]
    fn pretrain_is_reproducible_and_rejects_oversized_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let images = tiny_images(&mut rng, 10);
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let map = ChaoticMapSpec::default();
        let run = || pretrain(&images, &AugmentConfig::default(), &map, &cfg, &tiny_spec(), &ProjectorSpec::new(8, 8)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.step_losses.len(), 2 * 2);

        let big = PretrainConfig {
            batch_size: 11,
            ..cfg
        };
        let err = pretrain(&images, &AugmentConfig::default(), &map, &big, &tiny_spec(), &ProjectorSpec::new(8, 8));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    fn rotate(rows: &[Vec<f64>], angles: &[f64]) -> Vec<Vec<f64>> {
        let d = rows[0].len();
        let mut out = rows.to_vec();
        for (i, &theta) in angles.iter().enumerate() {
            let (a, b) = (i % d, (i + 1) % d);
            let (s, c) = theta.sin_cos();
            for r in &mut out {
                let (x, y) = (r[a], r[b]);
                r[a] = c * x - s * y;
                r[b] = s * x + c * y;
            }
        }
        out
    }

    fn batch_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=4).prop_flat_map(|n| {
            prop::collection::vec(
                prop::collection::vec(-3.0f64..3.0, 4).prop_filter("nonzero row", |r| r.iter().any(|v| v.abs() > 1e-3)),
                2 * n,
            )
        })
    }

    proptest! {
        #[test]
        fn nt_xent_is_rotation_invariant(rows in batch_strategy(), angles in prop::collection::vec(-3.2f64..3.2, 6)) {
            let p = standard_pairing(rows.len() / 2);
            let a = nt_xent_value(&Tensor::from_rows(&rows).unwrap(), &p, 0.5).unwrap();
            let b = nt_xent_value(&Tensor::from_rows(&rotate(&rows, &angles)).unwrap(), &p, 0.5).unwrap();
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }

        #[test]
        fn nt_xent_ignores_row_scale(rows in batch_strategy(), scales in prop::collection::vec(0.01f64..100.0, 8)) {
            let p = standard_pairing(rows.len() / 2);
            let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
            let a = nt_xent_value(&Tensor::from_rows(&rows).unwrap(), &p, 0.5).unwrap();
            let b = nt_xent_value(&Tensor::from_rows(&scaled).unwrap(), &p, 0.5).unwrap();
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }

        #[test]
        fn nt_xent_is_nonnegative_and_matches_oracle(rows in batch_strategy(), tau in 0.05f64..2.0) {
            let p = standard_pairing(rows.len() / 2);
            let z = Tensor::from_rows(&rows).unwrap();
            let fast = nt_xent_value(&z, &p, tau).unwrap();
            prop_assert!(fast >= 0.0);
            prop_assert!((fast - nt_xent_oracle(&z, &p, tau).unwrap()).abs() <= 1e-10);
        }
    }
}
