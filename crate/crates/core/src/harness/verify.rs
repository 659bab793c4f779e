//! Self-check suite behind `chaos-ssl verify`: oracle comparisons, gradient
//! checks, map properties, exact schedule and metric values, persistence.

use std::time::Instant;

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::data::{decode_dataset, encode_dataset, gen_dataset, TextureDatasetSpec};
use super::metrics::MetricsReport;
use crate::chaos::{chaotic_transform, iterate_map, map_step, sensitivity_probe, ChaoticMapSpec, ImageTensor, MapKind};
use crate::error::Result;
use crate::finetune::{cosine_annealing_lr, cross_entropy, one_hot};
use crate::fusion::FusionModel;
use crate::seeding::derive_rng;
use crate::ssl::{nt_xent_loss, nt_xent_oracle, nt_xent_value, standard_pairing, ContrastiveModel, EncoderSpec, EncoderWeights, ProjectorSpec};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub sampled: usize,
    pub max_rel_error: f64,
}

/// Gradients smaller than this are compared in absolute terms, since central
/// differences on an `O(1)` loss carry round-off near `1e-10`.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares backprop against central differences on `samples` scalar
/// parameters drawn uniformly from `store`. `build` records the loss.
pub fn sampled_gradient_check<R, F>(store: &mut ParamStore, samples: usize, step: f64, rng: &mut R, mut build: F) -> Result<GradCheck>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.zero_grad();
    store.accumulate(&grads)?;

    let ids: Vec<_> = store.ids().collect();
    let total = store.num_scalars();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut pick = ids[0];
        for &id in &ids {
            let n = store.get(id).numel();
            if flat < n {
                pick = id;
                break;
            }
            flat -= n;
        }
        let analytic = store.get(pick).grad().map_or(0.0, |gr| gr[flat]);
        let orig = store.get(pick).data()[flat];
        let mut eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
            store.get_mut(pick).data_mut()[flat] = v;
            let mut g = Graph::new();
            let l = build(&mut g, store)?;
            g.scalar(l)
        };
        let plus = eval(orig + step, store)?;
        let minus = eval(orig - step, store)?;
        store.get_mut(pick).data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic, numeric, GRAD_FLOOR));
    }
    Ok(GradCheck {
        sampled: samples,
        max_rel_error: worst,
    })
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("positive dims")
}

/// Encoder → projector → NT-Xent on a reduced-width model.
pub fn ssl_gradient_check(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = derive_rng(seed, &[0x55]);
    let enc = EncoderSpec {
        input_dim: 12,
        hidden_dims: vec![8],
        feature_dim: 6,
    };
    let mut model = ContrastiveModel::new(&enc, &ProjectorSpec::reduced(8, 8, 4), &mut rng)?;
    let x = random_matrix(&mut rng, 6, 12);
    let pairing = standard_pairing(3);
    let (encoder, projector) = (model.encoder.clone(), model.projector.clone());
    sampled_gradient_check(&mut model.store, samples, 1e-6, &mut rng, |g, store| {
        let xv = g.constant(&x);
        let f = encoder.encode(g, store, xv)?;
        let z = projector.project(g, store, f)?;
        nt_xent_loss(g, z, &pairing, 0.5)
    })
}

/// Two backbones → SE gate → classifier → cross-entropy on a reduced model.
pub fn fusion_gradient_check(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = derive_rng(seed, &[0xF5]);
    let spec = |feature_dim| EncoderSpec {
        input_dim: 10,
        hidden_dims: vec![7],
        feature_dim,
    };
    let b1 = EncoderWeights::random(&spec(5), &mut rng)?;
    let b2 = EncoderWeights::random(&spec(4), &mut rng)?;
    let mut model = FusionModel::new(&b1, &b2, 3, &mut rng)?;
    let x = random_matrix(&mut rng, 5, 10);
    let y = one_hot(&[0, 1, 2, 1, 0], 3)?;
    let layout = model.clone();
    sampled_gradient_check(&mut model.store, samples, 1e-6, &mut rng, |g, store| {
        let mut m = layout.clone();
        m.store = store.clone();
        let xv = g.constant(&x);
        let logits = m.fuse_forward(g, xv)?;
        cross_entropy(g, logits, &y)
    })
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn check_nt_xent() -> Result<CheckOutcome> {
    let mut rng = derive_rng(11, &[]);
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        for width in [2, 128] {
            for _ in 0..50 {
                let z = random_matrix(&mut rng, 2 * n, width);
                let pairing = standard_pairing(n);
                let fast = nt_xent_value(&z, &pairing, 0.5)?;
                worst = worst.max((fast - nt_xent_oracle(&z, &pairing, 0.5)?).abs());
            }
        }
    }
    let same = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![0.3, -1.2, 0.7]])?;
    let identical = nt_xent_value(&same, &standard_pairing(1), 0.5)?;
    Ok(outcome(
        "nt-xent oracle",
        worst <= 1e-10 && identical == 0.0,
        format!("max |fast − oracle| = {worst:.2e}, identical pair loss = {}", identical + 0.0),
    ))
}

fn check_gradients() -> Result<CheckOutcome> {
    let ssl = ssl_gradient_check(1, 100)?;
    let fusion = fusion_gradient_check(1, 100)?;
    Ok(outcome(
        "gradient fidelity",
        ssl.max_rel_error <= 1e-4 && fusion.max_rel_error <= 1e-4,
        format!(
            "ssl {:.2e} over {}, fusion {:.2e} over {}",
            ssl.max_rel_error, ssl.sampled, fusion.max_rel_error, fusion.sampled
        ),
    ))
}

fn check_maps() -> Result<CheckOutcome> {
    let mut rng = derive_rng(12, &[]);
    let mut in_range = true;
    for kind in [MapKind::Logistic, MapKind::Tent, MapKind::Sine] {
        let spec = ChaoticMapSpec::new(kind);
        for _ in 0..10_000 {
            let y = map_step(rng.gen::<f64>(), &spec)?;
            in_range &= (0.0..=1.0).contains(&y);
        }
    }
    let tent = ChaoticMapSpec::new(MapKind::Tent);
    let fixed = (map_step(2.0 / 3.0, &tent)? - 2.0 / 3.0).abs();
    let logistic = ChaoticMapSpec::new(MapKind::Logistic);
    let mut diverged = 0;
    for _ in 0..100 {
        let x0 = rng.gen_range(0.05..0.95);
        if sensitivity_probe(x0, 1e-8, 50, &logistic)?.iter().any(|&d| d > 0.01) {
            diverged += 1;
        }
    }
    let img = ImageTensor::new(1, 2, 2, vec![0.1, 0.4, 0.6, 0.9])?;
    let a = chaotic_transform(&img, 3, &tent)?;
    let b = chaotic_transform(&img, 3, &tent)?;
    let repeat = a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits());
    let k_ok = iterate_map(0.3, 5, &tent).is_ok();
    Ok(outcome(
        "chaotic maps",
        in_range && fixed <= 1e-15 && diverged >= 90 && repeat && k_ok,
        format!("outputs in [0,1]: {in_range}, tent fixed-point drift {fixed:.1e}, logistic diverged {diverged}/100, repeatable: {repeat}"),
    ))
}

fn check_exact_values() -> Result<CheckOutcome> {
    let (t_max, hi, lo) = (10, 1e-3, 1e-5);
    let ends = cosine_annealing_lr(0, t_max, hi, lo)? == hi && cosine_annealing_lr(t_max, t_max, hi, lo)? == lo;
    let mid = (cosine_annealing_lr(5, t_max, hi, lo)? - 0.5 * (hi + lo)).abs();
    let f1 = MetricsReport::from_confusion(vec![vec![3, 2], vec![1, 4]])?.macro_f1;
    let m = 5;
    let mut g = Graph::new();
    let logits = g.constant(&Tensor::zeros(&[3, m]));
    let ce = cross_entropy(&mut g, logits, &one_hot(&[0, 2, 4], m)?)?;
    let ce_gap = (g.scalar(ce)? - (m as f64).ln()).abs();
    Ok(outcome(
        "schedule and metrics",
        ends && mid <= 1e-18 && (f1 - 23.0 / 33.0).abs() <= 1e-9 && ce_gap <= 1e-12,
        format!("endpoints exact: {ends}, midpoint gap {mid:.1e}, macro-F1 {f1:.9}, |CE − ln M| {ce_gap:.1e}"),
    ))
}

fn check_persistence() -> Result<CheckOutcome> {
    let spec = TextureDatasetSpec {
        images_per_class: 6,
        height: 8,
        width: 8,
        ..TextureDatasetSpec::default()
    };
    let (train, _) = gen_dataset(&spec)?;
    let bytes = encode_dataset(&train.images)?;
    let data_ok = decode_dataset(&bytes)? == train.images && decode_dataset(&bytes[..bytes.len() - 3]).is_err();

    let enc = EncoderWeights::random(
        &EncoderSpec {
            input_dim: 4,
            hidden_dims: vec![3],
            feature_dim: 2,
        },
        &mut derive_rng(13, &[]),
    )?;
    let ckpt = Checkpoint::new(enc.tensors).with_meta("stage", "pretrain");
    let raw = ckpt.to_bytes();
    let ckpt_ok = Checkpoint::from_bytes(&raw)? == ckpt && Checkpoint::from_bytes(&raw[..raw.len() - 1]).is_err();
    Ok(outcome(
        "persistence",
        data_ok && ckpt_ok,
        format!("dataset round trip: {data_ok}, checkpoint round trip: {ckpt_ok}"),
    ))
}

/// Runs every check; an internal error counts as a failure of that check.
pub fn run_self_checks() -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn() -> Result<CheckOutcome>); 5] = [
        ("nt-xent oracle", check_nt_xent),
        ("gradient fidelity", check_gradients),
        ("chaotic maps", check_maps),
        ("schedule and metrics", check_exact_values),
        ("persistence", check_persistence),
    ];
    checks
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            match check() {
                Ok(mut o) => {
                    o.detail = format!("{} ({:.2}s)", o.detail, start.elapsed().as_secs_f64());
                    o
                }
                Err(e) => outcome(name, false, format!("error: {e}")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_checks_pass_on_reduced_models() {
        assert!(ssl_gradient_check(3, 40).unwrap().max_rel_error <= 1e-4);
        assert!(fusion_gradient_check(3, 40).unwrap().max_rel_error <= 1e-4);
    }

    #[test]
    fn every_self_check_passes() {
        for o in run_self_checks() {
            assert!(o.passed, "{o}");
        }
    }
}
