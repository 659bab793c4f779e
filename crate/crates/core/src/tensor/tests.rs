use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Autodiff gradient of `build` w.r.t. the single input `x`.
fn autodiff<F>(x: &Tensor, build: F) -> Vec<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(&x.clone().with_requires_grad(true));
    let loss = build(&mut g, v).unwrap();
    g.backward(loss).unwrap().get(v).unwrap().to_vec()
}

fn numeric<F>(x: &Tensor, build: F, step: f64) -> Vec<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_grad(
        |t| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let loss = build(&mut g, v)?;
            g.scalar(loss)
        },
        x,
        step,
    )
    .unwrap()
    .into_data()
}

fn check_grad<F>(x: &Tensor, build: F, tol: f64)
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Copy,
{
    let a = autodiff(x, build);
    let n = numeric(x, build, 1e-6);
    let err = max_relative_error(&a, &n);
    assert!(err <= tol, "relative error {err} > {tol}");
}

#[test]
fn matmul_identity_and_hand_sum() {
    let mut g = Graph::new();
    let eye = g.constant(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a_t = Tensor::new(&[2, 3], vec![1.5, -2.0, 3.0, 0.25, 7.0, -1.0]).unwrap();
    let a = g.constant(&a_t);
    let p = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(p), a_t.data());

    let m = g.constant(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = g.constant(&Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let p = g.matmul(m, ones).unwrap();
    assert_eq!(g.shape(p), &[2, 1]);
    assert_eq!(g.value(p), &[3.0, 7.0]);

    let bad = g.matmul(ones, m);
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let build = |g: &mut Graph, v: Var| {
        let bv = g.constant(&b);
        let p = g.matmul(v, bv)?;
        Ok(g.sum(p))
    };
    let grad = autodiff(&a, build);
    // closed form: dA[i][p] = Σ_j b[p][j]
    for i in 0..3 {
        for p in 0..4 {
            let want = b.data()[p * 2] + b.data()[p * 2 + 1];
            assert!((grad[i * 4 + p] - want).abs() < 1e-15);
        }
    }
    let fd = numeric(&a, build, 1e-6);
    assert!(max_relative_error(&grad, &fd) <= 1e-6);
}

#[test]
fn matmul_nt_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[3, 5], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let c = random(&[3, 4], &mut rng);
    check_grad(
        &a,
        |g, v| {
            let wv = g.constant(&w);
            let cv = g.constant(&c);
            let p = g.matmul_nt(v, wv)?;
            let q = g.mul(p, cv)?;
            Ok(g.sum(q))
        },
        1e-6,
    );
    check_grad(
        &w,
        |g, v| {
            let av = g.constant(&a);
            let cv = g.constant(&c);
            let p = g.matmul_nt(av, v)?;
            let q = g.mul(p, cv)?;
            Ok(g.sum(q))
        },
        1e-6,
    );
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(&Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s), &[0.5]);

    let x = g.constant(&Tensor::new(&[2], vec![-3.0, 3.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r), &[0.0, 3.0]);

    let one = g.constant(&Tensor::scalar(1.0));
    let eps = 1e-6;
    let c = g.clamp(one, eps, 1.0 - eps).unwrap();
    assert_eq!(g.value(c), &[1.0 - eps]);
    assert!((g.value(c)[0] - 0.999999).abs() < 1e-15);
}

#[test]
fn log_of_nonpositive_is_a_domain_error() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(g.log(x), Err(Error::Domain(_))));
    let y = g.constant(&Tensor::scalar(-2.0));
    assert!(matches!(g.log(y), Err(Error::Domain(_))));
    let big = g.constant(&Tensor::scalar(1e4));
    assert!(matches!(g.exp(big), Err(Error::Domain(_))));
}

#[test]
fn broadcasting_is_equal_shape_or_scalar_only() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[3]));
    assert!(g.add(a, b).is_err());
    let s = g.constant(&Tensor::scalar(2.0));
    let r = g.add(s, a).unwrap();
    assert_eq!(g.shape(r), &[2, 3]);
    assert!(g.value(r).iter().all(|&v| v == 2.0));
}

#[test]
fn clamp_gradient_is_indicator_of_interval() {
    let x = Tensor::new(&[4], vec![-0.5, 0.2, 0.8, 1.5]).unwrap();
    let grad = autodiff(&x, |g, v| {
        let c = g.clamp(v, 0.0, 1.0)?;
        Ok(g.sum(c))
    });
    assert_eq!(grad, vec![0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[3, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1000.0, 0.0, 0.0]).unwrap());
    let s = g.softmax(x).unwrap();
    let v = g.value(s);
    for j in 0..3 {
        assert!((v[j] - 1.0 / 3.0).abs() < 1e-15);
    }
    // direct exp/sum evaluation
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let total: f64 = e.iter().sum();
    let frozen = [0.09003057, 0.24472847, 0.66524096];
    for j in 0..3 {
        assert!((v[3 + j] - e[j] / total).abs() < 1e-15);
        assert!((v[3 + j] - frozen[j]).abs() < 1e-8);
    }
    assert!(v[6..].iter().all(|p| p.is_finite()));
    assert!((v[6] - 1.0).abs() < 1e-15 && v[7] < 1e-300);
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[3, 5], &mut rng);
    for use_log in [false, true] {
        check_grad(
            &x,
            |g, v| {
                let s = if use_log { g.log_softmax(v)? } else { g.softmax(v)? };
                let wv = g.constant(&w);
                let p = g.mul(s, wv)?;
                Ok(g.sum(p))
            },
            1e-7,
        );
    }
}

#[test]
fn row_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[4, 4], &mut rng);
    let y = random(&[4, 2], &mut rng);
    let bias = random(&[4], &mut rng);
    let w = random(&[4, 6], &mut rng);
    check_grad(
        &x,
        |g, v| {
            let n = g.normalize_rows(v)?;
            let s = g.matmul_nt(n, n)?;
            let m = g.mask_diagonal(s)?;
            let l = g.log_softmax(m)?;
            let picked = g.gather(l, &[1, 0, 3, 2])?;
            Ok(g.mean(picked))
        },
        1e-7,
    );
    check_grad(
        &x,
        |g, v| {
            let b = g.constant(&bias);
            let h = g.add_bias(v, b)?;
            let yv = g.constant(&y);
            let c = g.concat_cols(h, yv)?;
            let wv = g.constant(&w);
            let p = g.mul(c, wv)?;
            let s = g.sigmoid(p);
            let r = g.relu(s);
            let e = g.exp(r)?;
            let l = g.log(e)?;
            Ok(g.sum(l))
        },
        1e-7,
    );
    check_grad(
        &bias,
        |g, b| {
            let xv = g.constant(&x);
            let h = g.add_bias(xv, b)?;
            let sq = g.mul(h, h)?;
            let k = g.scale(sq, -0.5);
            Ok(g.sum(k))
        },
        1e-7,
    );
}

#[test]
fn backward_of_sum_is_ones() {
    let w = Tensor::new(&[5], vec![0.3, -1.0, 2.0, 0.0, 9.0]).unwrap();
    let grad = autodiff(&w, |g, v| Ok(g.sum(v)));
    assert_eq!(grad, vec![1.0; 5]);
}

#[test]
fn backward_of_sigmoid_times_w_matches_closed_form() {
    for &w0 in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
        let w = Tensor::scalar(w0);
        let grad = autodiff(&w, |g, v| {
            let s = g.sigmoid(v);
            g.mul(s, v)
        });
        let s = sigmoid(w0);
        let want = s + w0 * s * (1.0 - s);
        assert!((grad[0] - want).abs() < 1e-15, "w={w0}");
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let v = g.leaf(&Tensor::zeros(&[3]).with_requires_grad(true));
    let r = g.relu(v);
    assert!(matches!(g.backward(r), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::scalar(3.0);
    let d = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
    assert!((d.data()[0] - 6.0).abs() < 1e-6);
    let y = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let z = finite_diff_grad(|_| Ok(42.0), &y, 1e-5).unwrap();
    assert_eq!(z.data(), &[0.0; 4]);
}

#[test]
fn parameter_gradients_route_to_the_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads).unwrap();
    }
    assert_eq!(store.get(id).grad().unwrap(), &[4.0, -8.0]);
    store.zero_grad();
    assert!(store.get(id).grad().is_none());
}

fn random_graph_losses(x: &Tensor, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = random(&[3, 4], &mut rng);
    let w2 = random(&[4, 4], &mut rng);
    let l1 = |g: &mut Graph, v: Var| -> Result<Var> {
        let a = g.constant(&w1);
        let h = g.matmul_nt(v, a)?;
        let s = g.sigmoid(h);
        Ok(g.sum(s))
    };
    let l2 = |g: &mut Graph, v: Var| -> Result<Var> {
        let b = g.constant(&w2);
        let h = g.mul(v, b)?;
        let r = g.relu(h);
        let ls = g.log_softmax(r)?;
        Ok(g.mean(ls))
    };
    let both = |g: &mut Graph, v: Var| -> Result<Var> {
        let a = l1(g, v)?;
        let b = l2(g, v)?;
        g.add(a, b)
    };
    (autodiff(x, l1), autodiff(x, l2), autodiff(x, both))
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let x = random(&[4, 4], &mut rng);
        let (g1, g2, g12) = random_graph_losses(&x, seed);
        for i in 0..g12.len() {
            assert!((g12[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[4, 4], &mut rng);
    let a = random_graph_losses(&x, 5);
    let b = random_graph_losses(&x, 5);
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e3f64..1e3, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let s = softmax_rows(&t).unwrap();
        for r in 0..rows {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
