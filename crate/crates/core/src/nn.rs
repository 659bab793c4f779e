//! Affine layers and ReLU stacks over a [`ParamStore`].

use rand::Rng;

use crate::chaos::ImageTensor;
use crate::error::{dim_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `y = x·Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Uniform samples in `±1/√fan_in`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[out_dim, in_dim], in_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform_init(rng, &[out_dim], in_dim))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let bv = g.param(store, b);
                g.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// Affine layers with ReLU between consecutive layers and none after the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, …, out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return dim_err(format!("{prefix}: layer widths {dims:?} invalid"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, width) = match g.shape(x) {
            [r, c] => (*r, *c),
            s => return dim_err(format!("mlp input must be a matrix, got {s:?}")),
        };
        if width != self.in_dim() {
            return dim_err(format!("mlp expects width {}, got {width}", self.in_dim()));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Flattens a batch of equally shaped images into a `[B × C·H·W]` matrix.
pub fn images_to_matrix(images: &[&ImageTensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return dim_err("empty image batch");
    };
    let shape = first.shape();
    let width = first.pixels().len();
    let mut data = Vec::with_capacity(images.len() * width);
    for img in images {
        if img.shape() != shape {
            return dim_err(format!("batch mixes shapes {:?} and {:?}", shape, img.shape()));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(&[images.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_forward_matches_manual_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng).unwrap();
        assert_eq!(store.len(), 4);
        let x = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = mlp.forward(&mut g, &store, xv).unwrap();

        let w0 = store.get(mlp.layers[0].weight).data();
        let b0 = store.get(mlp.layers[0].bias.unwrap()).data();
        let w1 = store.get(mlp.layers[1].weight).data();
        let b1 = store.get(mlp.layers[1].bias.unwrap()).data();
        let h: Vec<f64> = (0..4)
            .map(|o| (0..3).map(|i| w0[o * 3 + i] * x.data()[i]).sum::<f64>() + b0[o])
            .map(|v| v.max(0.0))
            .collect();
        for o in 0..2 {
            let want = (0..4).map(|i| w1[o * 4 + i] * h[i]).sum::<f64>() + b1[o];
            assert!((g.value(y)[o] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[2, 4]));
        assert!(mlp.forward(&mut g, &store, x).is_err());
        assert!(Mlp::new(&mut store, "z", &[3], &mut rng).is_err());
    }
}
