//! Dense double-precision tensors with define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its output value, so node indices are a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits every node once.
//!
//! Broadcasting is limited to equal shapes and scalar-vs-tensor; row-wise
//! operations (`add_bias`, `softmax`, `log_softmax`, `normalize_rows`, ...)
//! cover the batched cases the models need.

mod gemm;
mod gradcheck;
mod params;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use params::{validate_groups, ParamGroup, ParamId, ParamStore};

pub(crate) use gemm::{gemm, Layout};

use crate::error::{contract_err, dim_err, Error, Result};

/// Flat row-major array plus shape, optionally carrying an accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `r×c` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return dim_err("from_rows needs a non-empty rectangular input");
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return dim_err(format!(
                "gradient of length {} for tensor of {} values",
                g.len(),
                self.data.len()
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Rows/columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    AddBias { x: usize, bias: usize },
    Softmax(usize),
    LogSoftmax(usize),
    NormalizeRows { x: usize, norms: Vec<f64> },
    FillDiagonal(usize),
    Gather { x: usize, cols: Vec<usize> },
    ConcatCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => dim_err(format!("{op}: expected a matrix, got shape {s:?}")),
        }
    }

    /// Leaf holding a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter, so [`ParamStore::accumulate`] can
    /// route its gradient back.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id));
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.nodes[v.0].value[..] {
            [x] => Ok(x),
            _ => contract_err("scalar() on a multi-element node"),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            Layout::row_major(k),
            &self.nodes[b.0].value,
            Layout::row_major(n),
            &mut out,
            false,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b: false }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the affine-layer product with `[out×in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return dim_err(format!("matmul_nt: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            Layout::row_major(k),
            &self.nodes[b.0].value,
            Layout::transposed(k),
            &mut out,
            false,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b: true }, rg))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let shape = if sa == sb || numel(sb) == 1 {
            sa.clone()
        } else if numel(sa) == 1 {
            sb.clone()
        } else {
            return dim_err(format!("{kind:?}: shapes {sa:?} and {sb:?} do not broadcast"));
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = numel(&shape);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<f64> = (0..n)
            .map(|i| f(va[i % va.len()], vb[i % vb.len()]))
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Binary { kind, a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let node = &self.nodes[x.0];
        let out = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("log of nonpositive value {bad}")));
        }
        Ok(self.unary(x, Op::Log(x.0), f64::ln))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        if out.iter().any(|v| v.is_infinite()) {
            return Err(Error::Domain("exp overflowed to infinity".into()));
        }
        Ok(self.unary(x, Op::Exp(x.0), f64::exp))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient 1 inside the interval, 0 outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return contract_err(format!("clamp bounds [{lo}, {hi}] are empty"));
        }
        Ok(self.unary(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x.0);
        self.push(Vec::new(), vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x.0);
        self.push(Vec::new(), vec![m], Op::Mean(x.0), rg)
    }

    /// Adds the length-`n` vector `bias` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_bias")?;
        if numel(&self.nodes[bias.0].shape) != n {
            return dim_err(format!(
                "add_bias: bias of shape {:?} for {n} columns",
                self.nodes[bias.0].shape
            ));
        }
        let b = &self.nodes[bias.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(vec![m, n], out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "softmax")?;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![m, n], out, Op::Softmax(x.0), rg))
    }

    /// Row-wise `x − logsumexp(x)`; entries equal to `−∞` are excluded.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "log_softmax")?;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Domain("log_softmax row has no finite entry".into()));
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![m, n], out, Op::LogSoftmax(x.0), rg))
    }

    /// Scales every row of `x` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "normalize_rows")?;
        let mut out = self.nodes[x.0].value.clone();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Domain(format!("row {i} has norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![m, n], out, Op::NormalizeRows { x: x.0, norms }, rg))
    }

    /// Square matrix with its diagonal replaced by `−∞` (no gradient through it).
    pub fn mask_diagonal(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "mask_diagonal")?;
        if m != n {
            return dim_err(format!("mask_diagonal: {m}×{n} is not square"));
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..n {
            out[i * n + i] = f64::NEG_INFINITY;
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![m, n], out, Op::FillDiagonal(x.0), rg))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather")?;
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return dim_err("gather: one in-range column index per row required");
        }
        let v = &self.nodes[x.0].value;
        let out = cols.iter().enumerate().map(|(i, &c)| v[i * n + c]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(vec![m], out, Op::Gather { x: x.0, cols: cols.to_vec() }, rg))
    }

    /// `[a | b]` for `a[m×p]`, `b[m×q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix(a, "concat_cols")?;
        let (m2, q) = self.matrix(b, "concat_cols")?;
        if m != m2 {
            return dim_err(format!("concat_cols: {m} and {m2} rows"));
        }
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&va[i * p..(i + 1) * p]);
            out.extend_from_slice(&vb[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, p + q], out, Op::ConcatCols(a.0, b.0), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (i, id)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = node.shape[1];
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.rg(a) {
                    // dA = G · Bᵀ  (or G · B when B was used transposed)
                    let lb = if trans_b { Layout::row_major(k) } else { Layout::transposed(n) };
                    let acc = slot(grads, a, m * k);
                    gemm(m, n, k, g, Layout::row_major(n), vb, lb, acc, true);
                }
                if self.rg(b) {
                    if trans_b {
                        // dB[n×k] = Gᵀ · A
                        let acc = slot(grads, b, n * k);
                        gemm(n, m, k, g, Layout::transposed(n), va, Layout::row_major(k), acc, true);
                    } else {
                        // dB[k×n] = Aᵀ · G
                        let acc = slot(grads, b, k * n);
                        gemm(k, m, n, va, Layout::transposed(k), g, Layout::row_major(n), acc, true);
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                for (input, other, sign) in [(a, vb, 1.0), (b, va, -1.0)] {
                    if !self.rg(input) {
                        continue;
                    }
                    let len = self.nodes[input].value.len();
                    let acc = slot(grads, input, len);
                    for (j, gj) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => *gj,
                            BinaryKind::Sub => sign * gj,
                            BinaryKind::Mul => gj * other[j % other.len()],
                        };
                        acc[j % len] += d;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.rg(x) {
                    let acc = slot(grads, x, g.len());
                    acc.iter_mut().zip(g).for_each(|(a, gj)| *a += gj * c);
                }
            }
            &Op::Relu(x) => {
                let xv = &self.nodes[x].value;
                let acc = slot(grads, x, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        acc[j] += g[j];
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let acc = slot(grads, x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] * val[j] * (1.0 - val[j]);
                }
            }
            &Op::Log(x) => {
                let xv = &self.nodes[x].value;
                let acc = slot(grads, x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] / xv[j];
                }
            }
            &Op::Exp(x) => {
                let acc = slot(grads, x, g.len());
                for j in 0..g.len() {
                    acc[j] += g[j] * val[j];
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x].value;
                let acc = slot(grads, x, g.len());
                for j in 0..g.len() {
                    if xv[j] >= lo && xv[j] <= hi {
                        acc[j] += g[j];
                    }
                }
            }
            &Op::Sum(x) => {
                let len = self.nodes[x].value.len();
                slot(grads, x, len).iter_mut().for_each(|a| *a += g[0]);
            }
            &Op::Mean(x) => {
                let len = self.nodes[x].value.len();
                let d = g[0] / len as f64;
                slot(grads, x, len).iter_mut().for_each(|a| *a += d);
            }
            &Op::AddBias { x, bias } => {
                let n = node.shape[1];
                if self.rg(x) {
                    let acc = slot(grads, x, g.len());
                    acc.iter_mut().zip(g).for_each(|(a, gj)| *a += gj);
                }
                if self.rg(bias) {
                    let acc = slot(grads, bias, n);
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(a, gj)| *a += gj);
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = node.shape[1];
                let acc = slot(grads, x, g.len());
                for ((arow, grow), yrow) in acc
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(val.chunks_exact(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        arow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = node.shape[1];
                let acc = slot(grads, x, g.len());
                for ((arow, grow), yrow) in acc
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(val.chunks_exact(n))
                {
                    let total: f64 = grow.iter().sum();
                    for j in 0..n {
                        arow[j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.shape[1];
                let acc = slot(grads, *x, g.len());
                for (r, ((arow, grow), yrow)) in acc
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(val.chunks_exact(n))
                    .enumerate()
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        arow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                    }
                }
            }
            &Op::FillDiagonal(x) => {
                let n = node.shape[1];
                let acc = slot(grads, x, g.len());
                for j in 0..g.len() {
                    if j / n != j % n {
                        acc[j] += g[j];
                    }
                }
            }
            Op::Gather { x, cols } => {
                let n = self.nodes[*x].shape[1];
                let len = self.nodes[*x].value.len();
                let acc = slot(grads, *x, len);
                for (r, &c) in cols.iter().enumerate() {
                    acc[r * n + c] += g[r];
                }
            }
            &Op::ConcatCols(a, b) => {
                let (p, q) = (self.nodes[a].shape[1], self.nodes[b].shape[1]);
                for (input, offset, width) in [(a, 0, p), (b, p, q)] {
                    if !self.rg(input) {
                        continue;
                    }
                    let len = self.nodes[input].value.len();
                    let acc = slot(grads, input, len);
                    for (arow, grow) in acc.chunks_exact_mut(width).zip(g.chunks_exact(p + q)) {
                        arow.iter_mut()
                            .zip(&grow[offset..offset + width])
                            .for_each(|(a, gj)| *a += gj);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Row-wise softmax of a plain matrix, no graph involved.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, n) = logits.dims2()?;
    let mut out = logits.clone().with_requires_grad(false);
    out.grad = None;
    for row in out.data.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
