//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. Nodes are only ever appended, so the node
//! order is a topological order and [`Graph::backward`] simply walks it in
//! reverse.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Saves `Phi(x)` so backward needs no second erf.
    Gelu(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Cosine {
        u: Var,
        v: Var,
        dot: f64,
        norm_u: f64,
        norm_v: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norm guard added to each vector norm in [`Graph::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

/// Norms below this trigger the zero-vector warning in cosine similarity.
const COSINE_WARN_NORM: f64 = 1e-12;

/// A recorded computation. One graph per training step (or per sample);
/// it owns every intermediate value and is dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// `c = alpha * a @ b + beta * c` with explicit strides, so transposed
/// operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices covering m*k, k*n and m*n elements
    // under the given strides; every call site below derives the strides
    // from the row-major shapes of those same slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2))
}

/// Exact GELU: `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of [`gelu_scalar`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Snapshot of a learnable tensor; respects its `requires_grad` flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let snapshot = Tensor::new(tensor.shape(), tensor.data().to_vec())
            .expect("tensor invariants hold")
            .with_requires_grad(tensor.requires_grad());
        self.leaf(snapshot)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let shape = if self.value(a).shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Adds a scalar constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let t = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Offset(x), rg)
    }

    /// Adds a `[n]` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(row).numel() != n {
            return Err(Error::Shape(format!(
                "add_row: {:?} + row {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Stacks rank-2 (or rank-1, as single rows) inputs vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let n = self.value(first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != n || v.shape().len() > 2 {
                return Err(Error::Shape(format!(
                    "concat_rows: column count {} vs {:?}",
                    n,
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / n;
        let t = Tensor::new(&[rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins inputs side by side; all must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Shape(format!(
                    "concat_cols: row count {} vs {:?}",
                    m,
                    self.value(p).shape()
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + col..i * total + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let t = Tensor::new(&[m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > m {
            return Err(Error::Index(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::new(&[end - start, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(Error::Index(format!("slice_cols {start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let t = Tensor::new(&[m, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Per-row normalisation over the last axis followed by `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Shape(format!(
                "layernorm: input {:?}, gamma {:?}, beta {:?}",
                self.value(x).shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let cdf: Vec<f64> = src.iter().map(|&v| normal_cdf(v)).collect();
        let data = src.iter().zip(&cdf).map(|(v, c)| v * c).collect();
        let t = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x, cdf), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if c < 2 {
            return Err(Error::Contract(format!("cross entropy needs >= 2 classes, got {c}")));
        }
        if labels.len() != b {
            return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `u.v / ((|u| + eps)(|v| + eps))` over all elements of two equal-shape tensors.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).numel() != self.value(v).numel() {
            return Err(Error::Shape(format!(
                "cosine_similarity: {:?} vs {:?}",
                self.value(u).shape(),
                self.value(v).shape()
            )));
        }
        let (a, b) = (self.value(u).data(), self.value(v).data());
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let norm_u = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_v = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_u < COSINE_WARN_NORM || norm_v < COSINE_WARN_NORM {
            log::warn!("cosine similarity of a (near) zero vector: norms {norm_u:e}, {norm_v:e}");
        }
        let s = dot / ((norm_u + COSINE_EPS) * (norm_v + COSINE_EPS));
        let rg = self.rg(&[u, v]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Cosine {
                u,
                v,
                dot,
                norm_u,
                norm_v,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar root. Leaf gradients are added to
    /// whatever earlier calls left behind; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let live = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = av.dims2().expect("checked in forward");
                let n = bv.dims2().expect("checked in forward").1;
                if live(*a) {
                    // dA = G B^T
                    gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), 1.0, acc!(*a));
                }
                if live(*b) {
                    // dB = A^T G
                    gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), 1.0, acc!(*b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if live(v) {
                        add_into(acc!(v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    let other = nodes[b.0].value.data();
                    let dst = acc!(*a);
                    for j in 0..g.len() {
                        dst[j] += g[j] * other[j];
                    }
                }
                if live(*b) {
                    let other = nodes[a.0].value.data();
                    let dst = acc!(*b);
                    for j in 0..g.len() {
                        dst[j] += g[j] * other[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if live(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if live(*x) {
                    add_into(acc!(*x), g);
                }
            }
            Op::AddRow(x, row) => {
                if live(*x) {
                    add_into(acc!(*x), g);
                }
                if live(*row) {
                    let n = nodes[row.0].value.numel();
                    let dst = acc!(*row);
                    for chunk in g.chunks(n) {
                        add_into(dst, chunk);
                    }
                }
            }
            Op::Transpose(x) => {
                if live(*x) {
                    let (m, n) = nodes[x.0].value.dims2().expect("rank 2");
                    let dst = acc!(*x);
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if live(p) {
                        add_into(acc!(p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let (m, w) = nodes[p.0].value.dims2().expect("rank 2");
                    if live(p) {
                        let dst = acc!(p);
                        for i in 0..m {
                            add_into(&mut dst[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                if live(*x) {
                    let n = nodes[x.0].value.last_dim();
                    let dst = acc!(*x);
                    add_into(&mut dst[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols(x, start) => {
                if live(*x) {
                    let n = nodes[x.0].value.last_dim();
                    let w = node.value.last_dim();
                    let dst = acc!(*x);
                    for (i, gr) in g.chunks(w).enumerate() {
                        add_into(&mut dst[i * n + start..i * n + start + w], gr);
                    }
                }
            }
            Op::Sum(x) => {
                if live(*x) {
                    acc!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if live(*x) {
                    let dst = acc!(*x);
                    let s = g[0] / dst.len() as f64;
                    dst.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Softmax(x) => {
                if live(*x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let dst = acc!(*x);
                    for ((dr, yr), gr) in dst.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                if live(*gamma) {
                    let dst = acc!(*gamma);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dst[j] += gr[j] * hr[j];
                        }
                    }
                }
                if live(*beta) {
                    let dst = acc!(*beta);
                    for gr in g.chunks(d) {
                        add_into(dst, gr);
                    }
                }
                if live(*x) {
                    let dst = acc!(*x);
                    let inv_d = 1.0 / d as f64;
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            sum_gh += gh;
                            sum_ghx += gh * hr[j];
                        }
                        let dr = &mut dst[r * d..(r + 1) * d];
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            dr[j] += rstd[r] * (gh - inv_d * sum_gh - inv_d * hr[j] * sum_ghx);
                        }
                    }
                }
            }
            Op::Gelu(x, cdf) => {
                if live(*x) {
                    let src = nodes[x.0].value.data();
                    let dst = acc!(*x);
                    for j in 0..g.len() {
                        let v = src[j];
                        dst[j] += g[j] * (cdf[j] + v * INV_SQRT_2PI * (-0.5 * v * v).exp());
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if live(*logits) {
                    let c = nodes[logits.0].value.last_dim();
                    let scale = g[0] / labels.len() as f64;
                    let dst = acc!(*logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dst[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Cosine {
                u,
                v,
                dot,
                norm_u,
                norm_v,
            } => {
                let a = *norm_u + COSINE_EPS;
                let b = *norm_v + COSINE_EPS;
                let uv = nodes[u.0].value.data();
                let vv = nodes[v.0].value.data();
                // d/du [dot / (a b)] = v/(ab) - dot/(a^2 b) * u/|u|
                let mut side = |this: Var, mine: &[f64], other: &[f64], n_mine: f64, a_mine: f64, b_other: f64| {
                    if !live(this) {
                        return;
                    }
                    let radial = if n_mine > 0.0 {
                        dot / (a_mine * a_mine * b_other * n_mine)
                    } else {
                        0.0
                    };
                    let lin = 1.0 / (a_mine * b_other);
                    let dst = acc!(this);
                    for j in 0..dst.len() {
                        dst[j] += g[0] * (other[j] * lin - mine[j] * radial);
                    }
                };
                side(*u, uv, vv, *norm_u, a, b);
                side(*v, vv, uv, *norm_v, b, a);
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_graph_fn, OP_TOLERANCE};
    use crate::autodiff::suite::run_op_suite;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let m = t(&[&[1.5, -2.0, 3.25], &[0.1, 0.2, 0.3], &[7.0, 8.0, -9.0]]);
        let i = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out).data(), m.data());

        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let out = g.matmul(a, z).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::new(&[3], vec![1000.0; 3]).unwrap());
        let y = g.softmax(x);
        for p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 4], vec![5.0; 4]).unwrap());
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layernorm(x, gamma, beta, LN_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
        assert!(g.layernorm(x, gamma, beta, 0.0).is_err());
    }

    const LN_EPS: f64 = 1e-6;

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let l = g.cross_entropy_logits(x, &[0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let x = g.constant(Tensor::new(&[1, 2], vec![30.0, -30.0]).unwrap());
        let l = g.cross_entropy_logits(x, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-9);
        assert!(matches!(g.cross_entropy_logits(x, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let nv = g.scale(v, -1.0);
        let s = g.cosine_similarity(v, v).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-6);
        let s = g.cosine_similarity(v, nv).unwrap();
        assert!((g.value(s).item() + 1.0).abs() < 1e-6);
        let a = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let s = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.cosine_similarity(v, z).unwrap();
        assert!(g.value(s).item().abs() < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5])
                .unwrap()
                .with_requires_grad(true),
        );
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let wt = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_requires_grad(true);
        let w = g.leaf(wt.clone());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(w).unwrap(), wt.data());
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::full(&[2], 3.0).with_requires_grad(true));
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = Tensor::from_rows(&[&[0.3, -1.2, 0.7], &[1.1, 0.4, -0.6]]).unwrap();
        let b = Tensor::from_rows(&[&[0.5, -0.2], &[1.3, 0.9], &[-0.8, 0.25]]).unwrap();
        let r = check_graph_fn(
            "matmul",
            &[a, b],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.sum(y))
            },
            OP_TOLERANCE,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn op_suite_smoke() {
        for r in run_op_suite(7, 5).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
