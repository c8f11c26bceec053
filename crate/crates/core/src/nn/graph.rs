//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Nodes built only from
//! constants are never visited.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Contiguous token rows belonging to one sequence.
pub type Segment = std::ops::Range<usize>;

const LN_EPS: f64 = 1e-5;
/// Floor applied to the GP noise variance.
pub const NOISE_FLOOR: f64 = 1e-8;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Arc<[Segment]>,
        /// Softmax weights per (segment, head).
        probs: Vec<Array2<f64>>,
    },
    SegmentMean(NodeId, Arc<[Segment]>),
    Sum(NodeId),
    MaternGram {
        z: NodeId,
        log_ls: NodeId,
        log_os: NodeId,
    },
    AddNoise {
        k: NodeId,
        log_noise: NodeId,
        variance: f64,
    },
    GaussianNll {
        k: NodeId,
        /// `K⁻¹ − α αᵀ`, the adjoint of the loss w.r.t. `K` up to a factor ½.
        grad_k: Array2<f64>,
    },
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Failure while building a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("kernel matrix is not positive definite even with maximal jitter")]
    NotPositiveDefinite,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`; zeros if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

/// Matérn-5/2 value and `dk/dr · 1/r` for distance `r`.
fn matern_terms(r: f64, ls: f64, s2: f64) -> (f64, f64) {
    let u = 5f64.sqrt() * r / ls;
    let e = (-u).exp();
    let k = s2 * (1.0 + u + u * u / 3.0) * e;
    // dk/dz_i = coef * (z_i - z_j)
    let coef = -s2 * 5.0 / (3.0 * ls * ls) * (1.0 + u) * e;
    (k, coef)
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Array2<f64>>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Array2<f64>>) -> NodeId {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Array2<f64>>) -> NodeId {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(GraphError::Shape {
                op: "matmul",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = va.dot(vb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(GraphError::Shape {
                op: "add",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = va + vb;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `a + 1 bᵀ` for a `1 × m` row `b`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || va.ncols() != vb.ncols() {
            return Err(GraphError::Shape {
                op: "add_row",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = va + vb;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// Affine map `x W + 1 bᵀ`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let rows = self.value(parts[0]).nrows();
        for p in parts {
            if self.value(*p).nrows() != rows {
                return Err(GraphError::Shape {
                    op: "concat_cols",
                    lhs: shape(self.value(parts[0])),
                    rhs: shape(self.value(*p)),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let cols = self.value(parts[0]).ncols();
        for p in parts {
            if self.value(*p).ncols() != cols {
                return Err(GraphError::Shape {
                    op: "concat_rows",
                    lhs: shape(self.value(parts[0])),
                    rhs: shape(self.value(*p)),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row lookup (embedding). Indices must be in bounds.
    pub fn gather_rows(&mut self, src: NodeId, idx: Vec<usize>) -> NodeId {
        let v = self.value(src);
        let mut out = Array2::zeros((idx.len(), v.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&v.row(i));
        }
        let ng = self.ng(&[src]);
        self.push(out, Op::GatherRows(src, idx), ng)
    }

    /// Row-wise layer normalization with `1 × m` scale and offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let m = vx.ncols() as f64;
        let mut xhat = vx.clone();
        let mut inv_std = Array1::zeros(vx.nrows());
        for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / m;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            *is = 1.0 / (var + LN_EPS).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention applied independently within
    /// each segment of rows. Head `h` uses columns `[h·d_h, (h+1)·d_h)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Arc<[Segment]>,
    ) -> Result<NodeId, GraphError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.dim() != vk.dim() || vq.dim() != vv.dim() || heads == 0 || vq.ncols() % heads != 0 {
            return Err(GraphError::Shape {
                op: "attention",
                lhs: shape(vq),
                rhs: shape(vk),
            });
        }
        let dh = vq.ncols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros(vq.dim());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments.iter() {
            for h in 0..heads {
                let cols = s![seg.clone(), h * dh..(h + 1) * dh];
                let qs = vq.slice(cols);
                let ks = vk.slice(cols);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
                probs.push(p);
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            ng,
        ))
    }

    /// Mean of the rows of each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: Arc<[Segment]>) -> NodeId {
        let vx = self.value(x);
        let mut out = Array2::zeros((segments.len(), vx.ncols()));
        for (r, seg) in segments.iter().enumerate() {
            let n = seg.len().max(1) as f64;
            let m = vx.slice(s![seg.clone(), ..]).sum_axis(Axis(0)) / n;
            out.row_mut(r).assign(&m);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SegmentMean(x, segments), ng)
    }

    /// Matérn-5/2 Gram matrix of the rows of `z`, with `1 × 1` log
    /// lengthscale and log outputscale.
    pub fn matern_gram(&mut self, z: NodeId, log_ls: NodeId, log_os: NodeId) -> NodeId {
        let vz = self.value(z);
        let ls = self.scalar(log_ls).exp();
        let s2 = (2.0 * self.scalar(log_os)).exp();
        let n = vz.nrows();
        let mut k = Array2::zeros((n, n));
        for i in 0..n {
            k[[i, i]] = s2;
            for j in 0..i {
                let r = distance(vz.row(i), vz.row(j));
                let (kv, _) = matern_terms(r, ls, s2);
                k[[i, j]] = kv;
                k[[j, i]] = kv;
            }
        }
        let ng = self.ng(&[z, log_ls, log_os]);
        self.push(k, Op::MaternGram { z, log_ls, log_os }, ng)
    }

    /// `K + max(exp(2·log_noise), floor)·I`.
    pub fn add_noise(&mut self, k: NodeId, log_noise: NodeId) -> NodeId {
        let variance = (2.0 * self.scalar(log_noise)).exp().max(NOISE_FLOOR);
        let mut out = self.value(k).clone();
        out.diag_mut().mapv_inplace(|d| d + variance);
        let ng = self.ng(&[k, log_noise]);
        self.push(out, Op::AddNoise { k, log_noise, variance }, ng)
    }

    /// Negative log density of `y` under `N(0, K)`:
    /// `½ (yᵀK⁻¹y + log|K| + n log 2π)`, via a jittered Cholesky factor.
    pub fn gaussian_nll(&mut self, k: NodeId, y: &Array1<f64>) -> Result<NodeId, GraphError> {
        let vk = self.value(k);
        if vk.nrows() != y.len() || vk.ncols() != y.len() {
            return Err(GraphError::Shape {
                op: "gaussian_nll",
                lhs: shape(vk),
                rhs: (y.len(), 1),
            });
        }
        let (l, _) = linalg::cholesky_jittered(vk.view()).ok_or(GraphError::NotPositiveDefinite)?;
        let alpha = linalg::cho_solve(l.view(), y.view());
        let n = y.len() as f64;
        let nll = 0.5 * (y.dot(&alpha) + linalg::cho_logdet(l.view()) + n * (2.0 * std::f64::consts::PI).ln());
        let ng = self.ng(&[k]);
        let grad_k = if ng {
            let mut g = linalg::cho_inverse(l.view());
            let a = alpha.view().insert_axis(Axis(1));
            g -= &a.dot(&a.t());
            g
        } else {
            Array2::zeros((0, 0))
        };
        Ok(self.push(Array2::from_elem((1, 1), nll), Op::GaussianNll { k, grad_k }, ng))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.pullback(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn pullback(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |id: NodeId, delta: Array2<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*node.value).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    acc(*p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::GatherRows(src, idx) => {
                let mut d = Array2::zeros(self.value(*src).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(r);
                }
                acc(*src, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].needs_grad {
                    let dxhat = g * self.value(*gamma);
                    let m = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r)).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = is / m * (m * d - sum_d - h * sum_dx);
                        });
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = vq.ncols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(vq.dim());
                let mut dk = Array2::zeros(vk.dim());
                let mut dv = Array2::zeros(vv.dim());
                let mut pi = 0;
                for seg in segments.iter() {
                    for h in 0..*heads {
                        let cols = s![seg.clone(), h * dh..(h + 1) * dh];
                        let p = &probs[pi];
                        pi += 1;
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        // softmax pullback, row-wise
                        let mut ds = dp;
                        for (mut drow, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot = drow.dot(&prow);
                            Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot));
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&vk.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&vq.slice(cols)));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SegmentMean(x, segments) => {
                let mut d = Array2::zeros(self.value(*x).dim());
                for (r, seg) in segments.iter().enumerate() {
                    let n = seg.len().max(1) as f64;
                    let row = g.row(r).mapv(|v| v / n);
                    for t in seg.clone() {
                        d.row_mut(t).assign(&row);
                    }
                }
                acc(*x, d);
            }
            Op::MaternGram { z, log_ls, log_os } => {
                let vz = self.value(*z);
                let ls = self.scalar(*log_ls).exp();
                let s2 = (2.0 * self.scalar(*log_os)).exp();
                let n = vz.nrows();
                let mut dz = Array2::zeros(vz.dim());
                let mut d_ls = 0.0;
                let mut d_os = 0.0;
                for i in 0..n {
                    d_os += g[[i, i]] * 2.0 * s2;
                    for j in 0..i {
                        let gij = g[[i, j]] + g[[j, i]];
                        if gij == 0.0 {
                            continue;
                        }
                        let r = distance(vz.row(i), vz.row(j));
                        let (kv, coef) = matern_terms(r, ls, s2);
                        d_os += gij * 2.0 * kv;
                        let u = 5f64.sqrt() * r / ls;
                        d_ls += gij * s2 * u * u * (1.0 + u) / 3.0 * (-u).exp();
                        let w = gij * coef;
                        for c in 0..vz.ncols() {
                            let diff = vz[[i, c]] - vz[[j, c]];
                            dz[[i, c]] += w * diff;
                            dz[[j, c]] -= w * diff;
                        }
                    }
                }
                acc(*z, dz);
                acc(*log_ls, Array2::from_elem((1, 1), d_ls));
                acc(*log_os, Array2::from_elem((1, 1), d_os));
            }
            Op::AddNoise { k, log_noise, variance } => {
                acc(*k, g.clone());
                let floored = (2.0 * self.scalar(*log_noise)).exp() < NOISE_FLOOR;
                let d = if floored { 0.0 } else { g.diag().sum() * 2.0 * variance };
                acc(*log_noise, Array2::from_elem((1, 1), d));
            }
            Op::GaussianNll { k, grad_k } => acc(*k, grad_k * (0.5 * g[[0, 0]])),
        }
    }
}

fn distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Matérn-5/2 covariance between two points.
pub fn matern52(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>, log_ls: f64, log_os: f64) -> f64 {
    matern_terms(distance(a, b), log_ls.exp(), (2.0 * log_os).exp()).0
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(input) for every entry of `input`.
    fn check(input: Array2<f64>, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut g = Graph::new();
        let x = g.param(Arc::new(input.clone()));
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads
            .get(x)
            .map(|a| a.as_standard_layout().to_owned())
            .unwrap_or_else(|| Array2::zeros(input.dim()));
        let h = 1e-6;
        for idx in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let x = g.param(Arc::new(p));
                let l = build(&mut g, x);
                g.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                "entry {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 5, 2);
        check(rand_mat(&mut rng, 3, 5), |g, x| {
            let gamma = g.constant(array![[1.0, 0.5, 2.0, -1.0, 0.3]]);
            let beta = g.constant(array![[0.1, 0.0, -0.2, 0.3, 0.0]]);
            let y = g.layer_norm(x, gamma, beta);
            let c = g.constant(w.clone());
            let t = g.matmul(y, c).unwrap();
            let t = g.relu(t);
            g.sum(t)
        });
    }

    #[test]
    fn attention_gradient_through_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_mat(&mut rng, 4, 4);
        let segs: Arc<[Segment]> = vec![0..2, 2..5].into();
        check(rand_mat(&mut rng, 5, 4), |g, x| {
            let wq = g.constant(w.clone());
            let q = g.matmul(x, wq).unwrap();
            let k = g.scale(x, 0.7);
            let a = g.attention(q, k, x, 2, segs.clone()).unwrap();
            let mixed = g.concat_cols(&[a, x]).unwrap();
            let c = g.constant(Array2::from_shape_fn((8, 1), |(i, _)| (i as f64) - 3.5));
            let t = g.matmul(mixed, c).unwrap();
            let t = g.relu(t);
            g.sum(t)
        });
    }

    #[test]
    fn gp_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        check(rand_mat(&mut rng, 4, 3), |g, z| {
            let ls = g.constant(array![[0.2]]);
            let os = g.constant(array![[-0.1]]);
            let nz = g.constant(array![[-1.0]]);
            let k = g.matern_gram(z, ls, os);
            let k = g.add_noise(k, nz);
            g.gaussian_nll(k, &y).unwrap()
        });
        let z = rand_mat(&mut rng, 4, 3);
        check(array![[0.2, -0.1, -1.0]], |g, p| {
            let zc = g.constant(z.clone());
            let ls = g.gather_rows(p, vec![0]);
            let t = g.constant(array![[1.0], [0.0], [0.0]]);
            let ls = g.matmul(ls, t).unwrap();
            let t = g.constant(array![[0.0], [1.0], [0.0]]);
            let os = g.matmul(p, t).unwrap();
            let t = g.constant(array![[0.0], [0.0], [1.0]]);
            let nz = g.matmul(p, t).unwrap();
            let k = g.matern_gram(zc, ls, os);
            let k = g.add_noise(k, nz);
            g.gaussian_nll(k, &y).unwrap()
        });
    }

    #[test]
    fn gather_and_segment_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_mat(&mut rng, 3, 2);
        let segs: Arc<[Segment]> = vec![0..1, 1..4].into();
        check(rand_mat(&mut rng, 3, 3), |g, x| {
            let rows = g.gather_rows(x, vec![2, 0, 2, 1]);
            let extra = g.constant(Array2::ones((1, 3)));
            let all = g.concat_rows(&[rows, extra]).unwrap();
            let all = g.gather_rows(all, vec![4, 0, 1, 2, 3]);
            let m = g.segment_mean(all, segs.clone());
            let c = g.constant(w.clone());
            let t = g.matmul(m, c).unwrap();
            let b = g.constant(array![[0.3, -0.2]]);
            let t = g.add_row(t, b).unwrap();
            let t = g.relu(t);
            g.sum(t)
        });
    }

    #[test]
    fn zero_and_sum_gradients() {
        let mut g = Graph::new();
        let x = g.param(Arc::new(array![[1.0, 2.0], [3.0, 4.0]]));
        let s = g.sum(x);
        let z = g.scale(s, 0.0);
        let grads = g.backward(z);
        assert!(grads.get(x).unwrap().iter().all(|v| *v == 0.0));
        let grads = g.backward(s);
        assert!(grads.get(x).unwrap().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn nll_scalar_case() {
        let mut g = Graph::new();
        let k = g.constant(array![[1.0]]);
        let l = g.gaussian_nll(k, &array![0.0]).unwrap();
        assert!((g.scalar(l) - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        assert!(g.matmul(a, b).is_err());
        let r = g.constant(Array2::zeros((2, 3)));
        assert!(g.add_row(a, r).is_err());
        let c = g.constant(Array2::zeros((2, 4)));
        assert!(g.attention(a, b, c, 1, vec![0..2].into()).is_err());
    }
}
