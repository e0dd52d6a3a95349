//! Minimal reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients for
//! every leaf that was inserted with `needs_grad = true`. Nodes whose value
//! cannot influence any differentiable leaf are skipped entirely, so frozen
//! parameters and detached inputs cost nothing on the backward pass.
//!
//! The op set is exactly what the models here need: affine maps, row
//! broadcasts, row softmax, layer norm, GELU, row/column slicing and
//! concatenation, and (weighted) mean-squared-error reductions to scalars.
//! Gradients are plain analytic formulas; the finite-difference suite in
//! [`crate::evalkit`] is the oracle that keeps them honest.

use crate::tensor::Tensor;
use std::sync::Arc;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `a` plus a `1 x n` row broadcast over every row of `a`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    /// `a @ b^T` without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    /// Arbitrary row selection; rows may repeat.
    GatherRows { x: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Mean over all elements of `(a - b)^2`; scalar output.
    Mse(NodeId, NodeId),
    /// `sum_i w_i (a_i - b_i)^2 / denom`; scalar output.
    WeightedMse { a: NodeId, b: NodeId, weights: Arc<Vec<f64>>, denom: f64 },
    Detach,
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id after one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or an all-zero tensor when no path reached it.
    pub fn wrt_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::from_vec(1, 1, vec![v]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let mut v = self.value(a).clone();
        v.axpy_in_place(-1.0, self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row broadcast shape");
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for out_row in 0..v.rows() {
            for (o, &rv) in v.row_mut(out_row).iter_mut().zip(&r) {
                *o += rv;
            }
        }
        let g = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), v, g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(s);
        let g = self.ng(a);
        self.push(Op::Scale(a, s), v, g)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x += c;
        }
        let g = self.ng(a);
        self.push(Op::AddConst(a), v, g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMulNT(a, b), v, g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let g = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.value(x).shape();
        assert_eq!(self.value(gain).shape(), (1, n), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, n), "layer_norm bias shape");
        let mut v = Tensor::zeros(m, n);
        for r in 0..m {
            let xr = self.value(x).row(r);
            let (mu, rstd) = row_moments(xr);
            let gr = self.value(gain).data();
            let br = self.value(bias).data();
            for c in 0..n {
                v.set(r, c, gr[c] * (xr[c] - mu) * rstd + br[c]);
            }
        }
        let g = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Op::LayerNorm { x, gain, bias }, v, g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = gelu(*x);
        }
        let g = self.ng(a);
        self.push(Op::Gelu(a), v, g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(x).shape();
        assert!(start + len <= m, "slice_rows out of range");
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let g = self.ng(x);
        self.push(Op::SliceRows { x, start }, Tensor::from_vec(len, n, data), g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(x).shape();
        assert!(start + len <= n, "slice_cols out of range");
        let mut v = Tensor::zeros(m, len);
        for r in 0..m {
            let src = &self.value(x).row(r)[start..start + len];
            v.row_mut(r).copy_from_slice(src);
        }
        let g = self.ng(x);
        self.push(Op::SliceCols { x, start }, v, g)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let (m, n) = self.value(x).shape();
        let mut v = Tensor::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < m, "gather_rows index out of range");
            let src = self.value(x).row(i).to_vec();
            v.row_mut(r).copy_from_slice(&src);
        }
        let g = self.ng(x);
        self.push(Op::GatherRows { x, idx: idx.to_vec() }, v, g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut g = false;
        for &p in parts {
            assert_eq!(self.value(p).cols(), n, "concat_rows width");
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
            g |= self.ng(p);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, n, data), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(m, total);
        let mut g = false;
        let mut off = 0;
        for &p in parts {
            assert_eq!(self.value(p).rows(), m, "concat_cols height");
            let w = self.value(p).cols();
            for r in 0..m {
                let src = self.value(p).row(r).to_vec();
                v.row_mut(r)[off..off + w].copy_from_slice(&src);
            }
            off += w;
            g |= self.ng(p);
        }
        self.push(Op::ConcatCols(parts.to_vec()), v, g)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mse shape");
        let n = self.value(a).len() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mse(a, b), Tensor::from_vec(1, 1, vec![sum / n]), g)
    }

    /// Weighted squared-error sum divided by a fixed denominator. Used for
    /// masked losses where only a subset of entries counts.
    pub fn weighted_mse(&mut self, a: NodeId, b: NodeId, weights: Arc<Vec<f64>>, denom: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "weighted_mse shape");
        assert_eq!(self.value(a).len(), weights.len(), "weighted_mse weights");
        assert!(denom > 0.0, "weighted_mse denom");
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .zip(weights.iter())
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum();
        let g = self.ng(a) || self.ng(b);
        self.push(
            Op::WeightedMse { a, b, weights, denom },
            Tensor::from_vec(1, 1, vec![sum / denom]),
            g,
        )
    }

    /// Copies the value and blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::Detach, v, false)
    }

    /// Reverse pass from a scalar node. Returns gradients for every
    /// grad-requiring node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss].needs_grad {
            grads[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        }
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| {
            match &mut grads[target] {
                Some(acc) => acc.add_in_place(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    add(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    let mut d = g.clone();
                    d.scale_in_place(-1.0);
                    add(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    add(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    let n = g.cols();
                    let mut d = Tensor::zeros(1, n);
                    for r in 0..g.rows() {
                        for (acc, &gv) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    add(grads, *row, d);
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    d.scale_in_place(*s);
                    add(grads, *a, d);
                }
            }
            Op::AddConst(a) => {
                if self.ng(*a) {
                    add(grads, *a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    add(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    add(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a @ b^T  =>  da = g @ b ; db = g^T @ a
                if self.ng(*a) {
                    add(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    add(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[id].value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for (c, out) in d.row_mut(r).iter_mut().enumerate() {
                            *out = yr[c] * (gr[c] - s);
                        }
                    }
                    add(grads, *a, d);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = self.value(*x).shape();
                let gdata = self.value(*gain).data();
                let mut dx = if self.ng(*x) { Some(Tensor::zeros(m, n)) } else { None };
                let mut dgain = if self.ng(*gain) { Some(Tensor::zeros(1, n)) } else { None };
                let mut dbias = if self.ng(*bias) { Some(Tensor::zeros(1, n)) } else { None };
                for r in 0..m {
                    let xr = self.value(*x).row(r);
                    let (mu, rstd) = row_moments(xr);
                    let gr = g.row(r);
                    if let Some(db) = &mut dbias {
                        for (acc, &gv) in db.row_mut(0).iter_mut().zip(gr) {
                            *acc += gv;
                        }
                    }
                    if let Some(dg) = &mut dgain {
                        for c in 0..n {
                            let xhat = (xr[c] - mu) * rstd;
                            dg.row_mut(0)[c] += gr[c] * xhat;
                        }
                    }
                    if let Some(dx) = &mut dx {
                        // dxhat = g * gain; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..n {
                            let dxh = gr[c] * gdata[c];
                            let xhat = (xr[c] - mu) * rstd;
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat;
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for c in 0..n {
                            let dxh = gr[c] * gdata[c];
                            let xhat = (xr[c] - mu) * rstd;
                            dx.row_mut(r)[c] = rstd * (dxh - mean_dxh - xhat * mean_dxh_xh);
                        }
                    }
                }
                if let Some(d) = dx {
                    add(grads, *x, d);
                }
                if let Some(d) = dgain {
                    add(grads, *gain, d);
                }
                if let Some(d) = dbias {
                    add(grads, *bias, d);
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *dv *= gelu_prime(xv);
                    }
                    add(grads, *a, d);
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let (m, n) = self.value(*x).shape();
                    let mut d = Tensor::zeros(m, n);
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    add(grads, *x, d);
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let (m, n) = self.value(*x).shape();
                    let mut d = Tensor::zeros(m, n);
                    for r in 0..m {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    add(grads, *x, d);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let (m, n) = self.value(*x).shape();
                    let mut d = Tensor::zeros(m, n);
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    add(grads, *x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let n = g.cols();
                        let data = g.data()[off * n..(off + rows) * n].to_vec();
                        add(grads, p, Tensor::from_vec(rows, n, data));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let m = g.rows();
                        let mut d = Tensor::zeros(m, w);
                        for r in 0..m {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        add(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::Mse(a, b) => {
                let gs = g.data()[0];
                let n = self.value(*a).len() as f64;
                let residual: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * gs * (x - y) / n)
                    .collect();
                let (m, c) = self.value(*a).shape();
                if self.ng(*a) {
                    add(grads, *a, Tensor::from_vec(m, c, residual.clone()));
                }
                if self.ng(*b) {
                    let mut d = Tensor::from_vec(m, c, residual);
                    d.scale_in_place(-1.0);
                    add(grads, *b, d);
                }
            }
            Op::WeightedMse { a, b, weights, denom } => {
                let gs = g.data()[0];
                let residual: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .zip(weights.iter())
                    .map(|((x, y), w)| 2.0 * gs * w * (x - y) / denom)
                    .collect();
                let (m, c) = self.value(*a).shape();
                if self.ng(*a) {
                    add(grads, *a, Tensor::from_vec(m, c, residual.clone()));
                }
                if self.ng(*b) {
                    let mut d = Tensor::from_vec(m, c, residual);
                    d.scale_in_place(-1.0);
                    add(grads, *b, d);
                }
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of a scalar function of one leaf tensor.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!(
                (x - y).abs() / denom < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    /// Every op composed into one pipeline, checked against finite differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(4, 6, 0.7, &mut rng);
        let w0 = Tensor::randn(6, 6, 0.5, &mut rng);
        let row0 = Tensor::randn(1, 6, 0.3, &mut rng);
        let gain0 = Tensor::randn(1, 6, 0.2, &mut rng);
        let bias0 = Tensor::randn(1, 6, 0.2, &mut rng);
        let tgt = Tensor::randn(4, 3, 0.5, &mut rng);
        let wts: Vec<f64> = (0..6).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();

        let run = |x: &Tensor, w: &Tensor, row: &Tensor, gain: &Tensor, bias: &Tensor| -> (Tape, NodeId, [NodeId; 5]) {
            let mut t = Tape::new();
            let xn = t.leaf(x.clone(), true);
            let wn = t.leaf(w.clone(), true);
            let rn = t.leaf(row.clone(), true);
            let gn = t.leaf(gain.clone(), true);
            let bn = t.leaf(bias.clone(), true);
            let tn = t.constant(tgt.clone());

            let h = t.matmul(xn, wn);
            let h = t.add_row(h, rn);
            let h = t.layer_norm(h, gn, bn);
            let h = t.gelu(h);
            let att = t.matmul_nt(h, h);
            let att = t.scale(att, 0.5);
            let att = t.softmax_rows(att);
            let mix = t.matmul(att, h);
            let a = t.slice_cols(mix, 0, 3);
            let b = t.slice_cols(mix, 3, 3);
            let s = t.add(a, b);
            let top = t.slice_rows(s, 0, 2);
            let bot = t.slice_rows(s, 2, 2);
            let joined = t.concat_rows(&[top, bot]);
            let l1 = t.mse(joined, tn);
            let half = t.slice_rows(joined, 1, 2);
            let htgt = t.constant(Tensor::zeros(2, 3));
            let wetches = Arc::new(wts.clone());
            let l2 = t.weighted_mse(half, htgt, wetches, 5.0);
            let l2 = t.scale(l2, 0.25);
            let loss = t.add(l1, l2);
            let loss = t.add_const(loss, 0.125);
            (t, loss, [xn, wn, rn, gn, bn])
        };

        let (mut tape, loss, ids) = run(&x0, &w0, &row0, &gain0, &bias0);
        let grads = tape.backward(loss);

        let h = 1e-6;
        let fx = fd_grad(&|v| { let (t, l, _) = run(v, &w0, &row0, &gain0, &bias0); t.scalar(l) }, &x0, h);
        let fw = fd_grad(&|v| { let (t, l, _) = run(&x0, v, &row0, &gain0, &bias0); t.scalar(l) }, &w0, h);
        let fr = fd_grad(&|v| { let (t, l, _) = run(&x0, &w0, v, &gain0, &bias0); t.scalar(l) }, &row0, h);
        let fg = fd_grad(&|v| { let (t, l, _) = run(&x0, &w0, &row0, v, &bias0); t.scalar(l) }, &gain0, h);
        let fb = fd_grad(&|v| { let (t, l, _) = run(&x0, &w0, &row0, &gain0, v); t.scalar(l) }, &bias0, h);

        assert_close(grads.wrt(ids[0]).unwrap(), &fx, 1e-5);
        assert_close(grads.wrt(ids[1]).unwrap(), &fw, 1e-5);
        assert_close(grads.wrt(ids[2]).unwrap(), &fr, 1e-5);
        assert_close(grads.wrt(ids[3]).unwrap(), &fg, 1e-5);
        assert_close(grads.wrt(ids[4]).unwrap(), &fb, 1e-5);
    }

    #[test]
    fn gather_rows_gradient_scatter_adds_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::randn(4, 3, 1.0, &mut rng);
        let tgt = Tensor::randn(3, 3, 1.0, &mut rng);
        let idx = [2usize, 0, 2]; // row 2 used twice
        let run = |x: &Tensor| -> (Tape, NodeId, NodeId) {
            let mut t = Tape::new();
            let xn = t.leaf(x.clone(), true);
            let g = t.gather_rows(xn, &idx);
            let tn = t.constant(tgt.clone());
            let l = t.mse(g, tn);
            (t, l, xn)
        };
        let (mut tape, loss, xn) = run(&x0);
        let grads = tape.backward(loss);
        let fd = fd_grad(&|v| { let (t, l, _) = run(v); t.scalar(l) }, &x0, 1e-6);
        assert_close(grads.wrt(xn).unwrap(), &fd, 1e-6);
        // Row 1 is never gathered: its gradient must be exactly zero.
        for c in 0..3 {
            assert_eq!(grads.wrt(xn).unwrap().get(1, c), 0.0);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(2, 2, 1.0, &mut rng);
        let mut t = Tape::new();
        let xn = t.leaf(x, true);
        let d = t.detach(xn);
        let z = t.constant(Tensor::zeros(2, 2));
        let loss = t.mse(d, z);
        let grads = t.backward(loss);
        assert!(grads.wrt(xn).is_none());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_but_flows_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(2, 3, 1.0, &mut rng);
        let w = Tensor::randn(3, 3, 1.0, &mut rng);
        let mut t = Tape::new();
        let xn = t.leaf(x, true);
        let wn = t.leaf(w, false); // frozen
        let y = t.matmul(xn, wn);
        let z = t.constant(Tensor::zeros(2, 3));
        let loss = t.mse(y, z);
        let grads = t.backward(loss);
        assert!(grads.wrt(wn).is_none());
        assert!(grads.wrt(xn).is_some());
    }

    #[test]
    fn sub_and_scale_gradients() {
        let a0 = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let b0 = Tensor::from_vec(1, 2, vec![0.5, -1.0]);
        let mut t = Tape::new();
        let a = t.leaf(a0, true);
        let b = t.leaf(b0, true);
        let d = t.sub(a, b);
        let d = t.scale(d, 3.0);
        let z = t.constant(Tensor::zeros(1, 2));
        let loss = t.mse(d, z);
        // loss = mean(9 (a-b)^2) => d/da = 9 (a-b), d/db = -9 (a-b)
        let grads = t.backward(loss);
        let ga = grads.wrt(a).unwrap();
        assert!((ga.get(0, 0) - 9.0 * 0.5).abs() < 1e-12);
        assert!((ga.get(0, 1) - 9.0 * 3.0).abs() < 1e-12);
        let gb = grads.wrt(b).unwrap();
        assert!((gb.get(0, 0) + 9.0 * 0.5).abs() < 1e-12);
    }
}
