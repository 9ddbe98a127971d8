//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the tape in exact reverse recording order. Leaves created with
//! `requires_grad = false` (frozen parameters, data) never receive a
//! gradient, and nothing downstream of only-frozen inputs is differentiated.

use std::ops::Range;

use super::tensor::log_sum_exp;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<S>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        heads: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of the leaves that required them, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Vars that received a gradient, in recording order.
    pub fn vars(&self) -> Vec<Var> {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| Var(i))
            .collect()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[var.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape(),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            a_t,
            self.nodes[b.0].value.data(),
            b_t,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = ta.add(tb)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(gelu_scalar);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    /// RMS normalization over the last dimension followed by an elementwise gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let gt = &self.nodes[gain.0].value;
        let (rows, cols) = xt.dims2()?;
        if gt.len() != cols {
            return Err(Error::shape("rms_norm", xt.shape(), gt.shape()));
        }
        let eps = S::from_f64_lossy(RMS_EPS);
        let n = S::from_usize(cols).unwrap();
        let mut out = xt.clone();
        let mut inv_rms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = out.row_mut(i);
            let ms = row.iter().map(|&v| v * v).sum::<S>() / n;
            let inv = S::one() / (ms + eps).sqrt();
            for (v, &g) in row.iter_mut().zip(gt.data()) {
                *v = *v * inv * g;
            }
            inv_rms.push(inv);
        }
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Softmax of a vector (`axis = 0`) or of a matrix along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.nodes[x.0].value.softmax(axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Rows `ids` of a `rows×cols` table, stacked into `ids.len()×cols`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenId {
                    id,
                    vocab: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.any_grad(&[table]);
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Bidirectional multi-head scaled dot-product attention. Rows of `q`,
    /// `k`, `v` are tokens of several sequences laid end to end; `segments`
    /// gives the row range of each sequence, and tokens attend only within
    /// their own segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
    ) -> Result<Var> {
        let (qt, kt, vt) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (rows, d) = qt.dims2()?;
        if kt.shape() != qt.shape() || vt.shape() != qt.shape() {
            return Err(Error::shape("attention", qt.shape(), kt.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden size {d} not divisible by {heads} heads"
            )));
        }
        let mut covered = 0;
        for seg in segments {
            if seg.start != covered || seg.end > rows || seg.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "attention segments must tile 0..{rows} contiguously, got {seg:?}"
                )));
            }
            covered = seg.end;
        }
        if covered != rows {
            return Err(Error::InvalidArgument(format!(
                "attention segments cover {covered} of {rows} rows"
            )));
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut out = vec![S::zero(); rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len() * s.len()).sum::<usize>() * heads);
        let mut row = Vec::new();
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    row.clear();
                    for j in 0..len {
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        row.push(dot(qi, kj) * scale);
                    }
                    super::tensor::softmax_in_place(&mut row);
                    let oi = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d + off..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over the rows selected by `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lt = &self.nodes[logits.0].value;
        let (rows, vocab) = lt.dims2()?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("cross_entropy", lt.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy mask selects no positions"));
        }
        let mut probs = Vec::with_capacity(count * vocab);
        let mut total = S::zero();
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::TokenId {
                    id: targets[i],
                    vocab,
                });
            }
            let row = lt.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let loss = total / S::from_usize(count).unwrap();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ x ∘ w` with constant weights; reduces any tensor to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<S>) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        if xt.len() != weights.len() {
            return Err(Error::shape("weighted_sum", xt.shape(), weights.shape()));
        }
        let s: S = xt.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].requires_grad => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<S>>], var: Var) -> Option<&'a mut Vec<S>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                if let Some(ga) = self.grad_slot(grads, a) {
                    if a_t {
                        S::gemm(k, n, m, bd, b_t, g, true, ga, true);
                    } else {
                        S::gemm(m, n, k, g, false, bd, !b_t, ga, true);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    if b_t {
                        S::gemm(n, m, k, g, true, ad, a_t, gb, true);
                    } else {
                        S::gemm(k, m, n, ad, !a_t, g, false, gb, true);
                    }
                }
            }
            &Op::Add { a, b } => {
                for var in [a, b] {
                    if let Some(ga) = self.grad_slot(grads, var) {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let xd = self.nodes[x.0].value.data();
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((o, &xv), &gv) in gx.iter_mut().zip(xd).zip(g) {
                        *o += gv * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xt = &self.nodes[x.0].value;
                let gd = self.nodes[gain.0].value.data();
                let cols = gd.len();
                let rows = inv_rms.len();
                let n = S::from_usize(cols).unwrap();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..rows {
                        let xr = xt.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let inv = inv_rms[i];
                        let dot: S = (0..cols).map(|j| gr[j] * gd[j] * xr[j]).sum();
                        let coef = dot * inv * inv * inv / n;
                        let out = &mut gx[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            out[j] += gr[j] * gd[j] * inv - xr[j] * coef;
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for i in 0..rows {
                        let xr = xt.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gg[j] += gr[j] * xr[j] * inv_rms[i];
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = &node.value;
                let lanes = lanes(y.shape(), axis);
                if let Some(gx) = self.grad_slot(grads, x) {
                    let yd = y.data();
                    for (start, stride, len) in lanes {
                        let idx = |t: usize| start + t * stride;
                        let s: S = (0..len).map(|t| g[idx(t)] * yd[idx(t)]).sum();
                        for t in 0..len {
                            gx[idx(t)] += yd[idx(t)] * (g[idx(t)] - s);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = *self.nodes[table.0].value.shape().last().unwrap();
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * cols..(id + 1) * cols];
                        for (o, &v) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, segments, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let vocab = *self.nodes[logits.0].value.shape().last().unwrap();
                let count = mask.iter().filter(|&&m| m).count();
                let scale = g[0] / S::from_usize(count).unwrap();
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let mut p = 0;
                    for (i, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let pr = &probs[p * vocab..(p + 1) * vocab];
                        let out = &mut gl[i * vocab..(i + 1) * vocab];
                        for (o, &pv) in out.iter_mut().zip(pr) {
                            *o += pv * scale;
                        }
                        out[targets[i]] -= scale;
                        p += 1;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, &w) in gx.iter_mut().zip(weights) {
                        *o += w * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let qt = &self.nodes[q.0].value;
        let (rows, d) = qt.dims2().expect("attention input is a matrix");
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            qt.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![S::zero(); rows * d];
        let mut dk = vec![S::zero(); rows * d];
        let mut dv = vec![S::zero(); rows * d];
        let mut dp = Vec::new();
        let mut p_off = 0;
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let p = &probs[p_off..p_off + len];
                    p_off += len;
                    let gi = &g[(seg.start + i) * d + off..][..dh];
                    dp.clear();
                    for j in 0..len {
                        let vj = &vd[(seg.start + j) * d + off..][..dh];
                        dp.push(dot(gi, vj));
                        let dvj = &mut dv[(seg.start + j) * d + off..][..dh];
                        for (o, &gv) in dvj.iter_mut().zip(gi) {
                            *o += p[j] * gv;
                        }
                    }
                    let s: S = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let qi_row = (seg.start + i) * d + off;
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let kj_row = (seg.start + j) * d + off;
                        for t in 0..dh {
                            dq[qi_row + t] += ds * kd[kj_row + t];
                            dk[kj_row + t] += ds * qd[qi_row + t];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                for (o, x) in slot.iter_mut().zip(local) {
                    *o += x;
                }
            }
        }
    }
}

/// `(start, stride, len)` of every softmax lane.
fn lanes(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match (shape, axis) {
        ([n], 0) => vec![(0, 1, *n)],
        ([r, c], 1) => (0..*r).map(|i| (i * c, 1, *c)).collect(),
        ([r, c], 0) => (0..*c).map(|j| (j, *c, *r)).collect(),
        _ => Vec::new(),
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}
