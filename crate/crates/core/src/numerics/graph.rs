//! Reverse-mode tape over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into the leaves.
//! Kernels are deterministic for a fixed input regardless of thread count:
//! parallel work is always partitioned over disjoint output regions whose
//! per-element accumulation order is fixed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{broadcast_strides, strides, Tensor};
use super::{broadcast_shapes, real, Real};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Post-softmax attention weights captured for diagnostics.
///
/// `weights` has shape (groups, queries, keys) where a group is one
/// (batch element, head) pair; `heads` records how many heads each batch
/// element contributed so group -> head is `group % heads`.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub weights: Tensor<f64>,
    pub layer_index: usize,
    pub heads: usize,
    pub keys: usize,
}

impl AttentionMap {
    /// Validates the probability-row invariants (rows sum to 1 within 1e-6,
    /// entries within [0, 1]).
    pub fn validate(&self) -> Result<()> {
        let k = self.keys;
        for (r, row) in self.weights.data().chunks(k).enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(Error::contract(format!(
                        "attention weight {p} outside [0,1] in row {r}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "attention row {r} sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        Ok(())
    }
}

enum Op<F: Real> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// y = mul * x + add, scalars; only `mul` matters for the backward pass.
    Affine {
        x: ValueId,
        mul: F,
    },
    /// y = alpha * (a @ b), batched with broadcast on leading dims.
    Matmul {
        a: ValueId,
        b: ValueId,
        alpha: F,
    },
    Softmax {
        x: ValueId,
        axis: usize,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    Gelu(ValueId),
    Sigmoid(ValueId),
    Dropout {
        x: ValueId,
        mask: Tensor<F>,
    },
    Permute {
        x: ValueId,
        perm: Vec<usize>,
    },
    Reshape(ValueId),
    Narrow {
        x: ValueId,
        axis: usize,
        start: usize,
    },
    Concat {
        a: ValueId,
        b: ValueId,
        axis: usize,
    },
    MeanAll(ValueId),
}

struct Node<F: Real> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Reverse-mode tape. One graph lives for one forward/backward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: Vec<(usize, ValueId)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> ValueId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf registered under a parameter slot, so the
    /// optimizer can look its gradient up after backward.
    pub fn param(&mut self, slot: usize, value: Tensor<F>) -> ValueId {
        let id = self.leaf(value, true);
        self.params.push((slot, id));
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> Option<&Tensor<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// (slot, gradient) pairs recorded via [`Graph::param`]. Parameters that
    /// never received gradient yield `None`.
    pub fn param_grads(&self) -> Vec<(usize, Option<&Tensor<F>>)> {
        self.params
            .iter()
            .map(|&(slot, id)| (slot, self.nodes[id.0].grad.as_ref()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- elementwise binary ops -------------------------------------------------

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = bc_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = bc_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = bc_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// y = mul * x + add with scalar coefficients.
    pub fn affine(&mut self, x: ValueId, mul: F, add: F) -> ValueId {
        let v = self.value(x).map(|e| mul * e + add);
        let ng = self.needs(x);
        self.push(v, Op::Affine { x, mul }, ng)
    }

    pub fn neg(&mut self, x: ValueId) -> ValueId {
        self.affine(x, -F::one(), F::zero())
    }

    // ---- matmul -----------------------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.matmul_scaled(a, b, F::one())
    }

    /// alpha * (a @ b). Folding the scale into the product avoids storing a
    /// separate scaled copy of attention scores.
    pub fn matmul_scaled(&mut self, a: ValueId, b: ValueId, alpha: F) -> Result<ValueId> {
        let v = matmul_forward(self.value(a), self.value(b), alpha)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul { a, b, alpha }, ng))
    }

    // ---- activations / normalizations --------------------------------------------

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let v = softmax_forward(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization over the last axis with learned scale/shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "scale/shift shapes {:?}/{:?} do not match feature size {n}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.len() / n;
        let epsf = real::<F>(eps);
        let mut xhat = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(xv.shape());
        let inv_n = F::one() / real::<F>(n as f64);
        for r in 0..rows {
            let xs = &xv.data()[r * n..(r + 1) * n];
            let mut mean = F::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_n;
            let mut var = F::zero();
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let istd = F::one() / (var + epsf).sqrt();
            inv_std.push(istd);
            let xh = &mut xhat.data_mut()[r * n..(r + 1) * n];
            let ys = &mut out.data_mut()[r * n..(r + 1) * n];
            for j in 0..n {
                let h = (xs[j] - mean) * istd;
                xh[j] = h;
                ys[j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(gelu_scalar);
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Inverted dropout. Identity when `p == 0` or no generator is supplied
    /// (evaluation mode).
    pub fn dropout(&mut self, x: ValueId, p: f64, rng: Option<&mut ChaCha8Rng>) -> ValueId {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return x,
        };
        let keep = 1.0 - p;
        let scale = real::<F>(1.0 / keep);
        let mask = Tensor::from_fn(self.value(x).shape(), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        let v = bc_zip(self.value(x), &mask, "dropout", |a, m| a * m).expect("same shape");
        let ng = self.needs(x);
        self.push(v, Op::Dropout { x, mask }, ng)
    }

    // ---- shape ops ---------------------------------------------------------------

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        let v = permute_forward(self.value(x), perm)?;
        let ng = self.needs(x);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: ValueId) -> Result<ValueId> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::dim("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!(
                    "slice [{start}, {}) on axis {axis} of shape {:?}",
                    start + len,
                    xv.shape()
                ),
            ));
        }
        let (outer, axis_dim, inner) = split3(xv.shape(), axis);
        let mut oshape = xv.shape().to_vec();
        oshape[axis] = len;
        let mut out = Tensor::zeros(&oshape);
        for o in 0..outer {
            let src = &xv.data()[(o * axis_dim + start) * inner..(o * axis_dim + start + len) * inner];
            let dst = &mut out.data_mut()[o * len * inner..(o + 1) * len * inner];
            dst.copy_from_slice(src);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, ng))
    }

    pub fn concat(&mut self, a: ValueId, b: ValueId, axis: usize) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != bv.rank() || axis >= av.rank() {
            return Err(Error::dim(
                "concat",
                format!("shapes {:?} / {:?} on axis {axis}", av.shape(), bv.shape()),
            ));
        }
        for d in 0..av.rank() {
            if d != axis && av.shape()[d] != bv.shape()[d] {
                return Err(Error::dim(
                    "concat",
                    format!("shapes {:?} / {:?} differ off-axis", av.shape(), bv.shape()),
                ));
            }
        }
        let (outer, da, inner) = split3(av.shape(), axis);
        let db = bv.shape()[axis];
        let mut oshape = av.shape().to_vec();
        oshape[axis] = da + db;
        let mut out = Tensor::zeros(&oshape);
        for o in 0..outer {
            let dst = &mut out.data_mut()[o * (da + db) * inner..(o + 1) * (da + db) * inner];
            dst[..da * inner].copy_from_slice(&av.data()[o * da * inner..(o + 1) * da * inner]);
            dst[da * inner..].copy_from_slice(&bv.data()[o * db * inner..(o + 1) * db * inner]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b, axis }, ng))
    }

    // ---- reductions ---------------------------------------------------------------

    /// Mean over every element; returns a scalar (shape [1]).
    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let mut s = F::zero();
        for &v in xv.data() {
            s += v;
        }
        let v = Tensor::scalar(s / real::<F>(xv.len() as f64));
        let ng = self.needs(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Mean squared error between a prediction node and a constant target.
    pub fn mse_loss(&mut self, pred: ValueId, target: &Tensor<F>) -> Result<ValueId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::dim(
                "mse_loss",
                format!(
                    "prediction {:?} vs target {:?}",
                    self.value(pred).shape(),
                    target.shape()
                ),
            ));
        }
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ---- attention ------------------------------------------------------------------

    /// softmax(q kᵀ / sqrt(d) + mask) v.
    ///
    /// `q`: (..., Lq, d), `k`: (..., Lk, d), `v`: (..., Lk, dv). The optional
    /// mask broadcasts over the score shape (..., Lq, Lk). With
    /// `record = true` the post-softmax weights are captured as an
    /// [`AttentionMap`] with one group per flattened leading index.
    pub fn scaled_dot_attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        mask: Option<ValueId>,
        record: bool,
    ) -> Result<(ValueId, Option<AttentionMap>)> {
        let (qs, ks) = (self.value(q).shape(), self.value(k).shape());
        if qs.is_empty() || ks.is_empty() || qs[qs.len() - 1] != ks[ks.len() - 1] {
            return Err(Error::dim(
                "scaled_dot_attention",
                format!("head dimension mismatch: q {qs:?} vs k {ks:?}"),
            ));
        }
        let d = qs[qs.len() - 1];
        let alpha = real::<F>(1.0 / (d as f64).sqrt());
        let kt = self.transpose_last(k)?;
        let mut scores = self.matmul_scaled(q, kt, alpha)?;
        if let Some(m) = mask {
            scores = self.add(scores, m)?;
        }
        let last = self.value(scores).rank() - 1;
        let probs = self.softmax(scores, last)?;
        let map = if record {
            let pv = self.value(probs);
            let shape = pv.shape();
            let (lq, lk) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let groups = pv.len() / (lq * lk);
            let weights = pv.cast::<f64>().reshaped(&[groups, lq, lk])?;
            Some(AttentionMap {
                weights,
                layer_index: 0,
                heads: 1,
                keys: lk,
            })
        } else {
            None
        };
        let out = self.matmul(probs, v)?;
        Ok((out, map))
    }

    // ---- backward --------------------------------------------------------------------

    /// Accumulates gradients of a scalar output into every differentiable node.
    pub fn backward(&mut self, output: ValueId) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let seed = Tensor::new(self.value(output).shape(), vec![F::one()])?;
        self.nodes[output.0].grad = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, delta: Tensor<F>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.axpy(F::one(), &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<F>) -> Result<()> {
        // Ops are matched by moving cheap context out; tensors stay borrowed.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to(g, self.value(a).shape());
                let gb = reduce_to(g, self.value(b).shape());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to(g, self.value(a).shape());
                let mut gb = reduce_to(g, self.value(b).shape());
                for v in gb.data_mut() {
                    *v = -*v;
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga_full = bc_zip(g, self.value(b), "mul_bwd", |x, y| x * y)?;
                let gb_full = bc_zip(g, self.value(a), "mul_bwd", |x, y| x * y)?;
                let ga = reduce_to(&ga_full, self.value(a).shape());
                let gb = reduce_to(&gb_full, self.value(b).shape());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Affine { x, mul } => {
                let (x, mul) = (*x, *mul);
                let mut gx = g.clone();
                for v in gx.data_mut() {
                    *v *= mul;
                }
                self.accumulate(x, gx);
            }
            Op::Matmul { a, b, alpha } => {
                let (a, b, alpha) = (*a, *b, *alpha);
                let (ga, gb) = matmul_backward(self.value(a), self.value(b), g, alpha)?;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = &self.nodes[idx].value;
                let gx = softmax_backward(y, g, axis);
                self.accumulate(x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = *xhat.shape().last().unwrap();
                let rows = xhat.len() / n;
                let gv = self.value(gamma).data().to_vec();
                let mut dgamma = Tensor::zeros(&[n]);
                let mut dbeta = Tensor::zeros(&[n]);
                let mut dx = Tensor::zeros(xhat.shape());
                let inv_n = F::one() / real::<F>(n as f64);
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xh = &xhat.data()[r * n..(r + 1) * n];
                    let istd = inv_std[r];
                    let mut m1 = F::zero(); // mean of dxhat
                    let mut m2 = F::zero(); // mean of dxhat ⊙ xhat
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        dgamma.data_mut()[j] += gr[j] * xh[j];
                        dbeta.data_mut()[j] += gr[j];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    let dxr = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        dxr[j] = istd * (dxh - m1 - xh[j] * m2);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Gelu(x) => {
                let x = *x;
                let xv = self.value(x);
                let gx = Tensor::new(
                    xv.shape(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| gi * gelu_grad_scalar(xi))
                        .collect(),
                )?;
                self.accumulate(x, gx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = &self.nodes[idx].value;
                let gx = Tensor::new(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yi, &gi)| gi * yi * (F::one() - yi))
                        .collect(),
                )?;
                self.accumulate(x, gx);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let gx = bc_zip(g, mask, "dropout_bwd", |a, m| a * m)?;
                self.accumulate(x, gx);
            }
            Op::Permute { x, perm } => {
                let (x, perm) = (*x, perm.clone());
                let inv = invert_perm(&perm);
                let gx = permute_forward(g, &inv)?;
                self.accumulate(x, gx);
            }
            Op::Reshape(x) => {
                let x = *x;
                let gx = g.reshaped(self.value(x).shape())?;
                self.accumulate(x, gx);
            }
            Op::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let xshape = self.value(x).shape().to_vec();
                let (outer, axis_dim, inner) = split3(&xshape, axis);
                let len = g.shape()[axis];
                let mut gx = Tensor::zeros(&xshape);
                for o in 0..outer {
                    let dst = &mut gx.data_mut()
                        [(o * axis_dim + start) * inner..(o * axis_dim + start + len) * inner];
                    dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(x, gx);
            }
            Op::Concat { a, b, axis } => {
                let (a, b, axis) = (*a, *b, *axis);
                let (outer, da, inner) = split3(self.value(a).shape(), axis);
                let db = self.value(b).shape()[axis];
                let mut ga = Tensor::zeros(self.value(a).shape());
                let mut gb = Tensor::zeros(self.value(b).shape());
                for o in 0..outer {
                    let src = &g.data()[o * (da + db) * inner..(o + 1) * (da + db) * inner];
                    ga.data_mut()[o * da * inner..(o + 1) * da * inner]
                        .copy_from_slice(&src[..da * inner]);
                    gb.data_mut()[o * db * inner..(o + 1) * db * inner]
                        .copy_from_slice(&src[da * inner..]);
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.value(x).len();
                let gi = g.data()[0] / real::<F>(n as f64);
                let gx = Tensor::full(self.value(x).shape(), gi);
                self.accumulate(x, gx);
            }
        }
        Ok(())
    }
}

// ---- scalar kernels ---------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<F: Real>(x: F) -> F {
    let c = real::<F>(GELU_C);
    let a = real::<F>(GELU_A);
    let half = real::<F>(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = real::<F>(GELU_C);
    let a = real::<F>(GELU_A);
    let half = real::<F>(0.5);
    let three = real::<F>(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

// ---- elementwise broadcast machinery -----------------------------------------------

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut s = [1usize; 4];
    for (i, &d) in shape.iter().rev().enumerate() {
        s[3 - i] = d;
    }
    s
}

fn pad4_bstrides(shape: &[usize], target: &[usize; 4]) -> [usize; 4] {
    let full = broadcast_strides(shape, target);
    let mut s = [0usize; 4];
    s.copy_from_slice(&full);
    s
}

fn bc_zip<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    op: &'static str,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let oshape = broadcast_shapes(a.shape(), b.shape()).map_err(|_| {
        Error::dim(
            op,
            format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
        )
    })?;
    let os = pad4(&oshape);
    let sa = pad4_bstrides(a.shape(), &os);
    let sb = pad4_bstrides(b.shape(), &os);
    let n: usize = oshape.iter().product();
    let mut data = Vec::with_capacity(n);
    let (ad, bd) = (a.data(), b.data());
    for i0 in 0..os[0] {
        for i1 in 0..os[1] {
            for i2 in 0..os[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                if sa[3] == 1 && sb[3] == 1 {
                    for i3 in 0..os[3] {
                        data.push(f(ad[ba + i3], bd[bb + i3]));
                    }
                } else {
                    for i3 in 0..os[3] {
                        data.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                    }
                }
            }
        }
    }
    Tensor::new(&oshape, data)
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
fn reduce_to<F: Real>(g: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    if g.shape() == target {
        return g.clone();
    }
    let gs = pad4(g.shape());
    let st = pad4_bstrides(target, &gs);
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    let gd = g.data();
    let mut idx = 0;
    for i0 in 0..gs[0] {
        for i1 in 0..gs[1] {
            for i2 in 0..gs[2] {
                let bt = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..gs[3] {
                    od[bt + i3 * st[3]] += gd[idx];
                    idx += 1;
                }
            }
        }
    }
    out
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_forward<F: Real>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(
            "permute",
            format!("permutation {perm:?} invalid for shape {:?}", x.shape()),
        ));
    }
    let in_strides = strides(x.shape());
    let oshape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let os = pad4(&oshape);
    // stride to read input at each output axis
    let mut rs = [0usize; 4];
    let pad = 4 - r;
    for (i, &p) in perm.iter().enumerate() {
        rs[pad + i] = in_strides[p];
    }
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let xd = x.data();
    for i0 in 0..os[0] {
        for i1 in 0..os[1] {
            for i2 in 0..os[2] {
                let base = i0 * rs[0] + i1 * rs[1] + i2 * rs[2];
                for i3 in 0..os[3] {
                    data.push(xd[base + i3 * rs[3]]);
                }
            }
        }
    }
    Tensor::new(&oshape, data)
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---- softmax ----------------------------------------------------------------------

fn softmax_forward<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    for &v in x.data() {
        if v.is_nan() {
            return Err(Error::numeric("softmax input contains NaN"));
        }
        if v.is_infinite() {
            return Err(Error::numeric("softmax input contains infinity"));
        }
    }
    let (outer, n, inner) = split3(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = xd[base];
            for j in 1..n {
                let v = xd[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for j in 0..n {
                let e = (xd[base + j * inner] - max).exp();
                od[base + j * inner] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for j in 0..n {
                od[base + j * inner] *= inv;
            }
        }
    }
    Ok(out)
}

fn softmax_backward<F: Real>(y: &Tensor<F>, g: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, n, inner) = split3(y.shape(), axis);
    let mut out = Tensor::zeros(y.shape());
    let yd = y.data();
    let gd = g.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = F::zero();
            for j in 0..n {
                dot += yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..n {
                let k = base + j * inner;
                od[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    out
}

// ---- matmul -----------------------------------------------------------------------

/// Rows of C handled per rayon task; chosen for cache-friendly B reuse.
fn row_block(m: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    (m / (threads * 4)).max(8)
}

/// C = alpha * A @ B for row-major 2D slices. Parallel over disjoint row
/// blocks of C; per-row accumulation order is fixed, so results do not
/// depend on the thread count.
fn matmul2d<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    parallel: bool,
) {
    let kernel = |row0: usize, cblk: &mut [F]| {
        for (ri, crow) in cblk.chunks_mut(n).enumerate() {
            let i = row0 + ri;
            let arow = &a[i * k..(i + 1) * k];
            for (p, &ap) in arow.iter().enumerate() {
                let av = alpha * ap;
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    };
    if parallel && m >= 16 {
        let block = row_block(m);
        c.par_chunks_mut(block * n)
            .enumerate()
            .for_each(|(bi, cblk)| kernel(bi * block, cblk));
    } else {
        kernel(0, c);
    }
}

fn transpose2d<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    lead_a: Vec<usize>,
    lead_b: Vec<usize>,
    lead_out: Vec<usize>,
}

fn matmul_dims<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<MatmulDims> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::dim(
            "matmul",
            format!("operands must be rank >= 2, got {sa:?} and {sb:?}"),
        ));
    }
    let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if ka != kb {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions disagree: {sa:?} x {sb:?}"),
        ));
    }
    let lead_a = sa[..sa.len() - 2].to_vec();
    let lead_b = sb[..sb.len() - 2].to_vec();
    let lead_out = broadcast_shapes(&lead_a, &lead_b).map_err(|_| {
        Error::dim(
            "matmul",
            format!("leading dimensions do not broadcast: {sa:?} x {sb:?}"),
        )
    })?;
    Ok(MatmulDims {
        m,
        k: ka,
        n,
        lead_a,
        lead_b,
        lead_out,
    })
}

/// Offsets (in units of one 2D slice) for every flattened leading index of
/// `lead_out`, reading a tensor whose own leading dims are `lead`.
fn lead_offsets(lead: &[usize], lead_out: &[usize]) -> Vec<usize> {
    let total: usize = lead_out.iter().product();
    if lead_out.is_empty() {
        return vec![0];
    }
    let bstr = broadcast_strides(lead, lead_out);
    let ostr = strides(lead_out);
    (0..total)
        .map(|flat| {
            let mut off = 0;
            for d in 0..lead_out.len() {
                let idx = (flat / ostr[d]) % lead_out[d];
                off += idx * bstr[d];
            }
            off
        })
        .collect()
}

fn matmul_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>, alpha: F) -> Result<Tensor<F>> {
    let d = matmul_dims(a, b)?;
    let mut oshape = d.lead_out.clone();
    oshape.push(d.m);
    oshape.push(d.n);
    let batch: usize = d.lead_out.iter().product();
    let mut out = Tensor::zeros(&oshape);

    if d.lead_b.is_empty() {
        // (lead.., m, k) x (k, n): one flat kernel call over all rows.
        let rows = batch * d.m;
        matmul2d(a.data(), b.data(), out.data_mut(), rows, d.k, d.n, alpha, true);
        return Ok(out);
    }
    let offs_a = lead_offsets(&d.lead_a, &d.lead_out);
    let offs_b = lead_offsets(&d.lead_b, &d.lead_out);
    let (sa, sb) = (d.m * d.k, d.k * d.n);
    let so = d.m * d.n;
    let (ad, bd) = (a.data(), b.data());
    out.data_mut()
        .par_chunks_mut(so)
        .enumerate()
        .for_each(|(i, cslice)| {
            let asl = &ad[offs_a[i] * sa..offs_a[i] * sa + sa];
            let bsl = &bd[offs_b[i] * sb..offs_b[i] * sb + sb];
            matmul2d(asl, bsl, cslice, d.m, d.k, d.n, alpha, false);
        });
    Ok(out)
}

fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &Tensor<F>,
    alpha: F,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = matmul_dims(a, b)?;
    let batch: usize = d.lead_out.iter().product();
    let (m, k, n) = (d.m, d.k, d.n);

    if d.lead_b.is_empty() {
        // dA = alpha * g Bᵀ (flat), dB = alpha * Aᵀ g (flat).
        let rows = batch * m;
        let bt = transpose2d(b.data(), k, n);
        let mut ga = Tensor::zeros(a.shape());
        matmul2d(g.data(), &bt, ga.data_mut(), rows, n, k, alpha, true);
        let at = transpose2d(a.data(), rows, k);
        let mut gb = Tensor::zeros(b.shape());
        matmul2d(&at, g.data(), gb.data_mut(), k, rows, n, alpha, true);
        return Ok((ga, gb));
    }

    let offs_a = lead_offsets(&d.lead_a, &d.lead_out);
    let offs_b = lead_offsets(&d.lead_b, &d.lead_out);
    let batches_a: usize = d.lead_a.iter().product::<usize>().max(1);
    let batches_b: usize = d.lead_b.iter().product::<usize>().max(1);
    let (sa, sb, so) = (m * k, k * n, m * n);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let bijective = batches_a == batch && batches_b == batch;
    if bijective {
        // No broadcast: each output slice maps to its own A and B slice.
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let ga_slices: Vec<(usize, Vec<F>, Vec<F>)> = (0..batch)
            .into_par_iter()
            .map(|i| {
                let asl = &ad[i * sa..(i + 1) * sa];
                let bsl = &bd[i * sb..(i + 1) * sb];
                let gsl = &gd[i * so..(i + 1) * so];
                let bt = transpose2d(bsl, k, n);
                let mut ga_s = vec![F::zero(); sa];
                matmul2d(gsl, &bt, &mut ga_s, m, n, k, alpha, false);
                let at = transpose2d(asl, m, k);
                let mut gb_s = vec![F::zero(); sb];
                matmul2d(&at, gsl, &mut gb_s, k, m, n, alpha, false);
                (i, ga_s, gb_s)
            })
            .collect();
        for (i, ga_s, gb_s) in ga_slices {
            ga.data_mut()[i * sa..(i + 1) * sa].copy_from_slice(&ga_s);
            gb.data_mut()[i * sb..(i + 1) * sb].copy_from_slice(&gb_s);
        }
    } else {
        // Broadcast present: accumulate sequentially in batch order.
        for i in 0..batch {
            let asl = &a.data()[offs_a[i] * sa..offs_a[i] * sa + sa];
            let bsl = &b.data()[offs_b[i] * sb..offs_b[i] * sb + sb];
            let gsl = &g.data()[i * so..(i + 1) * so];
            let bt = transpose2d(bsl, k, n);
            matmul2d(
                gsl,
                &bt,
                &mut ga.data_mut()[offs_a[i] * sa..offs_a[i] * sa + sa],
                m,
                n,
                k,
                alpha,
                false,
            );
            let at = transpose2d(asl, m, k);
            matmul2d(
                &at,
                gsl,
                &mut gb.data_mut()[offs_b[i] * sb..offs_b[i] * sb + sb],
                k,
                m,
                n,
                alpha,
                false,
            );
        }
    }
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(t(&[3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let i = g.constant(Tensor::eye(3));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), g.value(m).data());
    }

    #[test]
    fn matmul_ones_is_inner_dim() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 2], 1.0));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 2]);
        assert!(g.value(p).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], vec![0., 0., 0.]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stabilized_against_overflow() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], vec![1000., 0.]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], vec![f64::NAN, 0.]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn attention_single_key_passes_value_through() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 4], vec![0.3, -0.1, 2.0, 0.7]));
        let k = g.constant(t(&[1, 4], vec![1.0, 0.5, -0.2, 0.9]));
        let v = g.constant(t(&[1, 3], vec![5.0, -2.0, 0.25]));
        let (out, map) = g.scaled_dot_attention(q, k, v, None, true).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, -2.0, 0.25]);
        let map = map.unwrap();
        assert_eq!(map.weights.data(), &[1.0]);
    }

    #[test]
    fn attention_orthogonal_query_uniform_weights() {
        // q ⟂ every key and keys identical -> all scores equal -> uniform.
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 2], vec![1.0, 0.0]));
        let k = g.constant(t(&[4, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]));
        let v = g.constant(t(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let (out, map) = g.scaled_dot_attention(q, k, v, None, true).unwrap();
        let w = map.unwrap();
        for &p in w.weights.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((g.value(out).data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn attention_head_dim_mismatch() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        let v = g.constant(Tensor::zeros(&[2, 4]));
        let err = g.scaled_dot_attention(q, k, v, None, false).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn broadcast_add_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]), true);
        let b = g.leaf(t(&[3], vec![10., 20., 30.]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let l = g.mean_all(y);
        g.backward(l).unwrap();
        // each bias coord is hit twice, scaled by 1/6
        for &v in g.grad(b).unwrap().data() {
            assert!((v - 2.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let left = g.narrow(x, 1, 0, 1).unwrap();
        let right = g.narrow(x, 1, 1, 2).unwrap();
        let back = g.concat(left, right, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let y = g.gelu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_forward_backward_same_seed() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(2021);
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng), true);
            let w = g.leaf(Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng), true);
            let h = g.matmul(x, w).unwrap();
            let a = g.gelu(h);
            let s = g.softmax(a, 1).unwrap();
            let l = g.mean_all(s);
            g.backward(l).unwrap();
            (
                g.value(l).data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&l1), bits(&l2));
        assert_eq!(bits(&g1), bits(&g2));
    }
}
