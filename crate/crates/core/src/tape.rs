//! Reverse-mode differentiation tape.
//!
//! Every value produced during a forward pass lives on a [`Tape`] and is
//! addressed by a copyable [`Var`] handle. Operations whose inputs require
//! gradients record a backward rule; [`Tape::backward`] replays those rules
//! in reverse order, summing contributions per tensor.
//!
//! A tape supports a single backward pass. Call [`Tape::reset`] (or build a
//! new tape) before the next forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::conv;
use crate::error::{dim_err, invalid, Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Rule = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_param: bool,
    op: Option<(Vec<Var>, Rule)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    relu_inputs: Vec<Var>,
}

/// Gradients of a scalar loss with respect to every parameter on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, mid, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > mid {
        return Err(dim_err!(
            "slice [{start}, {}) outside extent {mid}",
            start + len
        ));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * mid * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Inverse of [`slice_axis`]: embeds `g` into zeros of extent `mid`.
fn unslice_axis(g: &Tensor, axis: usize, start: usize, mid: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(g.shape(), axis)?;
    let mut out = vec![0.0; outer * mid * inner];
    for o in 0..outer {
        let dst = o * mid * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = g.shape().to_vec();
    shape[axis] = mid;
    Tensor::new(&shape, out)
}

fn block_apply(blocks: &[Tensor], x: &Tensor, transpose: bool) -> Result<Tensor> {
    let n = blocks.first().map(|b| b.rows()).unwrap_or(0);
    let cols = x.cols();
    if x.rank() != 2 || x.rows() != blocks.len() * n {
        return Err(dim_err!(
            "block-diagonal product: {} blocks of {n} rows vs input {:?}",
            blocks.len(),
            x.shape()
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for (t, b) in blocks.iter().enumerate() {
        let xb = Tensor::new(&[n, cols], x.data()[t * n * cols..(t + 1) * n * cols].to_vec())?;
        let yb = if transpose { b.matmul_tn(&xb)? } else { b.matmul(&xb)? };
        out.extend(yb.into_data());
    }
    Tensor::new(x.shape(), out)
}

/// Subtracts, per group, the mean of the member rows; rows outside every
/// group become zero. The map is a symmetric projection, so it is its own
/// adjoint.
fn center_rows(x: &Tensor, groups: &[Vec<usize>]) -> Tensor {
    let cols = x.cols();
    let mut out = vec![0.0f32; x.len()];
    for g in groups {
        if g.is_empty() {
            continue;
        }
        let mut mean = vec![0.0f64; cols];
        for &r in g {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= g.len() as f64;
        }
        for &r in g {
            for (c, (&v, &m)) in x.row(r).iter().zip(&mean).enumerate() {
                out[r * cols + c] = (v as f64 - m) as f32;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    -softplus(-x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded value and re-arms the tape for a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: param,
            is_param: param,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], rule: Rule) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            is_param: false,
            op: requires_grad.then(|| (inputs.to_vec(), rule)),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push("add", y, &[a, b], Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push("sub", y, &[a, b], Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let y = self.value(a).scale(s);
        self.push("scale", y, &[a], Box::new(move |g, _, _, _| Ok(vec![Some(g.scale(s))])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        self.push(
            "mul",
            y,
            &[a, b],
            Box::new(|g, x, _, needs| {
                Ok(vec![
                    needs[0].then(|| g.mul(x[1])).transpose()?,
                    needs[1].then(|| g.mul(x[0])).transpose()?,
                ])
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        self.push(
            "matmul",
            y,
            &[a, b],
            Box::new(|g, x, _, needs| {
                Ok(vec![
                    needs[0].then(|| g.matmul_nt(x[1])).transpose()?,
                    needs[1].then(|| x[0].matmul_tn(g)).transpose()?,
                ])
            }),
        )
    }

    /// Which side of the kink every ReLU input entry fell on, in tape
    /// order. Finite differences are only meaningful when this pattern
    /// does not change across the step.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relu_inputs.iter().flat_map(|v| self.nodes[v.0].value.data().iter().map(|&x| x > 0.0)).collect()
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.relu_inputs.push(a);
        let y = self.value(a).map(|v| v.max(0.0));
        self.push(
            "relu",
            y,
            &[a],
            Box::new(|g, x, _, _| Ok(vec![Some(g.zip_map(x[0], |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)])),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| sigmoid(v as f64) as f32);
        self.push(
            "sigmoid",
            y,
            &[a],
            Box::new(|g, _, y, _| Ok(vec![Some(g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?)])),
        )
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum() as f32);
        self.push(
            "sum",
            y,
            &[a],
            Box::new(|g, x, _, _| Ok(vec![Some(Tensor::full(x[0].shape(), g.item()))])),
        )
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, mid, inner) = split_axis(x.shape(), axis)?;
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * mid + m) * inner + i] as f64;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let y = Tensor::new(&shape, out.into_iter().map(|v| (v / mid as f64) as f32).collect())?;
        self.push(
            "mean_axis",
            y,
            &[a],
            Box::new(move |g, x, _, _| {
                let mut dx = vec![0.0f32; x[0].len()];
                let inv = 1.0 / mid as f32;
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            dx[(o * mid + m) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(x[0].shape(), dx)?)])
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| dim_err!("concat of nothing"))?)
            .shape()
            .to_vec();
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(dim_err!("concat shapes {s:?} vs {first:?} along axis {axis}"));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis)?;
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&self.value(p).data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let y = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            y,
            parts,
            Box::new(move |g, _, _, needs| {
                let mut start = 0;
                let mut grads = Vec::with_capacity(extents.len());
                for (&e, &need) in extents.iter().zip(needs) {
                    grads.push(need.then(|| slice_axis(g, axis, start, e)).transpose()?);
                    start += e;
                }
                Ok(grads)
            }),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let mid = *x.shape().get(axis).ok_or_else(|| dim_err!("axis {axis} out of range"))?;
        let y = slice_axis(x, axis, start, len)?;
        self.push(
            "slice",
            y,
            &[a],
            Box::new(move |g, _, _, _| Ok(vec![Some(unslice_axis(g, axis, start, mid)?)])),
        )
    }

    /// Appends `extra` zero entries along `axis`.
    pub fn pad_end(&mut self, a: Var, axis: usize, extra: usize) -> Result<Var> {
        if extra == 0 {
            return Ok(a);
        }
        let mut shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range"));
        }
        shape[axis] = extra;
        let z = self.constant(Tensor::zeros(&shape));
        self.concat(&[a, z], axis)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        self.push(
            "reshape",
            y,
            &[a],
            Box::new(|g, x, _, _| Ok(vec![Some(g.reshape(x[0].shape())?)])),
        )
    }

    /// Adds a length-`cols` bias to every row (trailing-axis broadcast).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let b = self.value(bias);
        let cols = x.cols();
        if b.len() != cols || b.rank() != 1 {
            return Err(dim_err!("bias {:?} does not match rows of width {cols}", b.shape()));
        }
        let data = x
            .data()
            .chunks(cols)
            .flat_map(|r| r.iter().zip(b.data()).map(|(v, bv)| v + bv))
            .collect();
        let y = Tensor::new(x.shape(), data)?;
        self.push(
            "add_bias",
            y,
            &[a, bias],
            Box::new(move |g, _, _, needs| {
                let db = needs[1].then(|| {
                    let mut acc = vec![0.0f64; cols];
                    for r in g.data().chunks(cols) {
                        for (s, &v) in acc.iter_mut().zip(r) {
                            *s += v as f64;
                        }
                    }
                    Tensor::vector(acc.into_iter().map(|v| v as f32).collect())
                });
                Ok(vec![Some(g.clone()), db.transpose()?])
            }),
        )
    }

    /// Places the rows of `a` at `rows` inside an otherwise zero matrix with
    /// `total` rows.
    pub fn scatter_rows(&mut self, a: Var, rows: Arc<Vec<usize>>, total: usize) -> Result<Var> {
        let x = self.value(a);
        x.expect_rank(2, "scatter input")?;
        if rows.len() != x.rows() || rows.iter().any(|&r| r >= total) {
            return Err(dim_err!(
                "scatter of {} rows into {total} with {} targets",
                x.rows(),
                rows.len()
            ));
        }
        let cols = x.cols();
        let mut out = vec![0.0; total * cols];
        for (i, &r) in rows.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(x.row(i));
        }
        let y = Tensor::new(&[total, cols], out)?;
        self.push(
            "scatter_rows",
            y,
            &[a],
            Box::new(move |g, _, _, _| {
                let data = rows.iter().flat_map(|&r| g.row(r).iter().copied()).collect();
                Ok(vec![Some(Tensor::new(&[rows.len(), cols], data)?)])
            }),
        )
    }

    /// Selects rows of `a` in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        x.expect_rank(2, "gather input")?;
        let total = x.rows();
        if rows.is_empty() || rows.iter().any(|&r| r >= total) {
            return Err(dim_err!("gather indices out of range for {total} rows"));
        }
        let cols = x.cols();
        let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
        let y = Tensor::new(&[rows.len(), cols], data)?;
        self.push(
            "gather_rows",
            y,
            &[a],
            Box::new(move |g, _, _, _| {
                let mut out = vec![0.0; total * cols];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                Ok(vec![Some(Tensor::new(&[total, cols], out)?)])
            }),
        )
    }

    /// Multiplies consecutive row blocks of `a` by fixed square matrices:
    /// block `t` of the output is `blocks[t] · a_t`.
    pub fn block_diag_matmul(&mut self, blocks: Arc<Vec<Tensor>>, a: Var) -> Result<Var> {
        let y = block_apply(&blocks, self.value(a), false)?;
        self.push(
            "block_diag_matmul",
            y,
            &[a],
            Box::new(move |g, _, _, _| Ok(vec![Some(block_apply(&blocks, g, true)?)])),
        )
    }

    /// Per-group mean subtraction over rows; rows outside every group are
    /// zeroed. Groups must be disjoint.
    pub fn center_rows(&mut self, a: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let x = self.value(a);
        x.expect_rank(2, "center input")?;
        if groups.iter().flatten().any(|&r| r >= x.rows()) {
            return Err(dim_err!("group row out of range"));
        }
        let y = center_rows(x, &groups);
        self.push(
            "center_rows",
            y,
            &[a],
            Box::new(move |g, _, _, _| Ok(vec![Some(center_rows(g, &groups))])),
        )
    }

    pub fn conv1d_temporal(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let y = conv::conv1d_temporal(self.value(x), self.value(kernel), stride)?;
        let k = self.value(kernel).shape()[0];
        self.push(
            "conv1d_temporal",
            y,
            &[x, kernel],
            Box::new(move |g, inp, _, needs| {
                Ok(vec![
                    needs[0]
                        .then(|| conv::input_grad(inp[0].shape(), inp[1], g, stride, false))
                        .transpose()?,
                    needs[1]
                        .then(|| conv::kernel_grad(inp[0], g, k, stride, false))
                        .transpose()?,
                ])
            }),
        )
    }

    pub fn deconv1d_temporal(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let y = conv::deconv1d_temporal(self.value(x), self.value(kernel), stride)?;
        let k = self.value(kernel).shape()[0];
        self.push(
            "deconv1d_temporal",
            y,
            &[x, kernel],
            Box::new(move |g, inp, _, needs| {
                Ok(vec![
                    needs[0]
                        .then(|| conv::input_grad(inp[0].shape(), inp[1], g, stride, true))
                        .transpose()?,
                    needs[1]
                        .then(|| conv::kernel_grad(inp[0], g, k, stride, true))
                        .transpose()?,
                ])
            }),
        )
    }

    /// Mean binary cross-entropy with logits over the masked-in rows.
    pub fn masked_bce_loss(&mut self, scores: Var, targets: &Tensor, mask: &[bool]) -> Result<Var> {
        let s = self.value(scores);
        s.expect_rank(2, "scores")?;
        s.expect_same_shape(targets)?;
        if mask.len() != s.rows() {
            return Err(dim_err!("mask length {} vs {} rows", mask.len(), s.rows()));
        }
        let cols = s.cols();
        let count = mask.iter().filter(|&&m| m).count() * cols;
        if count == 0 {
            return Err(invalid!("every timestep is masked out"));
        }
        let mut total = 0.0f64;
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (&x, &y) in s.row(t).iter().zip(targets.row(t)) {
                let (x, y) = (x as f64, y as f64);
                total -= y * log_sigmoid(x) + (1.0 - y) * log_sigmoid(-x);
            }
        }
        let loss = Tensor::scalar((total / count as f64) as f32);
        let targets = targets.clone();
        let mask = mask.to_vec();
        self.push(
            "masked_bce_loss",
            loss,
            &[scores],
            Box::new(move |g, inp, _, _| {
                let scale = g.item() as f64 / count as f64;
                let mut d = vec![0.0f32; inp[0].len()];
                for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for c in 0..cols {
                        let i = t * cols + c;
                        let p = sigmoid(inp[0].data()[i] as f64);
                        d[i] = ((p - targets.data()[i] as f64) * scale) as f32;
                    }
                }
                Ok(vec![Some(Tensor::new(inp[0].shape(), d)?)])
            }),
        )
    }

    /// Mean softmax cross-entropy over the masked-in rows.
    pub fn masked_ce_loss(&mut self, scores: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.value(scores);
        s.expect_rank(2, "scores")?;
        let cols = s.cols();
        if labels.len() != s.rows() || mask.len() != s.rows() {
            return Err(dim_err!(
                "labels {} / mask {} vs {} rows",
                labels.len(),
                mask.len(),
                s.rows()
            ));
        }
        if let Some(&bad) = labels.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| l).find(|&&l| l >= cols) {
            return Err(invalid!("label {bad} outside [0, {cols})"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid!("every timestep is masked out"));
        }
        let mut total = 0.0f64;
        let mut probs = vec![0.0f64; s.len()];
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let row = s.row(t);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[labels[t]] as f64;
            for c in 0..cols {
                probs[t * cols + c] = (row[c] as f64 - lse).exp();
            }
        }
        let loss = Tensor::scalar((total / count as f64) as f32);
        let labels = labels.to_vec();
        let mask = mask.to_vec();
        self.push(
            "masked_ce_loss",
            loss,
            &[scores],
            Box::new(move |g, inp, _, _| {
                let scale = g.item() as f64 / count as f64;
                let mut d = vec![0.0f32; inp[0].len()];
                for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for c in 0..cols {
                        let onehot = if labels[t] == c { 1.0 } else { 0.0 };
                        d[t * cols + c] = ((probs[t * cols + c] - onehot) * scale) as f32;
                    }
                }
                Ok(vec![Some(Tensor::new(inp[0].shape(), d)?)])
            }),
        )
    }

    /// `Σ a ⊙ weights` against a constant tensor, as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        let x = self.value(a);
        x.expect_same_shape(weights)?;
        let y = Tensor::scalar(dot(x.data(), weights.data()) as f32);
        let w = weights.clone();
        self.push(
            "weighted_sum",
            y,
            &[a],
            Box::new(move |g, _, _, _| Ok(vec![Some(w.scale(g.item()))])),
        )
    }

    /// Back-propagates from a scalar `loss`, returning the gradient of every
    /// parameter leaf. Parameters the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some((inputs, rule)) = &node.op {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let contributions = rule(&g, &values, &node.value, &needs)?;
                for ((v, c), need) in inputs.iter().zip(contributions).zip(needs) {
                    let Some(c) = c.filter(|_| need) else { continue };
                    grads[v.0] = Some(match grads[v.0].take() {
                        Some(acc) => acc.add(&c)?,
                        None => c,
                    });
                }
            }
            grads[idx] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().filter(|(_, n)| n.is_param) {
            let g = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            out.insert(Var(idx), g);
        }
        Ok(Gradients { grads: out })
    }
}
