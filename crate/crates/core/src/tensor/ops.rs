//! Differentiable tensor operations. Every op validates shapes, computes its
//! forward value with a fixed accumulation order, and — when any input is
//! tracked — records a backward rule on that input's tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::tape::{BackwardRule, BwdCtx, NodeId, Tape};
use crate::tensor::Tensor;

/// Registers the op on the inputs' tape (if any input is tracked) and wraps
/// the forward value. All tracked inputs must share one tape.
pub(crate) fn record_op<S: Scalar>(
    name: &'static str,
    inputs: &[&Tensor<S>],
    out_shape: Vec<usize>,
    out_data: Vec<S>,
    rule: Box<dyn BackwardRule<S>>,
) -> Result<Tensor<S>> {
    let mut tape: Option<&Tape<S>> = None;
    for t in inputs {
        if let Some((tp, _)) = &t.track {
            match tape {
                None => tape = Some(tp),
                Some(existing) if existing.same_tape(tp) => {}
                Some(_) => {
                    return Err(Error::invalid(name, "inputs are tracked on different tapes"))
                }
            }
        }
    }
    let value = Arc::new(out_data);
    let Some(tape) = tape else {
        return Ok(Tensor::from_parts(out_shape, value, None));
    };
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| match &t.track {
            Some((_, id)) => *id,
            None => tape.constant(t),
        })
        .collect();
    let out_id = tape.output(out_shape.clone(), Arc::clone(&value));
    tape.record(ids, out_id, rule);
    Ok(Tensor::from_parts(
        out_shape,
        value,
        Some((tape.clone(), out_id)),
    ))
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Channel axis by rank: 0 for C×H×W, 1 for B×C×H×W.
pub(crate) fn channel_axis(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        r => Err(Error::invalid(
            op,
            format!("expected rank 3 or 4 tensor, got rank {r}"),
        )),
    }
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

struct AddBwd;
impl<S: Scalar> BackwardRule<S> for AddBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        for i in 0..2 {
            if ctx.needs(i) {
                ctx.add_grad(i, ctx.out_grad.to_vec());
            }
        }
    }
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    record_op("add", &[a, b], a.shape().to_vec(), data, Box::new(AddBwd))
}

struct SubBwd;
impl<S: Scalar> BackwardRule<S> for SubBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            ctx.add_grad(0, ctx.out_grad.to_vec());
        }
        if ctx.needs(1) {
            ctx.add_grad(1, ctx.out_grad.iter().map(|&g| -g).collect());
        }
    }
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x - y)
        .collect();
    record_op("sub", &[a, b], a.shape().to_vec(), data, Box::new(SubBwd))
}

struct MulBwd;
impl<S: Scalar> BackwardRule<S> for MulBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.input_value(1))
                .map(|(&g, &b)| g * b)
                .collect();
            ctx.add_grad(0, g);
        }
        if ctx.needs(1) {
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.input_value(0))
                .map(|(&g, &a)| g * a)
                .collect();
            ctx.add_grad(1, g);
        }
    }
}

/// Elementwise product.
pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    record_op("mul", &[a, b], a.shape().to_vec(), data, Box::new(MulBwd))
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

struct AffineBwd<S> {
    scale: S,
}
impl<S: Scalar> BackwardRule<S> for AffineBwd<S> {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            ctx.add_grad(0, ctx.out_grad.iter().map(|&g| g * self.scale).collect());
        }
    }
}

/// `scale * x + shift`, elementwise.
pub fn affine<S: Scalar>(x: &Tensor<S>, scale: S, shift: S) -> Result<Tensor<S>> {
    let data = x.data().iter().map(|&v| scale * v + shift).collect();
    record_op(
        "affine",
        &[x],
        x.shape().to_vec(),
        data,
        Box::new(AffineBwd { scale }),
    )
}

pub fn neg<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    affine(x, -S::one(), S::zero())
}

struct ExpBwd;
impl<S: Scalar> BackwardRule<S> for ExpBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.out_value)
                .map(|(&g, &y)| g * y)
                .collect();
            ctx.add_grad(0, g);
        }
    }
}

pub fn exp<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let data = x.data().iter().map(|&v| v.exp()).collect();
    record_op("exp", &[x], x.shape().to_vec(), data, Box::new(ExpBwd))
}

struct LogBwd<S> {
    floor: Option<S>,
}
impl<S: Scalar> BackwardRule<S> for LogBwd<S> {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if !ctx.needs(0) {
            return;
        }
        let g = ctx
            .out_grad
            .iter()
            .zip(ctx.input_value(0))
            .map(|(&g, &x)| match self.floor {
                Some(floor) if x <= floor => S::zero(),
                _ => g / x,
            })
            .collect();
        ctx.add_grad(0, g);
    }
}

/// Natural logarithm; errors on any non-positive element.
pub fn log<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if let Some(&bad) = x.data().iter().find(|v| **v <= S::zero()) {
        return Err(Error::Domain {
            op: "log",
            msg: format!("non-positive value {bad}"),
        });
    }
    let data = x.data().iter().map(|&v| v.ln()).collect();
    record_op(
        "log",
        &[x],
        x.shape().to_vec(),
        data,
        Box::new(LogBwd { floor: None }),
    )
}

/// `ln(max(x, floor))`; elements at or below the floor get zero gradient.
pub fn log_clamped<S: Scalar>(x: &Tensor<S>, floor: S) -> Result<Tensor<S>> {
    let data = x.data().iter().map(|&v| v.max(floor).ln()).collect();
    record_op(
        "log",
        &[x],
        x.shape().to_vec(),
        data,
        Box::new(LogBwd { floor: Some(floor) }),
    )
}

struct ReluBwd;
impl<S: Scalar> BackwardRule<S> for ReluBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.input_value(0))
                .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                .collect();
            ctx.add_grad(0, g);
        }
    }
}

/// max(0, x).
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let data = x.data().iter().map(|&v| v.max(S::zero())).collect();
    record_op("relu", &[x], x.shape().to_vec(), data, Box::new(ReluBwd))
}

struct AbsBwd;
impl<S: Scalar> BackwardRule<S> for AbsBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.input_value(0))
                .map(|(&g, &x)| g * x.signum() * if x == S::zero() { S::zero() } else { S::one() })
                .collect();
            ctx.add_grad(0, g);
        }
    }
}

pub fn abs<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let data = x.data().iter().map(|&v| v.abs()).collect();
    record_op("abs", &[x], x.shape().to_vec(), data, Box::new(AbsBwd))
}

struct SigmoidBwd;
impl<S: Scalar> BackwardRule<S> for SigmoidBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.out_value)
                .map(|(&g, &s)| g * s * (S::one() - s))
                .collect();
            ctx.add_grad(0, g);
        }
    }
}

/// 1 / (1 + e^(-x)).
pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let data = x
        .data()
        .iter()
        .map(|&v| S::one() / (S::one() + (-v).exp()))
        .collect();
    record_op(
        "sigmoid",
        &[x],
        x.shape().to_vec(),
        data,
        Box::new(SigmoidBwd),
    )
}

struct PowBwd {
    exponent: f64,
}
impl<S: Scalar> BackwardRule<S> for PowBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if !ctx.needs(0) {
            return;
        }
        let e = S::of(self.exponent);
        let g = ctx
            .out_grad
            .iter()
            .zip(ctx.input_value(0))
            .map(|(&g, &x)| {
                if self.exponent == 0.0 {
                    S::zero()
                } else if x == S::zero() && self.exponent < 1.0 {
                    S::zero()
                } else {
                    g * e * x.powf(e - S::one())
                }
            })
            .collect();
        ctx.add_grad(0, g);
    }
}

/// x^e with a constant exponent; used with non-negative bases.
pub fn pow_const<S: Scalar>(x: &Tensor<S>, exponent: f64) -> Result<Tensor<S>> {
    let e = S::of(exponent);
    let data = x.data().iter().map(|&v| v.powf(e)).collect();
    record_op(
        "pow",
        &[x],
        x.shape().to_vec(),
        data,
        Box::new(PowBwd { exponent }),
    )
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct SumBwd;
impl<S: Scalar> BackwardRule<S> for SumBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let g = ctx.out_grad[0];
            ctx.add_grad(0, vec![g; ctx.input_value(0).len()]);
        }
    }
}

/// Sum of all elements, sequential left-to-right.
pub fn sum<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut acc = S::zero();
    for &v in x.data() {
        acc += v;
    }
    record_op("sum", &[x], vec![], vec![acc], Box::new(SumBwd))
}

struct MeanBwd;
impl<S: Scalar> BackwardRule<S> for MeanBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            let n = ctx.input_value(0).len();
            let g = ctx.out_grad[0] / S::of_usize(n);
            ctx.add_grad(0, vec![g; n]);
        }
    }
}

/// Arithmetic mean of all elements.
pub fn mean<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut acc = S::zero();
    for &v in x.data() {
        acc += v;
    }
    let m = acc / S::of_usize(x.numel());
    record_op("mean", &[x], vec![], vec![m], Box::new(MeanBwd))
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

struct ReshapeBwd;
impl<S: Scalar> BackwardRule<S> for ReshapeBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if ctx.needs(0) {
            ctx.add_grad(0, ctx.out_grad.to_vec());
        }
    }
}

pub fn reshape<S: Scalar>(x: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::invalid(
            "reshape",
            format!("cannot view {:?} as {:?}", x.shape(), shape),
        ));
    }
    let data = x.data().to_vec();
    record_op("reshape", &[x], shape, data, Box::new(ReshapeBwd))
}

struct ConcatBwd {
    axis: usize,
    blocks: Vec<usize>,
    outer: usize,
}
impl<S: Scalar> BackwardRule<S> for ConcatBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        let _ = self.axis;
        let total: usize = self.blocks.iter().sum();
        for (i, &block) in self.blocks.iter().enumerate() {
            if !ctx.needs(i) {
                continue;
            }
            let mut g = vec![S::zero(); block * self.outer];
            let offset: usize = self.blocks[..i].iter().sum();
            for o in 0..self.outer {
                let src = &ctx.out_grad[o * total + offset..o * total + offset + block];
                g[o * block..(o + 1) * block].copy_from_slice(src);
            }
            ctx.add_grad(i, g);
        }
    }
}

/// Concatenation along the channel axis (axis 0 for rank 3, axis 1 for rank 4).
pub fn concat_channels<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat", "no inputs"));
    }
    let first = inputs[0];
    let axis = channel_axis("concat", first.shape())?;
    let mut channels = 0;
    for t in inputs {
        if t.rank() != first.rank() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for ax in 0..first.rank() {
            if ax != axis && t.dim(ax) != first.dim(ax) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        channels += t.dim(axis);
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = channels;

    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let blocks: Vec<usize> = inputs.iter().map(|t| t.dim(axis) * inner).collect();
    let total: usize = blocks.iter().sum();

    let mut data = vec![S::zero(); outer * total];
    for o in 0..outer {
        let mut at = o * total;
        for (t, &block) in inputs.iter().zip(&blocks) {
            data[at..at + block].copy_from_slice(&t.data()[o * block..(o + 1) * block]);
            at += block;
        }
    }
    record_op(
        "concat",
        inputs,
        shape,
        data,
        Box::new(ConcatBwd { axis, blocks, outer }),
    )
}

struct SliceBwd {
    outer: usize,
    inner: usize,
    in_channels: usize,
    start: usize,
    len: usize,
}
impl<S: Scalar> BackwardRule<S> for SliceBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if !ctx.needs(0) {
            return;
        }
        let mut g = vec![S::zero(); self.outer * self.in_channels * self.inner];
        let block = self.len * self.inner;
        for o in 0..self.outer {
            let dst = o * self.in_channels * self.inner + self.start * self.inner;
            g[dst..dst + block].copy_from_slice(&ctx.out_grad[o * block..(o + 1) * block]);
        }
        ctx.add_grad(0, g);
    }
}

/// Channel-range slice `start..end` along the channel axis.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
    let axis = channel_axis("slice", x.shape())?;
    let c = x.dim(axis);
    if start >= end || end > c {
        return Err(Error::invalid(
            "slice",
            format!("channel range {start}..{end} invalid for {c} channels"),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let len = end - start;
    let mut shape = x.shape().to_vec();
    shape[axis] = len;

    let mut data = vec![S::zero(); outer * len * inner];
    for o in 0..outer {
        let src = o * c * inner + start * inner;
        data[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&x.data()[src..src + len * inner]);
    }
    record_op(
        "slice",
        &[x],
        shape,
        data,
        Box::new(SliceBwd {
            outer,
            inner,
            in_channels: c,
            start,
            len,
        }),
    )
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

struct MatmulBwd {
    m: usize,
    k: usize,
    n: usize,
}
impl<S: Scalar> BackwardRule<S> for MatmulBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if ctx.needs(0) {
            // dA = g · Bᵀ
            let mut da = vec![S::zero(); m * k];
            linalg::gemm_nt(m, n, k, ctx.out_grad, ctx.input_value(1), &mut da);
            ctx.add_grad(0, da);
        }
        if ctx.needs(1) {
            // dB = Aᵀ · g
            let mut db = vec![S::zero(); k * n];
            linalg::gemm_tn(k, m, n, ctx.input_value(0), ctx.out_grad, &mut db);
            ctx.add_grad(1, db);
        }
    }
}

/// Row-major matrix product of an m×k by a k×n tensor.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut data = vec![S::zero(); m * n];
    linalg::gemm_nn(m, k, n, a.data(), b.data(), &mut data);
    record_op(
        "matmul",
        &[a, b],
        vec![m, n],
        data,
        Box::new(MatmulBwd { m, k, n }),
    )
}

// ---------------------------------------------------------------------------
// per-pixel channel softmax and class selection
// ---------------------------------------------------------------------------

struct ChannelSoftmaxBwd {
    channels: usize,
    pixels: usize,
    outer: usize,
}
impl<S: Scalar> BackwardRule<S> for ChannelSoftmaxBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if !ctx.needs(0) {
            return;
        }
        let (c, px) = (self.channels, self.pixels);
        let mut g = vec![S::zero(); ctx.out_grad.len()];
        for o in 0..self.outer {
            let base = o * c * px;
            for p in 0..px {
                let mut dot = S::zero();
                for ch in 0..c {
                    let idx = base + ch * px + p;
                    dot += ctx.out_grad[idx] * ctx.out_value[idx];
                }
                for ch in 0..c {
                    let idx = base + ch * px + p;
                    g[idx] = ctx.out_value[idx] * (ctx.out_grad[idx] - dot);
                }
            }
        }
        ctx.add_grad(0, g);
    }
}

/// Softmax across the channel axis, independently per pixel, stabilized by
/// subtracting the per-pixel channel maximum.
pub fn channel_softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let axis = channel_axis("channel_softmax", x.shape())?;
    let c = x.dim(axis);
    let outer: usize = x.shape()[..axis].iter().product();
    let pixels: usize = x.shape()[axis + 1..].iter().product();

    let src = x.data();
    let mut data = vec![S::zero(); src.len()];
    for o in 0..outer {
        let base = o * c * pixels;
        for p in 0..pixels {
            let mut mx = src[base + p];
            for ch in 1..c {
                mx = mx.max(src[base + ch * pixels + p]);
            }
            let mut denom = S::zero();
            for ch in 0..c {
                let e = (src[base + ch * pixels + p] - mx).exp();
                data[base + ch * pixels + p] = e;
                denom += e;
            }
            for ch in 0..c {
                data[base + ch * pixels + p] /= denom;
            }
        }
    }
    record_op(
        "channel_softmax",
        &[x],
        x.shape().to_vec(),
        data,
        Box::new(ChannelSoftmaxBwd {
            channels: c,
            pixels,
            outer,
        }),
    )
}

struct SelectClassBwd {
    labels: Vec<u8>,
    channels: usize,
    pixels: usize,
}
impl<S: Scalar> BackwardRule<S> for SelectClassBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if !ctx.needs(0) {
            return;
        }
        let (c, px) = (self.channels, self.pixels);
        let outer = self.labels.len() / px;
        let mut g = vec![S::zero(); outer * c * px];
        for o in 0..outer {
            for p in 0..px {
                let cls = self.labels[o * px + p] as usize;
                g[o * c * px + cls * px + p] = ctx.out_grad[o * px + p];
            }
        }
        ctx.add_grad(0, g);
    }
}

/// Per-pixel lookup of the channel named by a class-index map: for a
/// K×H×W input and H×W labels, returns the H×W values x[y(i,j), i, j].
pub fn select_class<S: Scalar>(x: &Tensor<S>, labels: &[u8]) -> Result<Tensor<S>> {
    let axis = channel_axis("select_class", x.shape())?;
    let c = x.dim(axis);
    let outer: usize = x.shape()[..axis].iter().product();
    let pixels: usize = x.shape()[axis + 1..].iter().product();
    if labels.len() != outer * pixels {
        return Err(Error::invalid(
            "select_class",
            format!(
                "label count {} does not match {} pixels",
                labels.len(),
                outer * pixels
            ),
        ));
    }
    let (h, w) = (x.dim(x.rank() - 2), x.dim(x.rank() - 1));
    let mut data = vec![S::zero(); outer * pixels];
    for o in 0..outer {
        for p in 0..pixels {
            let cls = labels[o * pixels + p] as usize;
            if cls >= c {
                return Err(Error::invalid(
                    "select_class",
                    format!(
                        "label {} at pixel ({}, {}) out of range for {} classes",
                        cls,
                        p / w,
                        p % w,
                        c
                    ),
                ));
            }
            data[o * pixels + p] = x.data()[o * c * pixels + cls * pixels + p];
        }
    }
    let mut shape: Vec<usize> = x.shape()[..axis].to_vec();
    shape.push(h);
    shape.push(w);
    record_op(
        "select_class",
        &[x],
        shape,
        data,
        Box::new(SelectClassBwd {
            labels: labels.to_vec(),
            channels: c,
            pixels,
        }),
    )
}
