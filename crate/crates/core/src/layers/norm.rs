use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::scalar::Scalar;
use crate::tensor::ops::record_op;
use crate::tensor::{BackwardRule, BwdCtx, Tensor};

/// Per-channel batch normalization state. `gamma`/`beta` are learned; the
/// running statistics are updated as a side effect of train-mode forward
/// passes and consumed in eval mode.
pub struct BatchNormParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: RefCell<Vec<S>>,
    pub running_var: RefCell<Vec<S>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNormParams<S> {
    /// Identity-initialized normalization: gamma 1, beta 0, running mean 0,
    /// running variance 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(vec![channels], S::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: RefCell::new(vec![S::zero(); channels]),
            running_var: RefCell::new(vec![S::one(); channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

impl<S: Scalar> Clone for BatchNormParams<S> {
    fn clone(&self) -> Self {
        BatchNormParams {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: RefCell::new(self.running_mean.borrow().clone()),
            running_var: RefCell::new(self.running_var.borrow().clone()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

struct BatchNormBwd<S: Scalar> {
    mean: Vec<S>,
    var: Vec<S>,
    eps: S,
    train: bool,
}

impl<S: Scalar> BackwardRule<S> for BatchNormBwd<S> {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        let xs = ctx.input_shape(0).to_vec();
        let (bsz, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let n = bsz * hw;
        let x = ctx.input_value(0);
        let gamma = ctx.input_value(1);
        let g = ctx.out_grad;

        let need_x = ctx.needs(0);
        let need_gamma = ctx.needs(1);
        let need_beta = ctx.needs(2);

        let mut dx = if need_x { vec![S::zero(); x.len()] } else { Vec::new() };
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];

        for ch in 0..c {
            let inv = S::one() / (self.var[ch] + self.eps).sqrt();
            let mu = self.mean[ch];
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for b in 0..bsz {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    let gv = g[base + i];
                    sum_g += gv;
                    sum_gx += gv * (x[base + i] - mu) * inv;
                }
            }
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_gx;
            if need_x {
                let scale = gamma[ch] * inv;
                if self.train {
                    // Batch statistics are functions of x, so the gradient
                    // removes the per-channel mean components.
                    let nn = S::of_usize(n);
                    let mg = sum_g / nn;
                    let mgx = sum_gx / nn;
                    for b in 0..bsz {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            let xh = (x[base + i] - mu) * inv;
                            dx[base + i] = scale * (g[base + i] - mg - xh * mgx);
                        }
                    }
                } else {
                    for b in 0..bsz {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            dx[base + i] = scale * g[base + i];
                        }
                    }
                }
            }
        }
        if need_x {
            ctx.add_grad(0, dx);
        }
        if need_gamma {
            ctx.add_grad(1, dgamma);
        }
        if need_beta {
            ctx.add_grad(2, dbeta);
        }
    }
}

/// Normalizes each channel of a B×C×H×W batch, then applies the affine
/// gamma/beta. Train mode normalizes by batch statistics and updates the
/// running ones; eval mode normalizes by the running statistics.
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    params: &BatchNormParams<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::invalid(
            "batchnorm",
            format!("input must be B×C×H×W, got {:?}", x.shape()),
        ));
    }
    let (bsz, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    if c != params.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: vec![params.channels()],
        });
    }
    let n = bsz * hw;
    let eps = S::of(params.eps);

    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::invalid(
                    "batchnorm",
                    "train mode needs at least 2 elements per channel for batch statistics",
                ));
            }
            let src = x.data();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut acc = S::zero();
                for b in 0..bsz {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        acc += src[base + i];
                    }
                }
                let mu = acc / S::of_usize(n);
                let mut sq = S::zero();
                for b in 0..bsz {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        let d = src[base + i] - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / S::of_usize(n);
            }
            // Running stats use the unbiased variance.
            let mom = S::of(params.momentum);
            let keep = S::one() - mom;
            let unbias = S::of_usize(n) / S::of_usize(n - 1);
            let mut rm = params.running_mean.borrow_mut();
            let mut rv = params.running_var.borrow_mut();
            for ch in 0..c {
                rm[ch] = keep * rm[ch] + mom * mean[ch];
                rv[ch] = keep * rv[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (
            params.running_mean.borrow().clone(),
            params.running_var.borrow().clone(),
        ),
    };

    let src = x.data();
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut out = vec![S::zero(); src.len()];
    for ch in 0..c {
        let inv = S::one() / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let (gm, bt) = (gamma[ch], beta[ch]);
        for b in 0..bsz {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                out[base + i] = gm * (src[base + i] - mu) * inv + bt;
            }
        }
    }
    record_op(
        "batchnorm",
        &[x, &params.gamma, &params.beta],
        x.shape().to_vec(),
        out,
        Box::new(BatchNormBwd {
            mean,
            var,
            eps,
            train: mode == Mode::Train,
        }),
    )
}
