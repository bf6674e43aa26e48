//! Finite-difference verification suite covering every differentiable
//! operation in the crate. Each op is checked at f64 over seeded random
//! instances; the per-op maximum relative error must stay below 1e-4.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::SegBackbone;
use crate::error::Result;
use crate::hfam;
use crate::hfdm;
use crate::layers::{
    self, batchnorm, bilinear_interpolate, conv2d, seeded_rng, uniform_tensor, BatchNormParams,
    Conv2dParams, Mode,
};
use crate::losses::{self, FocalVariant, LossConfig};
use crate::tensor::{grad_check, ops, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub instances: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

struct SuiteRunner {
    rng: ChaCha8Rng,
    reports: Vec<OpReport>,
}

impl SuiteRunner {
    /// Runs `check` over `instances` seeded inputs and records the worst
    /// relative error.
    fn check<F>(&mut self, name: &'static str, instances: usize, mut check: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
    {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(check(&mut self.rng)?);
        }
        self.reports.push(OpReport {
            name,
            max_rel_err: worst,
            instances,
        });
        Ok(())
    }
}

fn random_labels(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes) as u8).collect()
}

/// Offsets kept away from integers, where the alignment kernel has kinks.
fn non_integer_offsets(rng: &mut ChaCha8Rng, h: usize, w: usize, span: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..2 * h * w)
        .map(|_| {
            let raw = rng.random::<f64>() * 2.0 * span - span;
            let frac = raw.fract().abs();
            if frac < 0.15 || frac > 0.85 {
                raw.trunc() + 0.42
            } else {
                raw
            }
        })
        .collect();
    Tensor::from_vec(vec![2, h, w], data).expect("consistent shape")
}

/// Scalar probe: sum of squares keeps the output sensitive to every element.
fn sq_sum(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    ops::sum(&ops::mul(t, t)?)
}

pub fn run_suite() -> Result<Vec<OpReport>> {
    let mut s = SuiteRunner {
        rng: seeded_rng(0xC0FFEE, 0),
        reports: Vec::new(),
    };

    // -- core tensor ops ---------------------------------------------------
    s.check("add", 10, |rng| {
        let a = uniform_tensor(rng, vec![3, 4], 2.0);
        let b = uniform_tensor(rng, vec![3, 4], 2.0);
        grad_check(|a| sq_sum(&ops::add(a, &b)?), &a, EPS)
    })?;
    s.check("mul", 10, |rng| {
        let a = uniform_tensor(rng, vec![3, 4], 2.0);
        let b = uniform_tensor(rng, vec![3, 4], 2.0);
        grad_check(|a| sq_sum(&ops::mul(a, &b)?), &a, EPS)
    })?;
    s.check("matmul", 10, |rng| {
        let a = uniform_tensor(rng, vec![3, 4], 1.5);
        let b = uniform_tensor(rng, vec![4, 5], 1.5);
        let wrt_a = grad_check(|a| sq_sum(&ops::matmul(a, &b)?), &a, EPS)?;
        let wrt_b = grad_check(|b| sq_sum(&ops::matmul(&a, b)?), &b, EPS)?;
        Ok(wrt_a.max(wrt_b))
    })?;
    s.check("exp", 10, |rng| {
        let a = uniform_tensor(rng, vec![8], 1.5);
        grad_check(|a| ops::sum(&ops::exp(a)?), &a, EPS)
    })?;
    s.check("log", 10, |rng| {
        let data: Vec<f64> = (0..8).map(|_| 0.2 + rng.random::<f64>() * 3.0).collect();
        let a = Tensor::from_vec(vec![8], data)?;
        grad_check(|a| ops::sum(&ops::log(a)?), &a, EPS)
    })?;
    s.check("abs", 10, |rng| {
        // stay away from the kink at zero
        let data: Vec<f64> = (0..8)
            .map(|_| {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                v.signum() * (0.2 + v.abs())
            })
            .collect();
        let a = Tensor::from_vec(vec![8], data)?;
        grad_check(|a| ops::sum(&ops::abs(a)?), &a, EPS)
    })?;
    s.check("relu", 10, |rng| {
        let data: Vec<f64> = (0..8)
            .map(|_| {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                v.signum() * (0.2 + v.abs())
            })
            .collect();
        let a = Tensor::from_vec(vec![8], data)?;
        grad_check(|a| sq_sum(&ops::relu(a)?), &a, EPS)
    })?;
    s.check("sum", 10, |rng| {
        let a = uniform_tensor(rng, vec![2, 3, 4], 2.0);
        grad_check(|a| ops::sum(a), &a, EPS)
    })?;
    s.check("mean", 10, |rng| {
        let a = uniform_tensor(rng, vec![2, 3, 4], 2.0);
        grad_check(|a| sq_sum(&ops::mean(a)?), &a, EPS)
    })?;
    s.check("reshape", 10, |rng| {
        let a = uniform_tensor(rng, vec![3, 4], 2.0);
        grad_check(|a| sq_sum(&ops::reshape(a, vec![2, 6])?), &a, EPS)
    })?;
    s.check("concat", 10, |rng| {
        let a = uniform_tensor(rng, vec![2, 3, 3], 2.0);
        let b = uniform_tensor(rng, vec![4, 3, 3], 2.0);
        grad_check(|a| sq_sum(&ops::concat_channels(&[a, &b])?), &a, EPS)
    })?;
    s.check("slice", 10, |rng| {
        let a = uniform_tensor(rng, vec![5, 3, 3], 2.0);
        grad_check(|a| sq_sum(&ops::slice_channels(a, 1, 4)?), &a, EPS)
    })?;
    s.check("pow", 10, |rng| {
        let data: Vec<f64> = (0..8).map(|_| 0.1 + rng.random::<f64>() * 0.8).collect();
        let a = Tensor::from_vec(vec![8], data)?;
        grad_check(|a| ops::sum(&ops::pow_const(a, 2.0)?), &a, EPS)
    })?;
    s.check("channel_softmax", 10, |rng| {
        let a = uniform_tensor(rng, vec![4, 3, 3], 3.0);
        grad_check(|a| sq_sum(&ops::channel_softmax(a)?), &a, EPS)
    })?;

    // -- layers --------------------------------------------------------------
    s.check("sigmoid", 10, |rng| {
        let a = uniform_tensor(rng, vec![3, 4], 3.0);
        grad_check(|a| sq_sum(&ops::sigmoid(a)?), &a, EPS)
    })?;
    s.check("conv2d", 12, |rng| {
        let stride = 1 + rng.random_range(0..2usize);
        let k = if rng.random::<f64>() < 0.5 { 1 } else { 3 };
        let pad = if k == 3 { 1 } else { 0 };
        let x = uniform_tensor(rng, vec![2, 2, 5, 5], 1.5);
        let w = uniform_tensor(rng, vec![3, 2, k, k], 1.0);
        let b = uniform_tensor(rng, vec![3], 0.5);
        let mk = |w: &Tensor<f64>, b: &Tensor<f64>| {
            Conv2dParams::new(w.clone(), b.clone(), stride, pad)
        };
        let e1 = grad_check(|x| sq_sum(&conv2d(x, &mk(&w, &b)?)?), &x, EPS)?;
        let e2 = grad_check(|w| sq_sum(&conv2d(&x, &mk(w, &b)?)?), &w, EPS)?;
        let e3 = grad_check(|b| sq_sum(&conv2d(&x, &mk(&w, b)?)?), &b, EPS)?;
        Ok(e1.max(e2).max(e3))
    })?;
    s.check("batchnorm", 12, |rng| {
        let x = uniform_tensor(rng, vec![2, 3, 3, 3], 2.0);
        let gamma = uniform_tensor(rng, vec![3], 1.0);
        let beta = uniform_tensor(rng, vec![3], 1.0);
        let mk = |gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let p = BatchNormParams::identity(3);
            BatchNormParams {
                gamma: gamma.clone(),
                beta: beta.clone(),
                ..p
            }
        };
        let e1 = grad_check(|x| sq_sum(&batchnorm(x, &mk(&gamma, &beta), Mode::Train)?), &x, EPS)?;
        let e2 = grad_check(
            |g| sq_sum(&batchnorm(&x, &mk(g, &beta), Mode::Train)?),
            &gamma,
            EPS,
        )?;
        let e3 = grad_check(
            |b| sq_sum(&batchnorm(&x, &mk(&gamma, b), Mode::Train)?),
            &beta,
            EPS,
        )?;
        Ok(e1.max(e2).max(e3))
    })?;
    s.check("bilinear_interpolate", 10, |rng| {
        let a = uniform_tensor(rng, vec![2, 3, 4], 2.0);
        grad_check(|a| sq_sum(&bilinear_interpolate(a, 5, 7)?), &a, EPS)
    })?;

    // -- alignment -------------------------------------------------------
    s.check("feature_align_features", 10, |rng| {
        let x = uniform_tensor(rng, vec![2, 4, 4], 2.0);
        let off = non_integer_offsets(rng, 4, 4, 2.0);
        grad_check(|x| sq_sum(&hfam::feature_align(x, &off)?), &x, EPS)
    })?;
    s.check("feature_align_offsets", 10, |rng| {
        let x = uniform_tensor(rng, vec![2, 4, 4], 2.0);
        let off = non_integer_offsets(rng, 4, 4, 2.0);
        grad_check(|off| sq_sum(&hfam::feature_align(&x, off)?), &off, EPS)
    })?;

    // -- distillation ------------------------------------------------------
    s.check("tsoftmax", 10, |rng| {
        let q = uniform_tensor(rng, vec![3, 3, 3], 3.0);
        grad_check(|q| sq_sum(&hfdm::tsoftmax(q, 5.0)?), &q, EPS)
    })?;
    s.check("distillation_loss", 10, |rng| {
        let q_t = uniform_tensor(rng, vec![3, 3, 3], 2.0);
        let q_s = uniform_tensor(rng, vec![3, 3, 3], 2.0);
        grad_check(|q_s| hfdm::distillation_loss(&q_t, q_s, 5.0), &q_s, EPS)
    })?;

    // -- losses --------------------------------------------------------------
    s.check("cross_entropy", 10, |rng| {
        let m = uniform_tensor(rng, vec![3, 3, 3], 2.0);
        let y = random_labels(rng, 3, 9);
        grad_check(|m| losses::cross_entropy(m, &y), &m, EPS)
    })?;
    s.check("focal_loss_standard", 10, |rng| {
        let m = uniform_tensor(rng, vec![3, 3, 3], 2.0);
        let y = random_labels(rng, 3, 9);
        let cfg = LossConfig::default();
        grad_check(|m| losses::focal_loss(m, &y, &cfg), &m, EPS)
    })?;
    s.check("focal_loss_literal", 10, |rng| {
        let m = uniform_tensor(rng, vec![3, 3, 3], 2.0);
        let y = random_labels(rng, 3, 9);
        let cfg = LossConfig {
            focal_variant: FocalVariant::Literal,
            ..LossConfig::default()
        };
        grad_check(|m| losses::focal_loss(m, &y, &cfg), &m, EPS)
    })?;
    s.check("total_loss", 10, |rng| {
        // 8×8 instances: the map is driven from the distilled stack so both
        // loss terms propagate through the same variable.
        let q_t = uniform_tensor(rng, vec![2, 8, 8], 2.0);
        let q_s = uniform_tensor(rng, vec![2, 8, 8], 2.0);
        let y = random_labels(rng, 2, 64);
        let cfg = LossConfig::default();
        grad_check(
            |q_s| {
                let m = bilinear_interpolate(q_s, 8, 8)?;
                losses::total_loss(&m, &y, &q_t, q_s, &cfg)
            },
            &q_s,
            EPS,
        )
    })?;

    // -- end to end ----------------------------------------------------------
    s.check("backbone_seg_loss", 2, |rng| {
        let backbone = SegBackbone::<f64>::init(rng, 2);
        let y = random_labels(rng, 2, 16 * 16);
        let cfg = LossConfig::default();
        let x0 = {
            let raw = uniform_tensor::<f64>(rng, vec![1, 1, 16, 16], 0.5);
            ops::affine(&raw, 1.0, 0.5)?
        };
        grad_check(
            |x| {
                let (_, q) = crate::backbone::backbone_forward(x, &backbone, Mode::Train)?;
                let m = layers::bilinear_interpolate(&q, 16, 16)?;
                losses::seg_loss(&m, &y, &cfg)
            },
            &x0,
            EPS,
        )
    })?;

    Ok(s.reports)
}
