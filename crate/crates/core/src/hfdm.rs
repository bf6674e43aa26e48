//! Heterogeneous feature distillation: squash feature stacks through a
//! sigmoid, convert them to per-pixel channel distributions with a tempered
//! softmax, and penalize the student's cross-entropy against the (frozen)
//! teacher distribution.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Probabilities below this floor are clamped before the log; with the
/// softmax stabilization this never fires at T ≥ 1 in practice.
pub const LOG_FLOOR: f64 = 1e-12;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of clamped log arguments since the last call; training loops poll
/// this into their run diagnostics.
pub fn take_clamp_events() -> u64 {
    CLAMP_EVENTS.swap(0, Ordering::Relaxed)
}

/// Tempered channel softmax over already-normalized maps:
/// exp(x/T) / Σ_channels exp(x/T), per pixel. T=1 is the plain softmax.
pub fn tempered_softmax<S: Scalar>(qbar: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    if temperature <= 0.0 {
        return Err(Error::Domain {
            op: "tsoftmax",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let scaled = ops::affine(qbar, S::of(1.0 / temperature), S::zero())?;
    ops::channel_softmax(&scaled)
}

/// Sigmoid normalization followed by the tempered channel softmax; maps a
/// feature stack to a per-pixel probability stack (channels sum to one at
/// every pixel).
pub fn tsoftmax<S: Scalar>(q: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    tempered_softmax(&ops::sigmoid(q)?, temperature)
}

/// Cross-entropy of the student probability stack against the teacher's:
/// −(1/C_q) · Σ_c Σ_ij  t̂_c(i,j) · ln ŝ_c(i,j), averaged over the batch for
/// rank-4 inputs. No gradient flows to the teacher branch.
pub fn distillation_loss<S: Scalar>(
    q_teacher: &Tensor<S>,
    q_student: &Tensor<S>,
    temperature: f64,
) -> Result<Tensor<S>> {
    if q_teacher.shape() != q_student.shape() {
        return Err(Error::ShapeMismatch {
            op: "distillation_loss",
            lhs: q_teacher.shape().to_vec(),
            rhs: q_student.shape().to_vec(),
        });
    }
    let (channels, batch) = match q_student.rank() {
        3 => (q_student.dim(0), 1),
        4 => (q_student.dim(1), q_student.dim(0)),
        _ => {
            return Err(Error::invalid(
                "distillation_loss",
                format!("expected rank 3 or 4 stacks, got {:?}", q_student.shape()),
            ))
        }
    };
    let t_probs = tsoftmax(&q_teacher.detach(), temperature)?;
    let s_probs = tsoftmax(q_student, temperature)?;

    let floor = S::of(LOG_FLOOR);
    let clamped = s_probs.data().iter().filter(|&&v| v <= floor).count();
    if clamped > 0 {
        CLAMP_EVENTS.fetch_add(clamped as u64, Ordering::Relaxed);
    }
    let log_s = ops::log_clamped(&s_probs, floor)?;
    let agreement = ops::sum(&ops::mul(&t_probs, &log_s)?)?;
    ops::affine(
        &agreement,
        S::of(-1.0 / (channels * batch) as f64),
        S::zero(),
    )
}
