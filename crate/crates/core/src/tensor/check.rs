//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, element by element. Returns the maximum relative
/// error `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
///
/// Run this at f64: central differences lose too many digits at f32.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    let tape = Tape::new();
    let tracked = tape.var(x);
    let y = f(&tracked)?;
    if y.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function returned shape {:?}, expected scalar", y.shape()),
        ));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check: f(x)".to_string(),
        });
    }
    tape.backward(&y)?;
    let analytic = match tape.grad(&tracked) {
        Some(g) => g.data().to_vec(),
        None => vec![S::zero(); x.numel()],
    };

    let base = x.data().to_vec();
    let mut max_err = S::zero();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus)?)?.item();
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus)?)?.item();
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check: f(x ± eps) at element {i}"),
            });
        }
        let numeric = (fp - fm) / (eps + eps);
        let denom = S::one().max(analytic[i].abs() + numeric.abs());
        let err = (analytic[i] - numeric).abs() / denom;
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
