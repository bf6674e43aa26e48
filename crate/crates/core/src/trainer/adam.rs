use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters; β₁ = 0.5 here, following the training recipe.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count for one parameter tensor.
pub struct AdamState<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
    t: u32,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![S::zero(); numel],
            v: vec![S::zero(); numel],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }
}

/// One bias-corrected Adam update. The parameter is replaced by a fresh
/// untracked tensor; `name` identifies the parameter in abort messages.
pub fn adam_step<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &[S],
    state: &mut AdamState<S>,
    hyper: &AdamParams,
    lr: f64,
    name: &str,
) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "gradient length {} does not match parameter {} ({})",
                grad.len(),
                param.numel(),
                name
            ),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of parameter {name}"),
        });
    }
    state.t += 1;
    let b1 = S::of(hyper.beta1);
    let b2 = S::of(hyper.beta2);
    let eps = S::of(hyper.eps);
    let corr1 = S::of(1.0 - hyper.beta1.powi(state.t as i32));
    let corr2 = S::of(1.0 - hyper.beta2.powi(state.t as i32));
    let lr = S::of(lr);

    let mut next = param.data().to_vec();
    for i in 0..next.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        next[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    *param = Tensor::from_vec(param.shape().to_vec(), next)?;
    Ok(())
}
