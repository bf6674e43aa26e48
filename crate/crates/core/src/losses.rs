//! Segmentation losses: per-pixel cross-entropy, focal loss, their sum, and
//! the total student loss with the distillation term. Predicted maps enter
//! as logits and are converted through a stabilized channel softmax; losses
//! average over pixels (and over the batch for rank-4 inputs) so magnitudes
//! are resolution-independent.

use crate::error::{Error, Result};
use crate::hfdm;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Which modulating factor the focal loss applies.
///
/// `Standard` is (1 − p_true)^γ, the form of the usual focal-loss
/// formulation. `Literal` keeps the one-hot mask inside the factor,
/// (1 − p_true·e⁻¹)^γ, so only true-class channels contribute with the
/// extra e⁻¹ damping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocalVariant {
    Standard,
    Literal,
}

impl std::str::FromStr for FocalVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(FocalVariant::Standard),
            "literal" => Ok(FocalVariant::Literal),
            other => Err(Error::Config(format!(
                "unknown focal variant {other:?}; expected standard or literal"
            ))),
        }
    }
}

impl std::fmt::Display for FocalVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FocalVariant::Standard => "standard",
            FocalVariant::Literal => "literal",
        })
    }
}

/// Loss hyperparameters; defaults follow the training recipe (α=0.5, γ=2,
/// λ=25, T=5).
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub focal_variant: FocalVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            gamma: 2.0,
            lambda: 25.0,
            temperature: 5.0,
            focal_variant: FocalVariant::Standard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Stabilized per-pixel class probabilities from a logit map.
pub fn softmax_probs<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    ops::channel_softmax(logits)
}

/// True-class probability map: softmax the logits and gather the channel
/// named by each pixel's label.
fn true_class_probs<S: Scalar>(logits: &Tensor<S>, labels: &[u8]) -> Result<Tensor<S>> {
    let probs = softmax_probs(logits)?;
    ops::select_class(&probs, labels)
}

/// Mean over pixels of −ln p_true.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[u8]) -> Result<Tensor<S>> {
    let pt = true_class_probs(logits, labels)?;
    let nll = ops::neg(&ops::log_clamped(&pt, S::of(hfdm::LOG_FLOOR))?)?;
    ops::mean(&nll)
}

/// Mean over pixels of α·(modulating factor)^γ·(−ln p_true); see
/// [`FocalVariant`] for the factor.
pub fn focal_loss<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    let pt = true_class_probs(logits, labels)?;
    let nll = ops::neg(&ops::log_clamped(&pt, S::of(hfdm::LOG_FLOOR))?)?;
    let factor_scale = match cfg.focal_variant {
        FocalVariant::Standard => -S::one(),
        FocalVariant::Literal => S::of(-(-1.0f64).exp()),
    };
    let base = ops::affine(&pt, factor_scale, S::one())?;
    let modulated = ops::mul(&ops::pow_const(&base, cfg.gamma)?, &nll)?;
    ops::affine(&ops::mean(&modulated)?, S::of(cfg.alpha), S::zero())
}

/// Basic segmentation loss: cross-entropy plus focal.
pub fn seg_loss<S: Scalar>(logits: &Tensor<S>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<S>> {
    let ce = cross_entropy(logits, labels)?;
    let focal = focal_loss(logits, labels, cfg)?;
    ops::add(&ce, &focal)
}

/// Total student loss: seg_loss + λ · distillation loss on the feature
/// stacks.
pub fn total_loss<S: Scalar>(
    student_logits: &Tensor<S>,
    labels: &[u8],
    q_teacher: &Tensor<S>,
    q_student: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    let seg = seg_loss(student_logits, labels, cfg)?;
    let distill = hfdm::distillation_loss(q_teacher, q_student, cfg.temperature)?;
    ops::add(&seg, &ops::affine(&distill, S::of(cfg.lambda), S::zero())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{seeded_rng, uniform_tensor};
    use crate::tensor::grad_check;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let m = Tensor::<f64>::full(vec![4, 2, 2], 1.3);
        let probs = softmax_probs(&m).unwrap();
        for &v in probs.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_saturates() {
        let m = t64(&[2, 1, 1], &[100.0, 0.0]);
        let probs = softmax_probs(&m).unwrap();
        assert!(probs.data()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn probs_sum_to_one() {
        let mut rng = seeded_rng(31, 0);
        let m = uniform_tensor::<f64>(&mut rng, vec![5, 3, 3], 10.0);
        let probs = softmax_probs(&m).unwrap();
        for p in 0..9 {
            let total: f64 = (0..5).map(|c| probs.data()[c * 9 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        let m = t64(&[2, 1, 2], &[60.0, -60.0, -60.0, 60.0]);
        let ce = cross_entropy(&m, &[0, 1]).unwrap().item();
        assert!(ce.abs() < 1e-9, "{ce}");
    }

    #[test]
    fn uniform_prediction_costs_ln_k() {
        for k in [2usize, 5] {
            let m = Tensor::<f64>::zeros(vec![k, 3, 3]);
            let ce = cross_entropy(&m, &vec![0u8; 9]).unwrap().item();
            assert!((ce - (k as f64).ln()).abs() < 1e-12, "K={k}: {ce}");
        }
    }

    #[test]
    fn cross_entropy_two_class_example() {
        // p_true = 0.8 at every pixel: −ln 0.8 ≈ 0.2231.
        let logit = (0.8f64 / 0.2).ln();
        let m = t64(&[2, 1, 2], &[logit, logit, 0.0, 0.0]);
        let ce = cross_entropy(&m, &[0, 0]).unwrap().item();
        assert!((ce - 0.22314355).abs() < 1e-7, "{ce}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let m = Tensor::<f64>::zeros(vec![2, 2, 2]);
        let err = cross_entropy(&m, &[0, 1, 2, 0]).unwrap_err().to_string();
        assert!(err.contains("label 2"), "{err}");
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let mut rng = seeded_rng(32, 0);
        let m = uniform_tensor::<f64>(&mut rng, vec![3, 2, 2], 3.0);
        let shifted = ops::affine(&m, 1.0, 17.5).unwrap();
        let labels = [0u8, 2, 1, 0];
        let a = cross_entropy(&m, &labels).unwrap().item();
        let b = cross_entropy(&shifted, &labels).unwrap().item();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn focal_with_gamma_zero_alpha_one_equals_cross_entropy() {
        let mut rng = seeded_rng(33, 0);
        let m = uniform_tensor::<f64>(&mut rng, vec![3, 3, 3], 3.0);
        let labels: Vec<u8> = (0..9).map(|i| (i % 3) as u8).collect();
        let cfg = LossConfig {
            alpha: 1.0,
            gamma: 0.0,
            ..LossConfig::default()
        };
        let f = focal_loss(&m, &labels, &cfg).unwrap().item();
        let ce = cross_entropy(&m, &labels).unwrap().item();
        assert!((f - ce).abs() < 1e-12, "{f} vs {ce}");
    }

    #[test]
    fn focal_is_zero_for_certain_predictions() {
        let m = t64(&[2, 1, 1], &[80.0, -80.0]);
        let f = focal_loss(&m, &[0], &LossConfig::default()).unwrap().item();
        assert!(f.abs() < 1e-12, "{f}");
    }

    #[test]
    fn focal_two_class_example() {
        // α=0.5, γ=2, p_true=0.8: 0.5 · 0.2² · (−ln 0.8) ≈ 0.004463.
        let logit = (0.8f64 / 0.2).ln();
        let m = t64(&[2, 1, 1], &[logit, 0.0]);
        let f = focal_loss(&m, &[0], &LossConfig::default()).unwrap().item();
        assert!((f - 0.0044628711).abs() < 1e-8, "{f}");
    }

    #[test]
    fn focal_literal_variant_uses_damped_factor() {
        // factor (1 − p·e⁻¹)^γ at p = 0.8, γ = 2, α = 0.5.
        let logit = (0.8f64 / 0.2).ln();
        let m = t64(&[2, 1, 1], &[logit, 0.0]);
        let cfg = LossConfig {
            focal_variant: FocalVariant::Literal,
            ..LossConfig::default()
        };
        let f = focal_loss(&m, &[0], &cfg).unwrap().item();
        let factor = 1.0 - 0.8 * (-1.0f64).exp();
        let expect = 0.5 * factor * factor * -(0.8f64.ln());
        assert!((f - expect).abs() < 1e-9, "{f} vs {expect}");
    }

    #[test]
    fn focal_never_exceeds_alpha_times_cross_entropy() {
        let mut rng = seeded_rng(34, 0);
        for _ in 0..20 {
            let m = uniform_tensor::<f64>(&mut rng, vec![4, 2, 2], 4.0);
            let labels: Vec<u8> = (0..4).map(|i| (i % 4) as u8).collect();
            let cfg = LossConfig::default();
            let f = focal_loss(&m, &labels, &cfg).unwrap().item();
            let ce = cross_entropy(&m, &labels).unwrap().item();
            assert!(f <= cfg.alpha * ce + 1e-12, "{f} vs {}", cfg.alpha * ce);
        }
    }

    #[test]
    fn seg_loss_is_sum_of_parts() {
        let mut rng = seeded_rng(35, 0);
        let m = uniform_tensor::<f64>(&mut rng, vec![3, 2, 2], 2.0);
        let labels = [1u8, 0, 2, 1];
        let cfg = LossConfig::default();
        let sum = seg_loss(&m, &labels, &cfg).unwrap().item();
        let parts = cross_entropy(&m, &labels).unwrap().item()
            + focal_loss(&m, &labels, &cfg).unwrap().item();
        assert!((sum - parts).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_seg_loss() {
        let m = t64(&[2, 1, 2], &[80.0, -80.0, -80.0, 80.0]);
        let loss = seg_loss(&m, &[0, 1], &LossConfig::default()).unwrap().item();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn total_loss_reduces_to_seg_loss_at_lambda_zero() {
        let mut rng = seeded_rng(36, 0);
        let m = uniform_tensor::<f64>(&mut rng, vec![2, 2, 2], 2.0);
        let q_t = uniform_tensor::<f64>(&mut rng, vec![2, 2, 2], 2.0);
        let q_s = uniform_tensor::<f64>(&mut rng, vec![2, 2, 2], 2.0);
        let labels = [0u8, 1, 1, 0];
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let total = total_loss(&m, &labels, &q_t, &q_s, &cfg).unwrap().item();
        let seg = seg_loss(&m, &labels, &cfg).unwrap().item();
        assert_eq!(total, seg);
    }

    #[test]
    fn total_loss_is_affine_in_lambda() {
        let mut rng = seeded_rng(37, 0);
        let m = uniform_tensor::<f64>(&mut rng, vec![2, 2, 2], 2.0);
        let q_t = uniform_tensor::<f64>(&mut rng, vec![2, 2, 2], 2.0);
        let q_s = uniform_tensor::<f64>(&mut rng, vec![2, 2, 2], 2.0);
        let labels = [0u8, 1, 1, 0];
        let at = |lambda: f64| {
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            total_loss(&m, &labels, &q_t, &q_s, &cfg).unwrap().item()
        };
        let ld = crate::hfdm::distillation_loss(&q_t, &q_s, 5.0).unwrap().item();
        let (l0, l25) = (at(0.0), at(25.0));
        assert!((l25 - l0 - 25.0 * ld).abs() < 1e-9);
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(38, 0);
        let m0 = uniform_tensor::<f64>(&mut rng, vec![3, 3, 3], 2.0);
        let labels: Vec<u8> = (0..9).map(|i| ((i * 2) % 3) as u8).collect();
        let cfg = LossConfig::default();
        let err = grad_check(|m| seg_loss(m, &labels, &cfg), &m0, 1e-5).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(39, 0);
        let q_t = uniform_tensor::<f64>(&mut rng, vec![2, 8, 8], 2.0);
        let q_s0 = uniform_tensor::<f64>(&mut rng, vec![2, 8, 8], 2.0);
        let labels: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let cfg = LossConfig::default();
        // Drive both the segmentation head and the distillation term from
        // the same stack so the check covers the combined gradient.
        let err = grad_check(
            |q_s| {
                let m = crate::layers::bilinear_interpolate(q_s, 8, 8)?;
                total_loss(&m, &labels, &q_t, q_s, &cfg)
            },
            &q_s0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
