//! Heterogeneous feature alignment: a dual-stream offset predictor plus an
//! element-level warp. Each output element samples its input map at
//! (i + Δ₁(i,j), j + Δ₂(i,j)) under a 2×2 triangular kernel
//! max(0, 1−|·|) · max(0, 1−|·|); samples outside the grid contribute zero,
//! so the warp equals the full double sum over all source positions.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{batchnorm, bilinear_interpolate, conv2d, BatchNormParams, Conv2dParams, Mode};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, record_op};
use crate::tensor::{BackwardRule, BwdCtx, Tensor};

/// conv1×1 → batchnorm → ReLU → conv3×3, emitting a two-channel offset field.
pub struct OffsetStream<S: Scalar> {
    pub conv1: Conv2dParams<S>,
    pub bn: BatchNormParams<S>,
    pub conv2: Conv2dParams<S>,
}

impl<S: Scalar> OffsetStream<S> {
    /// The final 3×3 conv starts at zero so training begins from an
    /// identity warp.
    pub fn init(rng: &mut ChaCha8Rng, in_channels: usize) -> Self {
        OffsetStream {
            conv1: Conv2dParams::init(rng, 2, in_channels, 1, 1, 0),
            bn: BatchNormParams::identity(2),
            conv2: Conv2dParams::zeros(2, 2, 3, 1, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let y = conv2d(x, &self.conv1)?;
        let y = batchnorm(&y, &self.bn, mode)?;
        let y = ops::relu(&y)?;
        conv2d(&y, &self.conv2)
    }
}

/// Parameters of one alignment module: a 1×1 projection bringing the first
/// stack to the second stack's channel count, and two offset streams of
/// identical structure but independent parameters.
pub struct HfamParams<S: Scalar> {
    pub project: Conv2dParams<S>,
    pub stream_p: OffsetStream<S>,
    pub stream_q: OffsetStream<S>,
}

impl<S: Scalar> HfamParams<S> {
    pub fn init(rng: &mut ChaCha8Rng, c_p: usize, c_q: usize) -> Self {
        HfamParams {
            project: Conv2dParams::init(rng, c_q, c_p, 1, 1, 0),
            stream_p: OffsetStream::init(rng, 2 * c_q),
            stream_q: OffsetStream::init(rng, 2 * c_q),
        }
    }
}

fn ensure_batched<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, bool)> {
    match x.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Ok((ops::reshape(x, shape)?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(Error::invalid(
            "hfam",
            format!("expected rank 3 or 4 tensor, got {:?}", x.shape()),
        )),
    }
}

fn squeeze_if<S: Scalar>(x: Tensor<S>, squeeze: bool) -> Result<Tensor<S>> {
    if squeeze {
        let shape = x.shape()[1..].to_vec();
        ops::reshape(&x, shape)
    } else {
        Ok(x)
    }
}

/// 1×1 projection of the first feature stack to the second stack's channel
/// count.
pub fn project_p<S: Scalar>(p: &Tensor<S>, project: &Conv2dParams<S>) -> Result<Tensor<S>> {
    let (p4, squeeze) = ensure_batched(p)?;
    squeeze_if(conv2d(&p4, project)?, squeeze)
}

/// Runs both offset streams on the channel concatenation of the adjusted
/// first stack and the second stack; returns (Δ for p, Δ for q), each a
/// two-channel field over the shared H×W grid.
pub fn predict_offsets<S: Scalar>(
    p_adj: &Tensor<S>,
    q: &Tensor<S>,
    params: &HfamParams<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if p_adj.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_offsets",
            lhs: p_adj.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let (p4, squeeze) = ensure_batched(p_adj)?;
    let (q4, _) = ensure_batched(q)?;
    let cat = ops::concat_channels(&[&p4, &q4])?;
    let dp = params.stream_p.forward(&cat, mode)?;
    let dq = params.stream_q.forward(&cat, mode)?;
    Ok((squeeze_if(dp, squeeze)?, squeeze_if(dq, squeeze)?))
}

/// Per-pixel sampling data for one warp: floor cell and fractional weights.
struct Taps<S> {
    r0: Vec<isize>,
    c0: Vec<isize>,
    tr: Vec<S>,
    tc: Vec<S>,
}

fn compute_taps<S: Scalar>(off: &[S], h: usize, w: usize) -> Taps<S> {
    let hw = h * w;
    let mut taps = Taps {
        r0: vec![0; hw],
        c0: vec![0; hw],
        tr: vec![S::zero(); hw],
        tc: vec![S::zero(); hw],
    };
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sr = S::of_usize(i) + off[p];
            let sc = S::of_usize(j) + off[hw + p];
            let fr = sr.floor();
            let fc = sc.floor();
            taps.r0[p] = fr.as_f64() as isize;
            taps.c0[p] = fc.as_f64() as isize;
            taps.tr[p] = sr - fr;
            taps.tc[p] = sc - fc;
        }
    }
    taps
}

#[inline]
fn sample_at<S: Scalar>(plane: &[S], h: usize, w: usize, r: isize, c: isize) -> S {
    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
        S::zero()
    } else {
        plane[r as usize * w + c as usize]
    }
}

struct FeatureAlignBwd;

impl<S: Scalar> BackwardRule<S> for FeatureAlignBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        let xs = ctx.input_shape(0).to_vec();
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let x = ctx.input_value(0);
        let offs = ctx.input_value(1);
        let g = ctx.out_grad;
        let one = S::one();

        let need_x = ctx.needs(0);
        let need_off = ctx.needs(1);
        let mut dx = if need_x { vec![S::zero(); x.len()] } else { Vec::new() };
        let mut doff = if need_off { vec![S::zero(); offs.len()] } else { Vec::new() };

        for b in 0..bsz {
            let taps = compute_taps(&offs[b * 2 * hw..(b + 1) * 2 * hw], h, w);
            for ch in 0..c {
                let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let gp = &g[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for p in 0..hw {
                    let gv = gp[p];
                    if gv == S::zero() {
                        continue;
                    }
                    let (r0, c0) = (taps.r0[p], taps.c0[p]);
                    let (tr, tc) = (taps.tr[p], taps.tc[p]);
                    if need_x {
                        let dxp = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let mut scatter = |r: isize, cc: isize, wgt: S| {
                            if r >= 0 && cc >= 0 && r < h as isize && cc < w as isize {
                                dxp[r as usize * w + cc as usize] += gv * wgt;
                            }
                        };
                        scatter(r0, c0, (one - tr) * (one - tc));
                        scatter(r0, c0 + 1, (one - tr) * tc);
                        scatter(r0 + 1, c0, tr * (one - tc));
                        scatter(r0 + 1, c0 + 1, tr * tc);
                    }
                    if need_off {
                        let x00 = sample_at(plane, h, w, r0, c0);
                        let x01 = sample_at(plane, h, w, r0, c0 + 1);
                        let x10 = sample_at(plane, h, w, r0 + 1, c0);
                        let x11 = sample_at(plane, h, w, r0 + 1, c0 + 1);
                        let dsr = (x10 - x00) * (one - tc) + (x11 - x01) * tc;
                        let dsc = (x01 - x00) * (one - tr) + (x11 - x10) * tr;
                        doff[b * 2 * hw + p] += gv * dsr;
                        doff[b * 2 * hw + hw + p] += gv * dsc;
                    }
                }
            }
        }
        if need_x {
            ctx.add_grad(0, dx);
        }
        if need_off {
            ctx.add_grad(1, doff);
        }
    }
}

/// Element-level feature alignment. For each channel and output position
/// (i, j), samples the channel at (i + Δ₁(i,j), j + Δ₂(i,j)) with the 2×2
/// triangular kernel; out-of-grid samples are zero. The first offset channel
/// displaces rows, the second columns, both in pixel units.
pub fn feature_align<S: Scalar>(x: &Tensor<S>, offsets: &Tensor<S>) -> Result<Tensor<S>> {
    let (x4, squeeze) = ensure_batched(x)?;
    let (off4, _) = ensure_batched(offsets)?;
    let (bsz, c, h, w) = (x4.dim(0), x4.dim(1), x4.dim(2), x4.dim(3));
    if off4.shape() != [bsz, 2, h, w] {
        return Err(Error::ShapeMismatch {
            op: "feature_align",
            lhs: x4.shape().to_vec(),
            rhs: off4.shape().to_vec(),
        });
    }
    let hw = h * w;
    let src = x4.data();
    let offs = off4.data();
    let mut out = vec![S::zero(); src.len()];
    for b in 0..bsz {
        let taps = compute_taps(&offs[b * 2 * hw..(b + 1) * 2 * hw], h, w);
        for ch in 0..c {
            let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for p in 0..hw {
                let (r0, c0) = (taps.r0[p], taps.c0[p]);
                let (tr, tc) = (taps.tr[p], taps.tc[p]);
                let x00 = sample_at(plane, h, w, r0, c0);
                let x01 = sample_at(plane, h, w, r0, c0 + 1);
                let x10 = sample_at(plane, h, w, r0 + 1, c0);
                let x11 = sample_at(plane, h, w, r0 + 1, c0 + 1);
                let top = x00 + tc * (x01 - x00);
                let bot = x10 + tc * (x11 - x10);
                dst[p] = top + tr * (bot - top);
            }
        }
    }
    let aligned = record_op(
        "feature_align",
        &[&x4, &off4],
        x4.shape().to_vec(),
        out,
        Box::new(FeatureAlignBwd),
    )?;
    squeeze_if(aligned, squeeze)
}

/// Aligns both stacks with their predicted offsets and adds them by channel.
/// The result has the second stack's channel count at the shared H×W.
pub fn align_fuse<S: Scalar>(
    p: &Tensor<S>,
    q: &Tensor<S>,
    params: &HfamParams<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let p_adj = project_p(p, &params.project)?;
    let (dp, dq) = predict_offsets(&p_adj, q, params, mode)?;
    let p_aligned = feature_align(&p_adj, &dp)?;
    let q_aligned = feature_align(&q, &dq)?;
    ops::add(&p_aligned, &q_aligned)
}

/// Full module: align, fuse, and bilinearly interpolate the summed stack to
/// the requested output resolution, yielding a class-logit map.
pub fn hfam_forward<S: Scalar>(
    p: &Tensor<S>,
    q: &Tensor<S>,
    params: &HfamParams<S>,
    mode: Mode,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<S>> {
    let fused = align_fuse(p, q, params, mode)?;
    bilinear_interpolate(&fused, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{seeded_rng, uniform_tensor};
    use crate::tensor::grad_check;
    use rand::Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct evaluation of the full double sum over every source position;
    /// the oracle the 2×2-tap implementation must match.
    pub(crate) fn brute_force_align(x: &Tensor<f64>, off: &Tensor<f64>) -> Vec<f64> {
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let d1 = off.data()[i * w + j];
                    let d2 = off.data()[hw + i * w + j];
                    let mut acc = 0.0;
                    for hh in 0..h {
                        for ww in 0..w {
                            let kr = (1.0 - (i as f64 + d1 - hh as f64).abs()).max(0.0);
                            let kc = (1.0 - (j as f64 + d2 - ww as f64).abs()).max(0.0);
                            acc += x.data()[ch * hw + hh * w + ww] * kr * kc;
                        }
                    }
                    out[ch * hw + i * w + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_offsets_are_exact_identity() {
        let mut rng = seeded_rng(41, 0);
        let x = uniform_tensor::<f64>(&mut rng, vec![3, 5, 5], 2.0);
        let off = Tensor::zeros(vec![2, 5, 5]);
        let y = feature_align(&x, &off).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn unit_row_shift_matches_brute_force() {
        let x = t64(
            &[1, 3, 3],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let mut off_data = vec![0.0; 2 * 9];
        for v in off_data.iter_mut().take(9) {
            *v = 1.0;
        }
        let off = t64(&[2, 3, 3], &off_data);
        let y = feature_align(&x, &off).unwrap();
        // Row i samples row i+1; the last row samples outside the grid.
        assert_eq!(
            y.data(),
            &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(y.data(), &brute_force_align(&x, &off)[..]);
    }

    #[test]
    fn half_offset_averages_vertical_neighbors() {
        let x = t64(
            &[1, 3, 3],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let mut off_data = vec![0.0; 2 * 9];
        off_data[4] = 0.5; // center pixel, row offset only
        let off = t64(&[2, 3, 3], &off_data);
        let y = feature_align(&x, &off).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), (5.0 + 8.0) / 2.0);
        assert_eq!(y.at(&[0, 0, 0]), 1.0);
    }

    #[test]
    fn two_tap_kernel_matches_double_sum_on_random_instances() {
        let mut rng = seeded_rng(42, 0);
        for _ in 0..50 {
            let x = uniform_tensor::<f64>(&mut rng, vec![2, 5, 5], 3.0);
            let off_data: Vec<f64> = (0..2 * 25)
                .map(|_| rng.random::<f64>() * 6.0 - 3.0)
                .collect();
            let off = t64(&[2, 5, 5], &off_data);
            let fast = feature_align(&x, &off).unwrap();
            let slow = brute_force_align(&x, &off);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn align_is_linear_in_features() {
        let mut rng = seeded_rng(43, 0);
        let x = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 1.0);
        let y = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 1.0);
        let off = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 1.5);
        let (a, b) = (2.5, -0.7);
        let combo = ops::add(
            &ops::affine(&x, a, 0.0).unwrap(),
            &ops::affine(&y, b, 0.0).unwrap(),
        )
        .unwrap();
        let lhs = feature_align(&combo, &off).unwrap();
        let rhs = ops::add(
            &ops::affine(&feature_align(&x, &off).unwrap(), a, 0.0).unwrap(),
            &ops::affine(&feature_align(&y, &off).unwrap(), b, 0.0).unwrap(),
        )
        .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn align_preserves_zero() {
        let mut rng = seeded_rng(44, 0);
        let x = Tensor::<f64>::zeros(vec![3, 4, 4]);
        let off = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 5.0);
        let y = feature_align(&x, &off).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_offsets_stay_in_neighborhood_hull() {
        // For |Δ| < 1 every sample is a convex combination over its 2×2
        // support, so interior outputs stay within the local value range
        // (zero joins the hull at grid borders).
        let mut rng = seeded_rng(45, 0);
        let x = uniform_tensor::<f64>(&mut rng, vec![1, 6, 6], 2.0);
        let off_data: Vec<f64> = (0..2 * 36)
            .map(|_| rng.random::<f64>() * 1.8 - 0.9)
            .collect();
        let off = t64(&[2, 6, 6], &off_data);
        let y = feature_align(&x, &off).unwrap();
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = x
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);
        for &v in y.data() {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(46, 0);
        let x0 = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 2.0);
        // Non-integer offsets: the kernel has kinks at integers.
        let off_data: Vec<f64> = (0..2 * 16)
            .map(|_| {
                let raw = rng.random::<f64>() * 4.0 - 2.0;
                let frac = raw.fract().abs();
                if frac < 0.1 || frac > 0.9 {
                    raw.trunc() + 0.37
                } else {
                    raw
                }
            })
            .collect();
        let off0 = t64(&[2, 4, 4], &off_data);

        let off = off0.clone();
        let err = grad_check(
            |x| {
                let y = feature_align(x, &off)?;
                ops::sum(&ops::mul(&y, &y)?)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "d/dx err = {err}");

        let x = x0.clone();
        let err = grad_check(
            |off| {
                let y = feature_align(&x, off)?;
                ops::sum(&ops::mul(&y, &y)?)
            },
            &off0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "d/dΔ err = {err}");
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let c = 3;
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        let proj = Conv2dParams::new(
            Tensor::from_vec(vec![c, c, 1, 1], w).unwrap(),
            Tensor::zeros(vec![c]),
            1,
            0,
        )
        .unwrap();
        let mut rng = seeded_rng(47, 0);
        let p = uniform_tensor::<f64>(&mut rng, vec![c, 4, 4], 2.0);
        let out = project_p(&p, &proj).unwrap();
        for (a, b) in out.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let mut rng = seeded_rng(48, 0);
        let params = HfamParams::<f64>::init(&mut rng, 4, 2);
        let p = Tensor::zeros(vec![4, 4, 4]);
        let out = project_p(&p, &params.project).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0), "bias is zero-initialized");
    }

    #[test]
    fn zero_streams_predict_zero_offsets() {
        let mut rng = seeded_rng(49, 0);
        let mut params = HfamParams::<f64>::init(&mut rng, 2, 2);
        params.stream_p.conv1 = Conv2dParams::zeros(2, 4, 1, 1, 0);
        params.stream_q.conv1 = Conv2dParams::zeros(2, 4, 1, 1, 0);
        let p_adj = uniform_tensor::<f64>(&mut rng, vec![1, 2, 4, 4], 1.0);
        let q = uniform_tensor::<f64>(&mut rng, vec![1, 2, 4, 4], 1.0);
        let (dp, dq) = predict_offsets(&p_adj, &q, &params, Mode::Train).unwrap();
        assert!(dp.data().iter().all(|&v| v == 0.0));
        assert!(dq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offset_fields_are_two_channel_for_any_width() {
        let mut rng = seeded_rng(50, 0);
        for c_q in [2usize, 5, 7] {
            let params = HfamParams::<f64>::init(&mut rng, 3, c_q);
            let p = uniform_tensor::<f64>(&mut rng, vec![2, 3, 6, 6], 1.0);
            let q = uniform_tensor::<f64>(&mut rng, vec![2, c_q, 6, 6], 1.0);
            let p_adj = project_p(&p, &params.project).unwrap();
            let (dp, dq) = predict_offsets(&p_adj, &q, &params, Mode::Train).unwrap();
            assert_eq!(dp.shape(), &[2, 2, 6, 6]);
            assert_eq!(dq.shape(), &[2, 2, 6, 6]);
        }
    }

    #[test]
    fn fresh_module_starts_as_identity_fusion() {
        // The final stream convs are zero-initialized, so a fresh module
        // collapses to interpolate(p_adj + q).
        let mut rng = seeded_rng(51, 0);
        let params = HfamParams::<f64>::init(&mut rng, 3, 2);
        let p = uniform_tensor::<f64>(&mut rng, vec![1, 3, 4, 4], 1.0);
        let q = uniform_tensor::<f64>(&mut rng, vec![1, 2, 4, 4], 1.0);
        let m = hfam_forward(&p, &q, &params, Mode::Train, 8, 8).unwrap();
        assert_eq!(m.shape(), &[1, 2, 8, 8]);
        let p_adj = project_p(&p, &params.project).unwrap();
        let direct =
            bilinear_interpolate(&ops::add(&p_adj, &q).unwrap(), 8, 8).unwrap();
        for (a, b) in m.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_path_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(52, 0);
        let params = {
            let mut p = HfamParams::<f64>::init(&mut rng, 2, 2);
            // Non-zero final convs so offset gradients are exercised.
            p.stream_p.conv2 = Conv2dParams::init(&mut rng, 2, 2, 3, 1, 1);
            p.stream_q.conv2 = Conv2dParams::init(&mut rng, 2, 2, 3, 1, 1);
            p
        };
        let q = uniform_tensor::<f64>(&mut rng, vec![1, 2, 4, 4], 1.0);
        let p0 = uniform_tensor::<f64>(&mut rng, vec![1, 2, 4, 4], 1.0);
        let err = grad_check(
            |p| {
                let m = hfam_forward(p, &q, &params, Mode::Train, 8, 8)?;
                ops::sum(&ops::mul(&m, &m)?)
            },
            &p0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
