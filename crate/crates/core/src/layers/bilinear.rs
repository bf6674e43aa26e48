use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::record_op;
use crate::tensor::{BackwardRule, BwdCtx, Tensor};

/// Sampling positions along one axis under align-corners mapping:
/// src = dst · (in − 1) / (out − 1), corners map to corners exactly.
fn axis_taps<S: Scalar>(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, S)> {
    let scale = if out_dim > 1 {
        S::of_usize(in_dim - 1) / S::of_usize(out_dim - 1)
    } else {
        S::zero()
    };
    (0..out_dim)
        .map(|d| {
            let src = S::of_usize(d) * scale;
            let lo = src.floor().as_f64() as usize;
            let t = src - S::of_usize(lo);
            let hi = if t > S::zero() { lo + 1 } else { lo };
            (lo, hi, t)
        })
        .collect()
}

/// Resizes the trailing two axes of a C×H×W or B×C×H×W tensor by bilinear
/// interpolation with align-corners sampling.
pub fn bilinear_interpolate<S: Scalar>(
    x: &Tensor<S>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<S>> {
    if x.rank() < 3 {
        return Err(Error::invalid(
            "bilinear_interpolate",
            format!("input must be at least rank 3, got {:?}", x.shape()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bilinear_interpolate",
            "output extents must be positive",
        ));
    }
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2), x.dim(rank - 1));
    let planes: usize = x.shape()[..rank - 2].iter().product();

    let ys = axis_taps::<S>(h, out_h);
    let xs = axis_taps::<S>(w, out_w);

    let src = x.data();
    let mut out = vec![S::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(r0, r1, tr)) in ys.iter().enumerate() {
            let row0 = &plane[r0 * w..(r0 + 1) * w];
            let row1 = &plane[r1 * w..(r1 + 1) * w];
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, &(c0, c1, tc)) in xs.iter().enumerate() {
                let top = row0[c0] + tc * (row0[c1] - row0[c0]);
                let bot = row1[c0] + tc * (row1[c1] - row1[c0]);
                drow[ox] = top + tr * (bot - top);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    record_op(
        "bilinear_interpolate",
        &[x],
        shape,
        out,
        Box::new(BilinearScatterBwd {
            ys,
            xs,
            in_h: h,
            in_w: w,
        }),
    )
}

struct BilinearScatterBwd<S: Scalar> {
    ys: Vec<(usize, usize, S)>,
    xs: Vec<(usize, usize, S)>,
    in_h: usize,
    in_w: usize,
}

impl<S: Scalar> BackwardRule<S> for BilinearScatterBwd<S> {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        if !ctx.needs(0) {
            return;
        }
        let (h, w) = (self.in_h, self.in_w);
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let planes = ctx.out_grad.len() / (oh * ow);
        let g = ctx.out_grad;
        let mut dx = vec![S::zero(); planes * h * w];
        for p in 0..planes {
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            let dxp = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, &(r0, r1, tr)) in self.ys.iter().enumerate() {
                for (ox, &(c0, c1, tc)) in self.xs.iter().enumerate() {
                    let gv = gp[oy * ow + ox];
                    let one = S::one();
                    dxp[r0 * w + c0] += gv * (one - tr) * (one - tc);
                    dxp[r0 * w + c1] += gv * (one - tr) * tc;
                    dxp[r1 * w + c0] += gv * tr * (one - tc);
                    dxp[r1 * w + c1] += gv * tr * tc;
                }
            }
        }
        ctx.add_grad(0, dx);
    }
}
