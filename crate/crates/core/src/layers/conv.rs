use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::ops::record_op;
use crate::tensor::{BackwardRule, BwdCtx, Tensor};

/// Weights for one 2-D convolution: C_out×C_in×k×k kernel plus per-channel
/// bias. Kernels here are 1×1 or 3×3; 3×3 layers use padding 1 so stride-1
/// convolutions preserve spatial size.
#[derive(Clone)]
pub struct Conv2dParams<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2dParams<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be C_out×C_in×k×k, got {:?}", weight.shape()),
            ));
        }
        if weight.dim(2) != weight.dim(3) {
            return Err(Error::invalid("conv2d", "kernel must be square"));
        }
        if bias.shape() != [weight.dim(0)] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: bias.shape().to_vec(),
                rhs: vec![weight.dim(0)],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(2)
    }
}

fn out_dim(extent: usize, k: usize, pad: usize, stride: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Unpacks one sample's receptive fields into a (C_in·k·k)×(oh·ow) matrix.
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let n = oh * ow;
    debug_assert_eq!(col.len(), cin * k * k * n);
    for ic in 0..cin {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = ((ic * k + kr) * k + kc) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + kr) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kc) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto the input plane; adjoint of
/// `im2col`.
fn col2im<S: Scalar>(
    col: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let n = oh * ow;
    for ic in 0..cin {
        let plane = &mut dx[ic * h * w..(ic + 1) * h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = ((ic * k + kr) * k + kc) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + kr) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kc) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBwd {
    stride: usize,
    padding: usize,
}

struct SampleGrads<S> {
    dw: Vec<S>,
    db: Vec<S>,
}

impl<S: Scalar> BackwardRule<S> for Conv2dBwd {
    fn backward(&self, ctx: &mut BwdCtx<'_, S>) {
        let xs = ctx.input_shape(0).to_vec();
        let ws = ctx.input_shape(1).to_vec();
        let (bsz, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (oh, ow) = (
            out_dim(h, k, self.padding, self.stride),
            out_dim(w, k, self.padding, self.stride),
        );
        let n = oh * ow;
        let kk = cin * k * k;
        let (pad, stride) = (self.padding, self.stride);

        let x = ctx.input_value(0);
        let wflat = ctx.input_value(1);
        let g = ctx.out_grad;

        let need_x = ctx.needs(0);
        let need_w = ctx.needs(1);
        let need_b = ctx.needs(2);

        // Each sample is independent: gradients are computed per sample (in
        // parallel) and the weight/bias partials are reduced in batch order,
        // keeping results identical to a sequential pass.
        let per_sample = |b: usize, dx_b: Option<&mut [S]>| -> SampleGrads<S> {
            let g_b = &g[b * cout * n..(b + 1) * cout * n];
            let mut grads = SampleGrads {
                dw: Vec::new(),
                db: Vec::new(),
            };
            let mut col = vec![S::zero(); kk * n];
            if need_w {
                im2col(
                    &x[b * cin * h * w..(b + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    k,
                    pad,
                    stride,
                    oh,
                    ow,
                    &mut col,
                );
                grads.dw = vec![S::zero(); cout * kk];
                linalg::gemm_nt(cout, n, kk, g_b, &col, &mut grads.dw);
            }
            if need_b {
                grads.db = vec![S::zero(); cout];
                for oc in 0..cout {
                    let row = &g_b[oc * n..(oc + 1) * n];
                    for &v in row {
                        grads.db[oc] += v;
                    }
                }
            }
            if let Some(dx_b) = dx_b {
                col.fill(S::zero());
                linalg::gemm_tn(kk, cout, n, wflat, g_b, &mut col);
                col2im(&col, cin, h, w, k, pad, stride, oh, ow, dx_b);
            }
            grads
        };

        let parallel = bsz > 1 && rayon::current_num_threads() > 1;
        let mut dx = if need_x { vec![S::zero(); x.len()] } else { Vec::new() };
        let partials: Vec<SampleGrads<S>> = if need_x {
            if parallel {
                dx.par_chunks_mut(cin * h * w)
                    .enumerate()
                    .map(|(b, dx_b)| per_sample(b, Some(dx_b)))
                    .collect()
            } else {
                dx.chunks_mut(cin * h * w)
                    .enumerate()
                    .map(|(b, dx_b)| per_sample(b, Some(dx_b)))
                    .collect()
            }
        } else if parallel {
            (0..bsz).into_par_iter().map(|b| per_sample(b, None)).collect()
        } else {
            (0..bsz).map(|b| per_sample(b, None)).collect()
        };

        if need_w {
            let mut dw = vec![S::zero(); cout * kk];
            for p in &partials {
                for (acc, &v) in dw.iter_mut().zip(&p.dw) {
                    *acc += v;
                }
            }
            ctx.add_grad(1, dw);
        }
        if need_b {
            let mut db = vec![S::zero(); cout];
            for p in &partials {
                for (acc, &v) in db.iter_mut().zip(&p.db) {
                    *acc += v;
                }
            }
            ctx.add_grad(2, db);
        }
        if need_x {
            ctx.add_grad(0, dx);
        }
    }
}

/// Cross-correlation with zero padding over a B×C_in×H×W batch.
/// Output spatial size is (H + 2·pad − k)/stride + 1.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, params: &Conv2dParams<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::invalid(
            "conv2d",
            format!("input must be B×C×H×W, got {:?}", x.shape()),
        ));
    }
    let (bsz, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if cin != params.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: params.weight.shape().to_vec(),
        });
    }
    let k = params.kernel_size();
    if h < k || w < k {
        return Err(Error::invalid(
            "conv2d",
            format!("input {h}×{w} smaller than kernel {k}×{k}"),
        ));
    }
    let cout = params.out_channels();
    let (oh, ow) = (
        out_dim(h, k, params.padding, params.stride),
        out_dim(w, k, params.padding, params.stride),
    );
    let n = oh * ow;
    let kk = cin * k * k;

    let mut out = vec![S::zero(); bsz * cout * n];
    let bias = params.bias.data();
    let weight = params.weight.data();
    let src = x.data();
    let (pad, stride) = (params.padding, params.stride);
    let forward_sample = |b: usize, out_b: &mut [S]| {
        let mut col = vec![S::zero(); kk * n];
        im2col(
            &src[b * cin * h * w..(b + 1) * cin * h * w],
            cin,
            h,
            w,
            k,
            pad,
            stride,
            oh,
            ow,
            &mut col,
        );
        for oc in 0..cout {
            out_b[oc * n..(oc + 1) * n].fill(bias[oc]);
        }
        linalg::gemm_nn_seq(cout, kk, n, weight, &col, out_b);
    };
    if bsz > 1 && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(cout * n)
            .enumerate()
            .for_each(|(b, out_b)| forward_sample(b, out_b));
    } else {
        for (b, out_b) in out.chunks_mut(cout * n).enumerate() {
            forward_sample(b, out_b);
        }
    }
    record_op(
        "conv2d",
        &[x, &params.weight, &params.bias],
        vec![bsz, cout, oh, ow],
        out,
        Box::new(Conv2dBwd {
            stride: params.stride,
            padding: params.padding,
        }),
    )
}
