//! Row-major matrix kernels shared by matmul and the convolution layers.
//!
//! Every kernel accumulates into `out` with a fixed iteration order, so
//! results are bit-identical whether rows are processed sequentially or in
//! parallel: each output row is written by exactly one task.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work (m·k·n) below which parallel dispatch is not worth the overhead.
const PAR_MIN_WORK: usize = 1 << 21;

/// out[i,j] += Σ_k a[i,k] · b[k,j]; row-parallel when the product is large.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= PAR_MIN_WORK && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| gemm_nn_row(k, n, a, b, i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            gemm_nn_row(k, n, a, b, i, row);
        }
    }
}

#[inline]
fn gemm_nn_row<S: Scalar>(k: usize, n: usize, a: &[S], b: &[S], i: usize, row: &mut [S]) {
    let arow = &a[i * k..(i + 1) * k];
    for (kk, &aik) in arow.iter().enumerate() {
        let brow = &b[kk * n..(kk + 1) * n];
        for (r, &bv) in row.iter_mut().zip(brow) {
            *r += aik * bv;
        }
    }
}

/// Sequential form for callers that already parallelize at a coarser grain.
pub fn gemm_nn_seq<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        gemm_nn_row(k, n, a, b, i, row);
    }
}

/// out[i,j] += Σ_k a[i,k] · b[j,k]  (b is used transposed)
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            // Four fixed-order lanes so the dot product vectorizes.
            let mut acc = [S::zero(); 4];
            let chunks = k / 4;
            for c in 0..chunks {
                for l in 0..4 {
                    acc[l] += arow[c * 4 + l] * brow[c * 4 + l];
                }
            }
            let mut tail = S::zero();
            for t in chunks * 4..k {
                tail += arow[t] * brow[t];
            }
            *r += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
    }
}

/// out[i,j] += Σ_k a[k,i] · b[k,j]  (a is used transposed)
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        for kk in 0..k {
            let aki = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += aki * bv;
            }
        }
    }
}
