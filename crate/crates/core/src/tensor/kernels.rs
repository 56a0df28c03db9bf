//! Hot numeric kernels.
//!
//! Every kernel computes each output element with a fixed sequential
//! accumulation order, and parallelism only splits *disjoint output
//! regions* across threads. Results are therefore bit-identical for any
//! thread count, which is what lets training stay reproducible while the
//! CLI `--threads` flag scales the heavy paths.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Rows below this stay single-threaded; splitting tiny work wastes time.
const PAR_MIN_ROWS: usize = 256;

/// C[m,n] = A[m,k] · B[k,n] (+ bias[n]), parallel over row blocks.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], bias: Option<&[S]>, m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [S], a_row: &[S]| {
        match bias {
            Some(bias) => out_row.copy_from_slice(bias),
            None => out_row.fill(S::ZERO),
        }
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(o, ar)| row(o, ar));
    } else {
        for (o, ar) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(o, ar);
        }
    }
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ, parallel over row blocks.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |out_row: &mut [S], a_row: &[S]| {
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m >= PAR_MIN_ROWS {
        out.par_chunks_mut(k).zip(a.par_chunks(n)).for_each(|(o, ar)| row(o, ar));
    } else {
        for (o, ar) in out.chunks_mut(k).zip(a.chunks(n)) {
            row(o, ar);
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n], parallel over output rows (each owns a full
/// pass over m in ascending order, so the reduction order is fixed).
pub fn gemm_tn_accumulate<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |j: usize, out_row: &mut [S]| {
        for r in 0..m {
            let av = a[r * k + j];
            let b_row = &b[r * n..(r + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    };
    if m * k >= PAR_MIN_ROWS * 64 {
        out.par_chunks_mut(n).enumerate().for_each(|(j, o)| row(j, o));
    } else {
        for (j, o) in out.chunks_mut(n).enumerate() {
            row(j, o);
        }
    }
}

/// out[n] += sum over rows of grad[m,n] (bias gradient; fixed row order).
pub fn column_sums_accumulate<S: Scalar>(grad: &[S], m: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(grad.len(), m * n);
    debug_assert_eq!(out.len(), n);
    for r in 0..m {
        let g_row = &grad[r * n..(r + 1) * n];
        for (o, &g) in out.iter_mut().zip(g_row.iter()) {
            *o += g;
        }
    }
}

/// Elementwise map, parallel over chunks (pure per-element work).
pub fn map_unary<S: Scalar>(input: &[S], out: &mut [S], f: impl Fn(S) -> S + Sync + Send) {
    debug_assert_eq!(input.len(), out.len());
    if input.len() >= PAR_MIN_ROWS * 64 {
        out.par_chunks_mut(4096).zip(input.par_chunks(4096)).for_each(|(o, i)| {
            for (ov, &iv) in o.iter_mut().zip(i.iter()) {
                *ov = f(iv);
            }
        });
    } else {
        for (ov, &iv) in out.iter_mut().zip(input.iter()) {
            *ov = f(iv);
        }
    }
}

pub fn map_binary<S: Scalar>(a: &[S], b: &[S], out: &mut [S], f: impl Fn(S, S) -> S + Sync + Send) {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), out.len());
    if a.len() >= PAR_MIN_ROWS * 64 {
        out.par_chunks_mut(4096)
            .zip(a.par_chunks(4096).zip(b.par_chunks(4096)))
            .for_each(|(o, (ac, bc))| {
                for ((ov, &av), &bv) in o.iter_mut().zip(ac.iter()).zip(bc.iter()) {
                    *ov = f(av, bv);
                }
            });
    } else {
        for ((ov, &av), &bv) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
            *ov = f(av, bv);
        }
    }
}

/// Row-wise softmax with max subtraction; `rows × width` layout.
pub fn softmax_rows<S: Scalar>(input: &[S], rows: usize, width: usize, out: &mut [S]) {
    debug_assert_eq!(input.len(), rows * width);
    let one_row = |o: &mut [S], x: &[S]| {
        let mut mx = S::neg_infinity();
        for &v in x {
            mx = mx.maxs(v);
        }
        let mut denom = S::ZERO;
        for (ov, &v) in o.iter_mut().zip(x.iter()) {
            let e = (v - mx).exp();
            *ov = e;
            denom += e;
        }
        for ov in o.iter_mut() {
            *ov /= denom;
        }
    };
    if rows >= PAR_MIN_ROWS {
        out.par_chunks_mut(width).zip(input.par_chunks(width)).for_each(|(o, x)| one_row(o, x));
    } else {
        for (o, x) in out.chunks_mut(width).zip(input.chunks(width)) {
            one_row(o, x);
        }
    }
}

/// Length-preserving grouped 1-D convolution with symmetric zero padding.
///
/// x: [rows, groups·c_in, len], w: [groups·c_out, c_in, kw], b: [groups·c_out].
pub fn grouped_conv1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    rows: usize,
    groups: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    kw: usize,
    out: &mut [S],
) {
    debug_assert_eq!(x.len(), rows * groups * c_in * len);
    debug_assert_eq!(w.len(), groups * c_out * c_in * kw);
    debug_assert_eq!(out.len(), rows * groups * c_out * len);
    let half = (kw / 2) as isize;
    let one_row = |o: &mut [S], xr: &[S]| {
        for g in 0..groups {
            for co in 0..c_out {
                let oc = g * c_out + co;
                let w_base = oc * c_in * kw;
                let o_base = oc * len;
                let bias = b.map_or(S::ZERO, |b| b[oc]);
                for t in 0..len {
                    let mut acc = bias;
                    for ci in 0..c_in
                    {
                        let x_base = (g * c_in + ci) * len;
                        let w_off = w_base + ci * kw;
                        for kk in 0..kw {
                            let src = t as isize + kk as isize - half;
                            if src >= 0 && (src as usize) < len {
                                acc += w[w_off + kk] * xr[x_base + src as usize];
                            }
                        }
                    }
                    o[o_base + t] = acc;
                }
            }
        }
    };
    let row_in = groups * c_in * len;
    let row_out = groups * c_out * len;
    if rows >= PAR_MIN_ROWS {
        out.par_chunks_mut(row_out).zip(x.par_chunks(row_in)).for_each(|(o, xr)| one_row(o, xr));
    } else {
        for (o, xr) in out.chunks_mut(row_out).zip(x.chunks(row_in)) {
            one_row(o, xr);
        }
    }
}

/// Causal depthwise 1-D convolution (left zero padding of kw−1).
///
/// x: [rows, len, ch] with channels contiguous per step; w: [ch, kw] where
/// w[c, kw−1] multiplies the current step. Output step t sees steps ≤ t only.
pub fn causal_depthwise_conv_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    rows: usize,
    len: usize,
    ch: usize,
    kw: usize,
    out: &mut [S],
) {
    debug_assert_eq!(x.len(), rows * len * ch);
    debug_assert_eq!(w.len(), ch * kw);
    debug_assert_eq!(b.len(), ch);
    let one_row = |o: &mut [S], xr: &[S]| {
        for t in 0..len {
            let o_step = &mut o[t * ch..(t + 1) * ch];
            for (c, ov) in o_step.iter_mut().enumerate() {
                let mut acc = b[c];
                for kk in 0..kw {
                    let src = t as isize - (kw - 1 - kk) as isize;
                    if src >= 0 {
                        acc += w[c * kw + kk] * xr[src as usize * ch + c];
                    }
                }
                *ov = acc;
            }
        }
    };
    let stride = len * ch;
    if rows >= PAR_MIN_ROWS {
        out.par_chunks_mut(stride).zip(x.par_chunks(stride)).for_each(|(o, xr)| one_row(o, xr));
    } else {
        for (o, xr) in out.chunks_mut(stride).zip(x.chunks(stride)) {
            one_row(o, xr);
        }
    }
}
