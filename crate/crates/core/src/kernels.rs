//! Raw compute kernels behind the tape ops.
//!
//! Every kernel computes each output element with a fixed sequential
//! reduction order, and parallelism only ever splits *independent* output
//! elements across threads. Results are therefore bit-identical regardless
//! of thread count, which the determinism contract relies on.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Parallelize only when the row count is worth the fork overhead.
const PAR_ROWS: usize = 16;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    let body = |(i, row): (usize, &mut [F])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    };
    if m >= PAR_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    let body = |(i, row): (usize, &mut [F])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if m >= PAR_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    let body = |(i, row): (usize, &mut [F])| {
        for l in 0..k {
            let av = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    };
    if m >= PAR_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// Output spatial extent of a convolution/pool along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lower an NCHW batch into the im2col matrix of shape
/// `[n * ho * wo, c * kh * kw]` (row index runs (n, ho, wo), column index
/// runs (c, kh, kw)). Padding reads as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let cols_w = c * kh * kw;
    let mut cols = vec![F::ZERO; n * ho * wo * cols_w];
    let body = |(row_idx, row): (usize, &mut [F])| {
        let ow = row_idx % wo;
        let oh = (row_idx / wo) % ho;
        let ni = row_idx / (wo * ho);
        let base_h = (oh * stride) as isize - pad as isize;
        let base_w = (ow * stride) as isize - pad as isize;
        for ci in 0..c {
            for ki in 0..kh {
                let ih = base_h + ki as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let src = ((ni * c + ci) * h + ih as usize) * w;
                let dst = (ci * kh + ki) * kw;
                for kj in 0..kw {
                    let iw = base_w + kj as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    row[dst + kj] = x[src + iw as usize];
                }
            }
        }
    };
    if n * ho * wo >= PAR_ROWS {
        cols.par_chunks_mut(cols_w).enumerate().for_each(body);
    } else {
        cols.chunks_mut(cols_w).enumerate().for_each(body);
    }
    cols
}

/// Scatter-add the im2col gradient back onto the input layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Scalar>(
    gcols: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gx: &mut [F],
) {
    let cols_w = c * kh * kw;
    // Sequential: output positions overlap between rows, so a scatter in
    // fixed row order keeps the accumulation deterministic.
    for row_idx in 0..n * ho * wo {
        let row = &gcols[row_idx * cols_w..(row_idx + 1) * cols_w];
        let ow = row_idx % wo;
        let oh = (row_idx / wo) % ho;
        let ni = row_idx / (wo * ho);
        let base_h = (oh * stride) as isize - pad as isize;
        let base_w = (ow * stride) as isize - pad as isize;
        for ci in 0..c {
            for ki in 0..kh {
                let ih = base_h + ki as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let dst = ((ni * c + ci) * h + ih as usize) * w;
                let src = (ci * kh + ki) * kw;
                for kj in 0..kw {
                    let iw = base_w + kj as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    gx[dst + iw as usize] += row[src + kj];
                }
            }
        }
    }
}

/// Max pooling over NCHW. Returns the pooled values and the flat argmax
/// index into `x` per output element (ties resolved to the first scan hit).
pub fn max_pool2d<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<F>, Vec<usize>) {
    let out_len = n * c * ho * wo;
    let mut y = vec![F::ZERO; out_len];
    let mut arg = vec![0usize; out_len];
    let plane = ho * wo;
    let body = |(img, (y_plane, a_plane)): (usize, (&mut [F], &mut [usize]))| {
        // img runs over (n, c)
        let src = img * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = None::<(F, usize)>;
                for ki in 0..k {
                    let ih = oh * stride + ki;
                    if ih >= h {
                        break;
                    }
                    for kj in 0..k {
                        let iw = ow * stride + kj;
                        if iw >= w {
                            break;
                        }
                        let idx = src + ih * w + iw;
                        let v = x[idx];
                        match best {
                            Some((bv, _)) if !(v > bv) => {}
                            _ => best = Some((v, idx)),
                        }
                    }
                }
                let (bv, bidx) = best.expect("kernel covers at least one cell");
                y_plane[oh * wo + ow] = bv;
                a_plane[oh * wo + ow] = bidx;
            }
        }
    };
    let iter = y.chunks_mut(plane).zip(arg.chunks_mut(plane)).enumerate();
    if n * c >= PAR_ROWS {
        y.par_chunks_mut(plane)
            .zip(arg.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(i, (yp, ap))| body((i, (yp, ap))));
    } else {
        iter.for_each(|(i, (yp, ap))| body((i, (yp, ap))));
    }
    (y, arg)
}
