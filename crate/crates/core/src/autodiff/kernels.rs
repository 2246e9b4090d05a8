//! Dense compute kernels shared by the tape operations.
//!
//! The only hot path in the whole artifact is conv2d, lowered to im2col plus
//! a row-major matmul. Rows of the output are independent, so they may be
//! computed on worker threads without changing any per-row summation order;
//! results are bit-identical to the serial loop.

use rayon::prelude::*;

use super::scalar::Scalar;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_WORK_THRESHOLD: usize = 64 * 1024;

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aik * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[m,n] += a[m,k] * b^T where b is stored row-major as [n,k].
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = *o + dot(arow, brow);
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// Fixed-order dot product (4 lanes, deterministic).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Conv2d output spatial extent for one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lower a (C,H,W) image into the (C*k*k, Ho*Wo) column matrix for conv2d.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c_in * k * k * ho * wo];
    let hw_out = ho * wo;
    for ci in 0..c_in {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let crow = &mut cols[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &plane[iy as usize * w..iy as usize * w + w];
                    let orow = &mut crow[oy * wo..oy * wo + wo];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = irow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a (C*k*k, Ho*Wo) column-gradient back onto the (C,H,W) input grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im_accumulate<T: Scalar>(
    g_cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    g_input: &mut [T],
) {
    let hw_out = ho * wo;
    for ci in 0..c_in {
        let plane = &mut g_input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let crow = &g_cols[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += crow[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 4.0).collect();
        let mut out = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_matches_transposed_matmul() {
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 + 0.5).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64) * 0.25 - 1.5).collect();
        // materialize b = bt^T and compare
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for kk in 0..k {
                b[kk * n + j] = bt[j * k + kk];
            }
        }
        let mut out1 = vec![0.0; m * n];
        let mut out2 = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut out1);
        matmul(&a, &b, m, k, n, &mut out2);
        for (x, y) in out1.iter().zip(out2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_serial_matmul_agree_bitwise() {
        // Force both paths by using a size above and below the threshold on
        // the same data prefix.
        let (m, k, n) = (64, 64, 64); // 262144 multiply-adds: parallel path
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 2654435761usize) % 1000) as f32 * 1e-3).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 40503usize) % 1000) as f32 * 1e-3 - 0.5).collect();
        let mut par = vec![0.0f32; m * n];
        matmul(&a, &b, m, k, n, &mut par);
        let mut ser = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut ser[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b[kk * n..kk * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * bv;
                }
            }
        }
        assert_eq!(par, ser, "row-parallel matmul must be bit-identical to serial");
    }

    #[test]
    fn conv_out_extent_arithmetic() {
        assert_eq!(conv_out_extent(64, 3, 1, 1), Some(64));
        assert_eq!(conv_out_extent(4, 3, 1, 0), Some(2));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
        assert_eq!(conv_out_extent(8, 2, 2, 0), Some(4));
        assert_eq!(conv_out_extent(8, 3, 0, 1), None);
    }
}
