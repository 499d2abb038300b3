//! Low-level numeric routines shared by the graph ops: strided GEMM,
//! im2col/col2im for convolutions, and output-extent arithmetic.

use crate::tensor::Scalar;

/// C = alpha * op(A) * op(B) + beta * C for row-major buffers.
///
/// `ta`/`tb` select a transposed view without materializing it. `c` must
/// have exactly `m * n` elements laid out row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully strided GEMM over raw pointers, for views into token tensors
/// (per-head column slices and the like).
#[allow(clippy::too_many_arguments)]
pub unsafe fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
    csc: isize,
) {
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Output extent of a convolution/pooling axis, floor convention.
///
/// Matches the usual framework semantics: positions that do not fit are
/// dropped. Returns None when the (padded) input is smaller than the kernel.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one image [C,H,W] into columns of a (possibly batched) matrix.
///
/// Row (c, ky, kx) holds the input value under that kernel tap for every
/// output position, zero where the tap falls into padding. Rows are laid
/// out at `row * row_stride + col_base`, so several samples can share one
/// [C*k*k, B*OH*OW] matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
    row_stride: usize,
    col_base: usize,
) {
    debug_assert_eq!(x.len(), channels * height * width);
    debug_assert!(row_stride >= out_h * out_w);
    let plane = height * width;
    let mut row = 0usize;
    for c in 0..channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let base = row * row_stride + col_base;
                let dst_row = &mut cols[base..base + out_h * out_w];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut dst_row[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &xc[iy as usize * width..(iy as usize + 1) * width];
                    if stride == 1 {
                        // Contiguous span with zero fill at the borders.
                        let ix0 = kx as isize - padding as isize;
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *d = if ix < 0 || ix >= width as isize {
                                T::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            *d = if ix < 0 || ix >= width as isize {
                                T::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add columns back onto an image: the adjoint of `im2col` with
/// the same batched layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    x_grad: &mut [T],
    row_stride: usize,
    col_base: usize,
) {
    let plane = height * width;
    let mut row = 0usize;
    for c in 0..channels {
        let xc = &mut x_grad[c * plane..(c + 1) * plane];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let base = row * row_stride + col_base;
                let src_row = &cols[base..base + out_h * out_w];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut xc[iy as usize * width..(iy as usize + 1) * width];
                    for (ox, &s) in src_row[oy * out_w..(oy + 1) * out_w].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < width as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_views() {
        // A^T * B with A stored 2x3: (3x2)^T is the 2x3 matrix.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4]; // 2x2 = A^T(2x3) * B(3x2)
        gemm(2, 3, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [1.0 + 5.0, 3.0 + 5.0, 2.0 + 6.0, 4.0 + 6.0]);
    }

    #[test]
    fn conv_extents_floor() {
        assert_eq!(conv_out_extent(224, 3, 2, 1), Some(112));
        assert_eq!(conv_out_extent(112, 3, 2, 1), Some(56));
        assert_eq!(conv_out_extent(4, 3, 1, 1), Some(4));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data.
        let (c, h, w, k, s, p) = (2usize, 4usize, 5usize, 3usize, 2usize, 1usize);
        let oh = conv_out_extent(h, k, s, p).unwrap();
        let ow = conv_out_extent(w, k, s, p).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, s, p, oh, ow, &mut cols, oh * ow, 0);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, k, s, p, oh, ow, &mut back, oh * ow, 0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn im2col_batched_layout_matches_single() {
        let (c, h, w, k, s, p) = (2usize, 5usize, 5usize, 3usize, 1usize, 1usize);
        let oh = conv_out_extent(h, k, s, p).unwrap();
        let ow = conv_out_extent(w, k, s, p).unwrap();
        let x0: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let x1: Vec<f64> = (0..c * h * w).map(|i| (i * 3) as f64).collect();
        let ckk = c * k * k;
        let per = oh * ow;
        let mut single0 = vec![0.0; ckk * per];
        let mut single1 = vec![0.0; ckk * per];
        im2col(&x0, c, h, w, k, s, p, oh, ow, &mut single0, per, 0);
        im2col(&x1, c, h, w, k, s, p, oh, ow, &mut single1, per, 0);
        let mut batched = vec![0.0; ckk * 2 * per];
        im2col(&x0, c, h, w, k, s, p, oh, ow, &mut batched, 2 * per, 0);
        im2col(&x1, c, h, w, k, s, p, oh, ow, &mut batched, 2 * per, per);
        for r in 0..ckk {
            assert_eq!(&batched[r * 2 * per..r * 2 * per + per], &single0[r * per..(r + 1) * per]);
            assert_eq!(&batched[r * 2 * per + per..(r + 1) * 2 * per], &single1[r * per..(r + 1) * per]);
        }
    }
}
