//! Convolution lowering (im2col / col2im) and a safe row-major gemm wrapper.

use super::Scalar;

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// Geometry of a strided, zero-padded sliding window over one image plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Valid output index range `[lo, hi)` along one axis for kernel offset `k`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // input index = o * stride + k - pad must lie in [0, extent)
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((extent as isize - off) + s - 1) / s;
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Lowers one `[C, H, W]` image into a `[C*kh*kw, oh*ow]` matrix.
    pub fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        debug_assert_eq!(img.len(), self.channels * self.h * self.w);
        debug_assert_eq!(col.len(), self.rows() * self.cols());
        let ncol = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kj, self.w, self.ow);
                    let dst = &mut col[row * ncol..(row + 1) * ncol];
                    dst.fill(T::zero());
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ki - self.pad;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let ix0 = x_lo + kj - self.pad;
                            d[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                d[ox] = src_row[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters a column matrix back onto an
    /// image, accumulating overlapping contributions.
    pub fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        debug_assert_eq!(img.len(), self.channels * self.h * self.w);
        debug_assert_eq!(col.len(), self.rows() * self.cols());
        let ncol = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kj, self.w, self.ow);
                    let src = &col[row * ncol..(row + 1) * ncol];
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ki - self.pad;
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let s = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in x_lo..x_hi {
                            let k = ox * self.stride + kj - self.pad;
                            dst_row[k] = dst_row[k] + s[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`, where either
/// operand may be supplied in transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertions above bound every access made with these
    // strides, and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_output_size(64, 4, 2, 1), Some(32));
        assert_eq!(conv_output_size(5, 3, 1, 1), Some(5));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
        assert_eq!(deconv_output_size(32, 4, 2, 1), Some(64));
        assert_eq!(deconv_output_size(1, 1, 1, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let win = Window {
            channels: 2,
            h: 5,
            w: 6,
            kh: 3,
            kw: 4,
            stride: 2,
            pad: 1,
            oh: conv_output_size(5, 3, 2, 1).unwrap(),
            ow: conv_output_size(6, 4, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..win.rows() * win.cols())
            .map(|i| ((i * 13) % 7) as f64 - 3.0)
            .collect();
        let mut col = vec![0.0; y.len()];
        win.im2col(&x, &mut col);
        let mut back = vec![0.0; x.len()];
        win.col2im(&y, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
