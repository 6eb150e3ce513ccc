//! Raw numeric kernels behind the graph ops. Everything here works on plain
//! slices of a single NCHW plane stack; batching and bookkeeping live in
//! `graph`.

use crate::Scalar;

/// Geometry of a 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `x` (`channels x in_h x in_w`) into a `(C*k*k) x (out_h*out_w)`
/// column matrix; out-of-bounds taps read zero.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.in_h, oh);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.in_w, ow);
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if xlo < xhi {
                        let ix0 = xlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            drow[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                        } else {
                            for (d, s) in drow[xlo..xhi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` whose tap `kk` lands inside `[0, n)`.
fn valid_range(kk: usize, pad: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // smallest o with o*stride + kk - pad >= n
    let hi = (n + pad).saturating_sub(kk).div_ceil(stride);
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto `x`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.in_h, oh);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.in_w, ow);
                if xlo >= xhi {
                    continue;
                }
                let ix0 = xlo * g.stride + kj - g.pad;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let srow = &src[oy * ow + xlo..oy * ow + xhi];
                    if g.stride == 1 {
                        for (d, s) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Source index for position `i` of a reflect-padded axis of length `n`
/// (mirror without repeating the edge sample, periodic for any pad width).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Per-plane mean and biased variance.
pub fn plane_moments<T: Scalar>(plane: &[T]) -> (T, T) {
    let n = T::from_usize(plane.len()).unwrap();
    let mean = plane.iter().copied().sum::<T>() / n;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let n = 4;
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, n)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    fn im2col_naive(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
        let mut out = vec![0.0; g.col_rows() * g.col_cols()];
        for c in 0..g.channels {
            for ki in 0..k {
                for kj in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                out[((c * k + ki) * k + kj) * oh * ow + oy * ow + ox] =
                                    x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_gather() {
        for (h, w, k, s, p) in [(5, 4, 3, 2, 1), (7, 7, 7, 1, 0), (6, 9, 4, 2, 1), (3, 3, 3, 1, 2), (8, 5, 4, 1, 3), (2, 2, 3, 2, 1)] {
            let g = ConvGeom { channels: 2, in_h: h, in_w: w, kernel: k, stride: s, pad: p };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, im2col_naive(&x, &g), "{h}x{w} k{k} s{s} p{p}");
            // col2im of an indicator column set counts tap coverage, compare to the naive adjoint
            let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 7) % 11) as f64).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            for i in 0..x.len() {
                let mut e = vec![0.0; x.len()];
                e[i] = 1.0;
                let want: f64 = im2col_naive(&e, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
                assert_eq!(back[i], want);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { channels: 2, in_h: 5, in_w: 4, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
