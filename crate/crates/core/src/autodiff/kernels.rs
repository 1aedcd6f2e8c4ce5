//! Raw loops behind the differentiable ops. No allocation policy, no tape.

use crate::tensor::Scalar;

/// Geometry of a 2-D convolution from a "large" image to a "small" one.
///
/// `conv2d` maps large → small; `conv2d_transpose` maps small → large with
/// the same geometry, which is what makes the two exact adjoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox * stride + kj - pad`
    /// falls inside the image; that input column for `ox = lo` is `first`.
    fn valid_cols(&self, kj: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.width + p > kj {
            ((self.width + p - kj - 1) / s + 1).min(self.out_width)
        } else {
            0
        };
        let hi = hi.max(lo);
        (lo, hi, lo * s + kj - p)
    }
}

/// Unfold one image `[C, H, W]` into a `[C*k*k, Ho*Wo]` block whose rows
/// start `ld` elements apart in `cols`.
pub fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let positions = g.out_positions();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi, first) = g.valid_cols(kj);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + positions];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::ZERO);
                    line[hi..].fill(T::ZERO);
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a `[C*k*k, Ho*Wo]` block (row stride
/// `ld`) back into `[C, H, W]`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let positions = g.out_positions();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi, first) = g.valid_cols(kj);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + positions];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(s).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `[n, c, m]` to `[c, n*m]`.
pub fn to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * m + s * m..ch * n * m + (s + 1) * m].copy_from_slice(&src[(s * c + ch) * m..(s * c + ch + 1) * m]);
        }
    }
    out
}

/// Add `[c, n*m]` into `[n, c, m]`.
pub fn add_from_channel_major<T: Scalar>(src: &[T], dst: &mut [T], n: usize, c: usize, m: usize) {
    for s in 0..n {
        for ch in 0..c {
            let from = &src[ch * n * m + s * m..ch * n * m + (s + 1) * m];
            for (d, &v) in dst[(s * c + ch) * m..(s * c + ch + 1) * m].iter_mut().zip(from) {
                *d += v;
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Row-wise softmax in place, stabilised by max subtraction.
pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(row[0], T::max);
        let mut total = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_of_the_encoder_stack() {
        let mut h = 64;
        let mut w = 32;
        for _ in 0..4 {
            let g = ConvGeom::new(1, h, w, 3, 2, 1).unwrap();
            h = g.out_height;
            w = g.out_width;
        }
        assert_eq!((h, w), (4, 2));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_positions())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols, g.out_positions());
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back, g.out_positions());
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (c, h, w, k, s, p) in [(2, 5, 4, 3, 2, 1), (1, 7, 6, 3, 1, 1), (3, 8, 5, 2, 3, 0), (1, 4, 4, 3, 2, 2), (2, 6, 3, 1, 1, 0)] {
            let g = ConvGeom::new(c, h, w, k, s, p).unwrap();
            let x: Vec<f64> = (0..g.in_len()).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.patch_len() * g.out_positions()];
            im2col(&g, &x, &mut cols, g.out_positions());
            for ch in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        for oy in 0..g.out_height {
                            for ox in 0..g.out_width {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                                let want = if inside { x[(ch * h + iy as usize) * w + ix as usize] } else { 0.0 };
                                let row = (ch * k + ki) * k + kj;
                                assert_eq!(cols[row * g.out_positions() + oy * g.out_width + ox], want);
                            }
                        }
                    }
                }
            }
            let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).sin()).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&g, &y, &mut back, g.out_positions());
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{g:?}");
        }
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let cm = to_channel_major(&x, 2, 3, 4);
        assert_eq!(&cm[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        let mut back = vec![0.0; 24];
        add_from_channel_major(&cm, &mut back, 2, 3, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(40.0f64) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f32).is_finite());
    }
}
