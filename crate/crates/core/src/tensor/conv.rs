//! im2col-based convolution kernels (NCHW, square kernels, zero padding).

use super::{matmul, Element, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Number of sliding positions along each axis.
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold `input` (C×H×W) into `cols` ((C·k·k) × (out_h·out_w)).
pub(crate) fn im2col<T: Element>(input: &[T], g: &Geometry, cols: &mut [T]) {
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `out` (C×H×W).
pub(crate) fn col2im<T: Element>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of one sample. `weight` is (C_out × C_in·k·k).
pub(crate) fn conv_forward<T: Element>(
    input: &[T],
    weight: &[T],
    c_out: usize,
    g: &Geometry,
    cols: &mut [T],
    out: &mut [T],
) {
    im2col(input, g, cols);
    matmul(MatRef::new(weight, c_out, g.rows()), MatRef::new(cols, g.rows(), g.positions()), out, false);
}

/// Backward of one sample's convolution. Accumulates into `dweight`; writes
/// (not accumulates) the input gradient into `dinput` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Element>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    c_out: usize,
    g: &Geometry,
    cols: &mut [T],
    dweight: Option<&mut [T]>,
    dinput: Option<&mut [T]>,
) {
    let dout_m = MatRef::new(dout, c_out, g.positions());
    if let Some(dw) = dweight {
        im2col(input, g, cols);
        matmul(dout_m, MatRef::new(cols, g.rows(), g.positions()).t(), dw, true);
    }
    if let Some(dx) = dinput {
        matmul(MatRef::new(weight, c_out, g.rows()).t(), dout_m, cols, false);
        dx.iter_mut().for_each(|v| *v = T::zero());
        col2im(cols, g, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out(64, 4, 2, 1), Some(32));
        assert_eq!(conv_out(8, 4, 1, 1), Some(7));
        assert_eq!(conv_out(32, 7, 1, 0), Some(26));
        assert_eq!(conv_out(2, 7, 1, 0), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y
        let g = Geometry { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1, out_h: 3, out_w: 2 };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.positions()).map(|i| ((i * 31) % 11) as f64 - 5.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn direct_convolution_matches() {
        let g = Geometry { channels: 1, height: 3, width: 3, kernel: 3, stride: 1, pad: 1, out_h: 3, out_w: 3 };
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]; // center + right neighbour
        let mut cols = vec![0.0; 81];
        let mut out = vec![0.0; 9];
        conv_forward(&x, &w, 1, &g, &mut cols, &mut out);
        assert_eq!(out, vec![3.0, 5.0, 3.0, 9.0, 11.0, 6.0, 15.0, 17.0, 9.0]);
    }
}
