use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::quant::TernaryTensor;

/// Row-major `rows x cols` trit matrix; one row per input line, one column
/// per output neuron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoweredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

impl LoweredMatrix {
    /// Transpose `[out, in]` (or `[out, in, k, k]` flattened per output) so
    /// that column `o` holds the weights of output `o`.
    pub fn from_output_major(weights: &TernaryTensor) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() < 2 || shape[0] == 0 {
            return Err(shape_err!("cannot lower weights of shape {:?}", shape));
        }
        let cols = shape[0];
        let rows = weights.len() / cols;
        let w = weights.data();
        let mut data = vec![0i8; rows * cols];
        for o in 0..cols {
            for r in 0..rows {
                data[r * cols + o] = w[o * rows + r];
            }
        }
        Ok(LoweredMatrix { rows, cols, data })
    }

    /// Rows `lo..hi`, columns `clo..chi`, row-major.
    pub fn block(&self, lo: usize, hi: usize, clo: usize, chi: usize) -> Vec<i8> {
        let mut out = Vec::with_capacity((hi - lo) * (chi - clo));
        for r in lo..hi {
            out.extend_from_slice(&self.data[r * self.cols + clo..r * self.cols + chi]);
        }
        out
    }

    pub fn column(&self, c: usize) -> Vec<i8> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }
}

/// Geometry of a convolution lowered to repeated matrix-vector products.
///
/// Patch element `(ci, ky, kx)` sits at row `ci*k*k + ky*k + kx`, matching
/// the flattened `[in][ky][kx]` order of each output filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLowering {
    pub in_shape: [usize; 3],
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Valid (unpadded) convolution geometry.
pub fn lower_conv_to_matmul(
    out_channels: usize,
    kernel: usize,
    stride: usize,
    in_shape: [usize; 3],
) -> Result<ConvLowering> {
    let [c, h, w] = in_shape;
    if out_channels == 0 || kernel == 0 || stride == 0 || c == 0 {
        return Err(shape_err!(
            "conv needs nonzero channels, kernel and stride (got {}, {}, {})",
            out_channels,
            kernel,
            stride
        ));
    }
    if kernel > h || kernel > w {
        return Err(shape_err!("kernel {} larger than input {}x{}", kernel, h, w));
    }
    Ok(ConvLowering {
        in_shape,
        out_channels,
        kernel,
        stride,
        out_h: (h - kernel) / stride + 1,
        out_w: (w - kernel) / stride + 1,
    })
}

impl ConvLowering {
    /// Rows of the lowered matrix (fan-in per output).
    pub fn patch_len(&self) -> usize {
        self.in_shape[0] * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Copy the receptive field of output position `pos` (row-major over
    /// `out_h x out_w`) from a `[c][h][w]` input into `out`.
    pub fn extract_patch<T: Copy>(&self, input: &[T], pos: usize, out: &mut [T]) {
        let [c, h, w] = self.in_shape;
        debug_assert_eq!(input.len(), c * h * w);
        debug_assert_eq!(out.len(), self.patch_len());
        let k = self.kernel;
        let y0 = (pos / self.out_w) * self.stride;
        let x0 = (pos % self.out_w) * self.stride;
        let mut i = 0;
        for ci in 0..c {
            for ky in 0..k {
                let src = ci * h * w + (y0 + ky) * w + x0;
                out[i..i + k].copy_from_slice(&input[src..src + k]);
                i += k;
            }
        }
    }

    /// Full lowered input: `positions x patch_len`, row-major.
    pub fn im2col<T: Copy + Default>(&self, input: &[T]) -> Vec<T> {
        let p = self.patch_len();
        let mut out = vec![T::default(); self.positions() * p];
        for (pos, chunk) in out.chunks_exact_mut(p).enumerate() {
            self.extract_patch(input, pos, chunk);
        }
        out
    }

    /// Scatter the gradient of a lowered patch back onto the input.
    pub fn accumulate_patch<T: Copy + core::ops::AddAssign>(&self, grad_patch: &[T], pos: usize, grad_input: &mut [T]) {
        let [c, h, w] = self.in_shape;
        let k = self.kernel;
        let y0 = (pos / self.out_w) * self.stride;
        let x0 = (pos % self.out_w) * self.stride;
        let mut i = 0;
        for ci in 0..c {
            for ky in 0..k {
                let dst = ci * h * w + (y0 + ky) * w + x0;
                for (g, d) in grad_patch[i..i + k].iter().zip(&mut grad_input[dst..dst + k]) {
                    *d += *g;
                }
                i += k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Precision;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    /// Direct nested-loop convolution, independent of the lowering.
    fn conv_direct(x: &[i8], shape: [usize; 3], w: &[i8], out_c: usize, k: usize, s: usize) -> Vec<i64> {
        let [c, h, wd] = shape;
        let oh = (h - k) / s + 1;
        let ow = (wd - k) / s + 1;
        let mut y = vec![0i64; out_c * oh * ow];
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let xv = x[ci * h * wd + (oy * s + ky) * wd + ox * s + kx];
                                let wv = w[((o * c + ci) * k + ky) * k + kx];
                                acc += i64::from(xv) * i64::from(wv);
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    fn lowered_conv(x: &[i8], shape: [usize; 3], w: &[i8], out_c: usize, k: usize, s: usize) -> Vec<i64> {
        let l = lower_conv_to_matmul(out_c, k, s, shape).unwrap();
        let wt = TernaryTensor::new(vec![out_c, shape[0], k, k], w.to_vec(), Precision::Ternary).unwrap();
        let m = LoweredMatrix::from_output_major(&wt).unwrap();
        assert_eq!((m.rows, m.cols), (l.patch_len(), out_c));
        let cols = l.im2col(x);
        let p = l.positions();
        let mut y = vec![0i64; out_c * p];
        for pos in 0..p {
            let patch = &cols[pos * l.patch_len()..(pos + 1) * l.patch_len()];
            for o in 0..out_c {
                y[o * p + pos] = patch
                    .iter()
                    .enumerate()
                    .map(|(r, &v)| i64::from(v) * i64::from(m.data[r * out_c + o]))
                    .sum();
            }
        }
        y
    }

    #[test]
    fn lowering_matches_direct_conv_on_lenet_first_layer() {
        let mut rng = CounterRng::new(3, 3);
        let shape = [8, 32, 32];
        let x: Vec<i8> = (0..8 * 32 * 32).map(|_| rng.trit(true)).collect();
        let w: Vec<i8> = (0..6 * 8 * 25).map(|_| rng.trit(false)).collect();
        assert_eq!(lowered_conv(&x, shape, &w, 6, 5, 1), conv_direct(&x, shape, &w, 6, 5, 1));
    }

    proptest! {
        #[test]
        fn lowering_matches_direct_conv(
            c in 1usize..4, h in 3usize..9, w in 3usize..9, k in 1usize..4, s in 1usize..3,
            out_c in 1usize..4, seed in any::<u64>()
        ) {
            prop_assume!(k <= h && k <= w);
            let mut rng = CounterRng::new(seed, 0);
            let x: Vec<i8> = (0..c * h * w).map(|_| rng.trit(false)).collect();
            let wt: Vec<i8> = (0..out_c * c * k * k).map(|_| rng.trit(false)).collect();
            prop_assert_eq!(
                lowered_conv(&x, [c, h, w], &wt, out_c, k, s),
                conv_direct(&x, [c, h, w], &wt, out_c, k, s)
            );
        }
    }

    #[test]
    fn geometry_and_errors() {
        let l = lower_conv_to_matmul(6, 5, 1, [8, 32, 32]).unwrap();
        assert_eq!((l.out_h, l.out_w, l.patch_len(), l.positions()), (28, 28, 200, 784));
        assert!(lower_conv_to_matmul(6, 33, 1, [8, 32, 32]).is_err());
        assert!(lower_conv_to_matmul(6, 5, 0, [8, 32, 32]).is_err());
        assert!(lower_conv_to_matmul(0, 5, 1, [8, 32, 32]).is_err());
    }

    #[test]
    fn patch_scatter_is_adjoint_of_gather() {
        let l = lower_conv_to_matmul(1, 3, 2, [2, 7, 7]).unwrap();
        let x: Vec<f32> = (0..98).map(|i| i as f32 * 0.5 - 3.0).collect();
        let g: Vec<f32> = (0..l.patch_len()).map(|i| (i as f32).sin()).collect();
        for pos in 0..l.positions() {
            let mut patch = vec![0.0f32; l.patch_len()];
            l.extract_patch(&x, pos, &mut patch);
            let lhs: f32 = patch.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut gi = vec![0.0f32; 98];
            l.accumulate_patch(&g, pos, &mut gi);
            let rhs: f32 = gi.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-4);
        }
    }

    #[test]
    fn dense_lowering_transposes() {
        let w = TernaryTensor::new(vec![2, 3], vec![1, 0, -1, -1, 1, 0], Precision::Ternary).unwrap();
        let m = LoweredMatrix::from_output_major(&w).unwrap();
        assert_eq!((m.rows, m.cols), (3, 2));
        assert_eq!(m.data, [1, -1, 0, 1, -1, 0]);
        assert_eq!(m.column(1), [-1, 1, 0]);
        assert_eq!(m.block(1, 3, 1, 2), [1, 0]);
    }
}
