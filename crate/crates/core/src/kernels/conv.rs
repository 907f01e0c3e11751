use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Resolved sizes of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mismatch = || CoreError::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: weight.to_vec(),
        };
        let (&[batch, in_channels, in_h, in_w], &[out_channels, w_in, kernel_h, kernel_w]) =
            (input, weight)
        else {
            return Err(mismatch());
        };
        if w_in != in_channels {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(CoreError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(CoreError::InvalidShape {
                op: "conv2d",
                shape: weight.to_vec(),
                reason: "kernel extents must be odd".into(),
            });
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b != [out_channels] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d bias",
                    left: weight.to_vec(),
                    right: b.to_vec(),
                });
            }
        }
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel_h) / stride + 1,
            out_w: (in_w + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Source row/column of output position `o` for kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&v| v < extent)
    }

    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let src = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky, self.in_h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.in_w) {
                                        Some(ix) => src[iy * self.in_w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let dst = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.in_w) {
                                dst[iy * self.in_w + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation over an `N, C, H, W` batch.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(
        input.shape(),
        weight.shape(),
        bias.map(Tensor::shape),
        stride,
        padding,
    )?;
    input.ensure_finite("conv2d")?;
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.batch {
        let image = &input.data()[n * g.in_image()..(n + 1) * g.in_image()];
        let cols: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut col);
            &col
        };
        let dst = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            k,
            plane,
            T::one(),
            weight.data(),
            (k as isize, 1),
            cols,
            (plane as isize, 1),
            beta,
            dst,
            (plane as isize, 1),
        );
    }
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of [`conv2d`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let bias_shape = [weight.shape()[0]];
    let g = ConvGeometry::new(
        input.shape(),
        weight.shape(),
        with_bias.then_some(&bias_shape[..]),
        stride,
        padding,
    )?;
    if grad_out.shape() != g.output_shape() {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d backward",
            left: g.output_shape().to_vec(),
            right: grad_out.shape().to_vec(),
        });
    }
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_w = vec![T::zero(); weight.len()];
    let mut grad_b = vec![T::zero(); g.out_channels];
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
    let mut grad_col = vec![T::zero(); k * plane];
    for n in 0..g.batch {
        let image = &input.data()[n * g.in_image()..(n + 1) * g.in_image()];
        let gy = &grad_out.data()[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        let cols: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut col);
            &col
        };
        // dW += dY (Cout x P) . col^T (P x K)
        T::gemm(
            g.out_channels,
            plane,
            k,
            T::one(),
            gy,
            (plane as isize, 1),
            cols,
            (1, plane as isize),
            T::one(),
            &mut grad_w,
            (k as isize, 1),
        );
        // dcol = W^T (K x Cout) . dY (Cout x P)
        let gin = &mut grad_in[n * g.in_image()..(n + 1) * g.in_image()];
        if g.is_pointwise() {
            T::gemm(
                k,
                g.out_channels,
                plane,
                T::one(),
                weight.data(),
                (1, k as isize),
                gy,
                (plane as isize, 1),
                T::zero(),
                gin,
                (plane as isize, 1),
            );
        } else {
            T::gemm(
                k,
                g.out_channels,
                plane,
                T::one(),
                weight.data(),
                (1, k as isize),
                gy,
                (plane as isize, 1),
                T::zero(),
                &mut grad_col,
                (plane as isize, 1),
            );
            g.col2im(&grad_col, gin);
        }
        if with_bias {
            for (o, gb) in grad_b.iter_mut().enumerate() {
                *gb += gy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), grad_in)?,
        Tensor::new(weight.shape(), grad_w)?,
        if with_bias {
            Some(Tensor::new(&bias_shape, grad_b)?)
        } else {
            None
        },
    ))
}
