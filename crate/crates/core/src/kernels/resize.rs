use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interpolation taps along one axis: `(low, high, weight of high)`.
fn taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = T::from_usize_lossy(src) / T::from_usize_lossy(dst);
    let half = T::lit(0.5);
    let max = T::from_usize_lossy(src - 1);
    (0..dst)
        .map(|i| {
            let pos = ((T::from_usize_lossy(i) + half) * scale - half)
                .max(T::zero())
                .min(max);
            let lo = pos.floor();
            let lo_idx = lo.to_usize().expect("clamped coordinate");
            let hi_idx = (lo_idx + 1).min(src - 1);
            (lo_idx, hi_idx, pos - lo)
        })
        .collect()
}

fn check(op: &'static str, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::InvalidArgument {
            op,
            reason: format!("target size {out_h}x{out_w} must be positive"),
        });
    }
    Ok(())
}

/// Bilinear resize with half-pixel centres: output pixel `i` samples
/// source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the image.
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check("bilinear_resize", out_h, out_w)?;
    let (n, c, h, w) = input.dims4("bilinear_resize")?;
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &tx {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back onto the source grid.
pub fn bilinear_resize_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(CoreError::InvalidShape {
            op: "bilinear_resize backward",
            shape: input_shape.to_vec(),
            reason: "expected rank 4".into(),
        });
    };
    let (gn, gc, out_h, out_w) = grad_out.dims4("bilinear_resize backward")?;
    if (gn, gc) != (n, c) {
        return Err(CoreError::ShapeMismatch {
            op: "bilinear_resize backward",
            left: input_shape.to_vec(),
            right: grad_out.shape().to_vec(),
        });
    }
    if (h, w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut grad = vec![T::zero(); n * c * h * w];
    for (dst, src) in grad
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                let top = g * (T::one() - fy);
                let bottom = g * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bottom * (T::one() - fx);
                dst[y1 * w + x1] += bottom * fx;
            }
        }
    }
    Tensor::new(input_shape, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_row_upsample() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f32>::full(&[2, 3, 3, 5], 1.25).unwrap();
        for (h, w) in [(1, 1), (6, 10), (7, 3), (12, 20)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 1.25), "{h}x{w}");
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| (i as f32).sin()).unwrap();
        assert_eq!(bilinear_resize(&x, 4, 4).unwrap(), x);
    }

    #[test]
    fn rejects_empty_target() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }
}
