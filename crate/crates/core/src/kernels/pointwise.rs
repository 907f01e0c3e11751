use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes gradient where the forward output was strictly positive (subgradient 0 at 0).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu backward", output, grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape(), data)
}

pub fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    let out = Tensor::new(a.shape(), data)?;
    out.ensure_finite(op)?;
    Ok(out)
}

/// Elementwise sum; shapes must match exactly.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// Concatenates `N, C_i, H, W` tensors along the channel axis, in order.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| CoreError::InvalidArgument {
        op: "concat_channels",
        reason: "no inputs".into(),
    })?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut channels = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(CoreError::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        channels += pc;
    }
    let mut data = Vec::with_capacity(n * channels * h * w);
    for b in 0..n {
        for p in parts {
            let per = p.len() / n;
            data.extend_from_slice(&p.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::new(&[n, channels, h, w], data)
}

/// Splits a channel-concatenated gradient back into blocks of `channels[i]`.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4("split_channels")?;
    if channels.iter().sum::<usize>() != c {
        return Err(CoreError::InvalidArgument {
            op: "split_channels",
            reason: format!("blocks {channels:?} do not sum to {c} channels"),
        });
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(channels.len());
    let mut offset = 0;
    for &pc in channels {
        let mut data = Vec::with_capacity(n * pc * plane);
        for b in 0..n {
            let start = (b * c + offset) * plane;
            data.extend_from_slice(&grad.data()[start..start + pc * plane]);
        }
        out.push(Tensor::new(&[n, pc, h, w], data)?);
        offset += pc;
    }
    Ok(out)
}
