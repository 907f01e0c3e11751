use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward state of a per-pixel softmax cross-entropy.
#[derive(Clone, Debug)]
pub struct CrossEntropySaved<T> {
    pub probs: Vec<T>,
    pub counted: usize,
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
///
/// `labels` is `N * H * W` long, matching `logits: N, K, H, W`.
pub fn softmax_cross_entropy_mean<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    ignore_index: u32,
) -> Result<(T, CrossEntropySaved<T>)> {
    let (n, k, h, w) = logits.dims4("softmax_cross_entropy")?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(CoreError::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let data = logits.data();
    let mut probs = vec![T::zero(); data.len()];
    let mut total = T::zero();
    let mut counted = 0usize;
    let mut row = vec![T::zero(); k];
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            for (c, r) in row.iter_mut().enumerate() {
                *r = data[base + c * plane + p];
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (c, &v) in row.iter().enumerate() {
                probs[base + c * plane + p] = (v - max).exp() / denom;
            }
            let label = labels[b * plane + p];
            if label == ignore_index {
                continue;
            }
            let label = label as usize;
            if label >= k {
                return Err(CoreError::InvalidArgument {
                    op: "softmax_cross_entropy",
                    reason: format!("label {label} at image {b} pixel {p} outside 0..{k}"),
                });
            }
            total += denom.ln() + max - row[label];
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(CoreError::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: "every pixel is ignored; mean undefined".into(),
        });
    }
    let loss = total / T::from_usize_lossy(counted);
    if !loss.is_finite() {
        return Err(CoreError::NonFinite {
            op: "softmax_cross_entropy",
            index: 0,
        });
    }
    Ok((loss, CrossEntropySaved { probs, counted }))
}

/// Gradient with respect to logits, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    logits_shape: &[usize],
    labels: &[u32],
    ignore_index: u32,
    saved: &CrossEntropySaved<T>,
    grad_out: T,
) -> Result<Tensor<T>> {
    let &[n, k, h, w] = logits_shape else {
        return Err(CoreError::InvalidShape {
            op: "softmax_cross_entropy backward",
            shape: logits_shape.to_vec(),
            reason: "expected rank 4".into(),
        });
    };
    let plane = h * w;
    let scale = grad_out / T::from_usize_lossy(saved.counted);
    let mut grad = vec![T::zero(); saved.probs.len()];
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let label = labels[b * plane + p];
            if label == ignore_index {
                continue;
            }
            for c in 0..k {
                let i = base + c * plane + p;
                let target = if c == label as usize { T::one() } else { T::zero() };
                grad[i] = (saved.probs[i] - target) * scale;
            }
        }
    }
    Tensor::new(logits_shape, grad)
}
