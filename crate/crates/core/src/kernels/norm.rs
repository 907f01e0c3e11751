use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics a batch-norm forward pass keeps for its backward.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Whether `mean`/`inv_std` came from the batch itself (train mode).
    pub batch_stats: bool,
}

/// Statistics of a train-mode pass, for updating running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (divides by `count - 1`, or by 1 for a single element).
    pub var: Vec<T>,
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "batch_norm",
                left: vec![c],
                right: p.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn affine<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    let (_, c, h, w) = input.dims4("batch_norm")?;
    let plane = h * w;
    let mut out = Vec::with_capacity(input.len());
    for (i, chunk) in input.data().chunks_exact(plane).enumerate() {
        let ch = i % c;
        let scale = gamma.data()[ch] * inv_std[ch];
        let shift = beta.data()[ch] - mean[ch] * scale;
        out.extend(chunk.iter().map(|&x| x * scale + shift));
    }
    Tensor::new(input.shape(), out)
}

/// Train-mode batch normalisation over `N, H, W` per channel.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormSaved<T>, BatchStats<T>)> {
    if !(eps > T::zero()) {
        return Err(CoreError::InvalidArgument {
            op: "batch_norm",
            reason: "epsilon must be positive".into(),
        });
    }
    let (n, c, h, w) = input.dims4("batch_norm")?;
    check_affine(c, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    let m = T::from_usize_lossy(count);
    let mut mean = vec![T::zero(); c];
    for (i, chunk) in input.data().chunks_exact(plane).enumerate() {
        mean[i % c] += chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut sq = vec![T::zero(); c];
    for (i, chunk) in input.data().chunks_exact(plane).enumerate() {
        let mu = mean[i % c];
        sq[i % c] += chunk.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>();
    }
    let inv_std: Vec<T> = sq.iter().map(|&s| (s / m + eps).sqrt().recip()).collect();
    let unbiased = T::from_usize_lossy(count.saturating_sub(1).max(1));
    let var = sq.iter().map(|&s| s / unbiased).collect();
    let out = affine(input, gamma, beta, &mean, &inv_std)?;
    Ok((
        out,
        NormSaved {
            mean: mean.clone(),
            inv_std,
            batch_stats: true,
        },
        BatchStats { mean, var },
    ))
}

/// Eval-mode batch normalisation using stored running statistics.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    if !(eps > T::zero()) {
        return Err(CoreError::InvalidArgument {
            op: "batch_norm",
            reason: "epsilon must be positive".into(),
        });
    }
    let (_, c, _, _) = input.dims4("batch_norm")?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| (v + eps).sqrt().recip())
        .collect();
    let mean = running_mean.data().to_vec();
    let out = affine(input, gamma, beta, &mean, &inv_std)?;
    Ok((
        out,
        NormSaved {
            mean,
            inv_std,
            batch_stats: false,
        },
    ))
}

/// Gradients with respect to input, gamma and beta.
pub fn batch_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &NormSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.dims4("batch_norm backward")?;
    let plane = h * w;
    let m = T::from_usize_lossy(n * plane);
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_gamma = vec![T::zero(); c];
    for (i, (xs, gs)) in input
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is) = (saved.mean[ch], saved.inv_std[ch]);
        for (&x, &g) in xs.iter().zip(gs) {
            grad_beta[ch] += g;
            grad_gamma[ch] += g * (x - mu) * is;
        }
    }
    let mut grad_in = Vec::with_capacity(input.len());
    for (i, (xs, gs)) in input
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is, gm) = (saved.mean[ch], saved.inv_std[ch], gamma.data()[ch]);
        if saved.batch_stats {
            let k = gm * is / m;
            let (db, dg) = (grad_beta[ch], grad_gamma[ch]);
            grad_in.extend(
                xs.iter()
                    .zip(gs)
                    .map(|(&x, &g)| k * (m * g - db - (x - mu) * is * dg)),
            );
        } else {
            grad_in.extend(gs.iter().map(|&g| g * gm * is));
        }
    }
    Ok((
        Tensor::new(input.shape(), grad_in)?,
        Tensor::new(&[c], grad_gamma)?,
        Tensor::new(&[c], grad_beta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(t: &Tensor<f64>, c: usize) -> Vec<(f64, f64)> {
        let (n, cc, h, w) = t.dims4("test").unwrap();
        let plane = h * w;
        let mut vals = vec![Vec::new(); cc];
        for (i, chunk) in t.data().chunks_exact(plane).enumerate() {
            vals[i % cc].extend_from_slice(chunk);
        }
        let _ = (n, c);
        vals.iter()
            .map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
                (m, var)
            })
            .collect()
    }

    #[test]
    fn train_mode_standardises_each_channel() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| ((i * 7919) % 101) as f64 * 0.3 - 4.0)
            .unwrap();
        let ones = Tensor::full(&[3], 1.0).unwrap();
        let zeros = Tensor::zeros(&[3]).unwrap();
        let (y, _, _) = batch_norm_train(&x, &ones, &zeros, 1e-12).unwrap();
        for (m, v) in channel_moments(&y, 3) {
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9, "{m} {v}");
        }
    }

    #[test]
    fn eval_identity_statistics_pass_input_through() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| i as f32 - 9.0).unwrap();
        let ones = Tensor::full(&[2], 1.0).unwrap();
        let zeros = Tensor::zeros(&[2]).unwrap();
        let (y, _) = batch_norm_eval(&x, &ones, &zeros, &zeros, &ones, 1e-5).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn affine_applies_after_normalisation() {
        // zero-mean, unit-variance per channel already
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let gamma = Tensor::full(&[1], 2.0).unwrap();
        let beta = Tensor::full(&[1], 3.0).unwrap();
        let (y, _, _) = batch_norm_train(&x, &gamma, &beta, 1e-14).unwrap();
        let expect = x.map(|v| 2.0 * v + 3.0);
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        let p = Tensor::zeros(&[1]).unwrap();
        assert!(batch_norm_train(&x, &p, &p, 0.0).is_err());
    }
}
