use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1 to 4, canonically `N, C, H, W`.
///
/// The buffer is reference counted: cloning a tensor is cheap, and a
/// mutation through [`Tensor::data_mut`] copies only when shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape("tensor", shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CoreError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("buffer holds {} elements, shape needs {expected}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape("tensor", shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; len]),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape("tensor", shape)?;
        let len: usize = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new((0..len).map(&mut f).collect()),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(CoreError::InvalidShape {
                op,
                shape: self.shape.clone(),
                reason: "expected rank 4 (N, C, H, W)".into(),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Element-type conversion, e.g. `f32` parameters into an `f64` check.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|&v| U::from(v).expect("finite value converts"))
                    .collect(),
            ),
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(CoreError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Copies image `index` out of a batch along the leading axis.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let n = self.shape[0];
        if index >= n {
            return Err(CoreError::InvalidArgument {
                op: "batch_item",
                reason: format!("index {index} outside batch of {n}"),
            });
        }
        let stride = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: Arc::new(self.data[index * stride..(index + 1) * stride].to_vec()),
        })
    }

    /// Stacks equally shaped tensors along the leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| CoreError::InvalidArgument {
            op: "stack",
            reason: "nothing to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(CoreError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: item.shape.clone(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}

pub(crate) fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
        return Err(CoreError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "dimensions must be positive with rank 1 to 4".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_zero_dims() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn clone_on_write() {
        let a = Tensor::<f32>::full(&[4], 1.0).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn stack_then_split_recovers_items() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64).unwrap();
        let b = a.map(|v| -v);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.batch_item(1).unwrap().data(), b.data());
    }
}
