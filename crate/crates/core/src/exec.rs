//! One model definition, two execution strategies.
//!
//! Layers are written once against [`Exec`]. [`Eager`] evaluates kernels
//! directly and records nothing; a [`Tape`] records every step for a later
//! backward pass.

use crate::error::Result;
use crate::kernels::{self, BatchStats};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalise by batch statistics and report them for running-average updates.
    Train,
    /// Normalise by stored running statistics.
    Eval {
        running_mean: &'a Tensor<T>,
        running_var: &'a Tensor<T>,
    },
}

pub trait Exec<T: Scalar> {
    type Value: Clone;

    fn constant(&mut self, value: Tensor<T>) -> Self::Value;

    /// A named parameter. `trainable` decides whether gradients are tracked.
    fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        input: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;

    fn bilinear_resize(&mut self, input: &Self::Value, out_h: usize, out_w: usize) -> Result<Self::Value>;

    fn batch_norm(
        &mut self,
        input: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<(Self::Value, Option<BatchStats<T>>)>;

    fn relu(&mut self, input: &Self::Value) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
}

/// Direct evaluation without recording; used for frozen encoders and inference.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Exec<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn param(&mut self, _name: &str, value: &Tensor<T>, _trainable: bool) -> Tensor<T> {
        value.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let out = kernels::conv2d(input, weight, bias, stride, padding)?;
        out.ensure_finite("conv2d")?;
        Ok(out)
    }

    fn bilinear_resize(&mut self, input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        kernels::bilinear_resize(input, out_h, out_w)
    }

    fn batch_norm(
        &mut self,
        input: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
        let (out, stats) = match mode {
            NormMode::Train => {
                let (out, _, stats) = kernels::batch_norm_train(input, gamma, beta, eps)?;
                (out, Some(stats))
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                let (out, _) =
                    kernels::batch_norm_eval(input, gamma, beta, running_mean, running_var, eps)?;
                (out, None)
            }
        };
        out.ensure_finite("batch_norm")?;
        Ok((out, stats))
    }

    fn relu(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::relu(input))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::add(a, b)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        kernels::concat_channels(parts)
    }
}

impl<T: Scalar> Exec<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        Tape::param(self, name, value, trainable)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        Tape::value(self, *v)
    }

    fn conv2d(
        &mut self,
        input: &Var,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        Tape::conv2d(self, *input, *weight, bias.copied(), stride, padding)
    }

    fn bilinear_resize(&mut self, input: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        Tape::bilinear_resize(self, *input, out_h, out_w)
    }

    fn batch_norm(
        &mut self,
        input: &Var,
        gamma: &Var,
        beta: &Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        match mode {
            NormMode::Train => {
                let (v, stats) = self.batch_norm_train(*input, *gamma, *beta, eps)?;
                Ok((v, Some(stats)))
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => Ok((
                self.batch_norm_eval(*input, *gamma, *beta, running_mean, running_var, eps)?,
                None,
            )),
        }
    }

    fn relu(&mut self, input: &Var) -> Result<Var> {
        Tape::relu(self, *input)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_channels(self, parts)
    }
}
