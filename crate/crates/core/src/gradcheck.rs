//! Central finite-difference checks for every differentiable operator.
//!
//! The numeric side only calls forward kernels; the analytic side runs a
//! [`Tape`] backward pass. Each check reduces the operator output to a
//! scalar through a random projection `sum(r * op(x))` so that no
//! gradient is structurally zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operator {
    Conv2d,
    BilinearResize,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Add,
    Mul,
    ConcatChannels,
    SoftmaxCrossEntropy,
}

impl Operator {
    pub const ALL: [Operator; 9] = [
        Operator::Conv2d,
        Operator::BilinearResize,
        Operator::BatchNormTrain,
        Operator::BatchNormEval,
        Operator::Relu,
        Operator::Add,
        Operator::Mul,
        Operator::ConcatChannels,
        Operator::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Conv2d => "conv2d",
            Operator::BilinearResize => "bilinear_resize",
            Operator::BatchNormTrain => "batch_norm(train)",
            Operator::BatchNormEval => "batch_norm(eval)",
            Operator::Relu => "relu",
            Operator::Add => "add",
            Operator::Mul => "mul",
            Operator::ConcatChannels => "concat_channels",
            Operator::SoftmaxCrossEntropy => "softmax_cross_entropy_mean",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: Operator,
    pub seed: u64,
    /// Max over elements of `|analytic - numeric| / (|numeric| + 1e-8)`.
    pub max_rel_error: f64,
    pub elements: usize,
}

/// Elementwise relative error with the `1e-8` floor used throughout.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of several tensors, with respect to input `which`.
pub fn numeric_gradient(
    inputs: &[Tensor<f64>],
    which: usize,
    step: f64,
    f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut grad = vec![0.0; inputs[which].len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work)?;
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work)?;
        work[which].data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * step);
    }
    Tensor::new(inputs[which].shape(), grad)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("valid shape")
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(2..=8),
        rng.gen_range(2..=8),
    ]
}

fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

type Forward = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;
type Record = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    record: Record,
    /// Output is already the scalar loss (no random projection).
    scalar: bool,
}

fn build_case(op: Operator, rng: &mut ChaCha8Rng) -> Case {
    let d = dims(rng);
    match op {
        Operator::Conv2d => {
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            let stride = rng.gen_range(1..=2);
            let padding = if k == 3 { rng.gen_range(0..=1) } else { 0 };
            let (h, w) = (d[2].max(3), d[3].max(3));
            let cout = rng.gen_range(1..=4);
            let x = random(rng, &[d[0], d[1], h, w]);
            let wt = random(rng, &[cout, d[1], k, k]);
            let b = random(rng, &[cout]);
            Case {
                inputs: vec![x, wt, b],
                forward: Box::new(move |t| kernels::conv2d(&t[0], &t[1], Some(&t[2]), stride, padding)),
                record: Box::new(move |tape, v| tape.conv2d(v[0], v[1], Some(v[2]), stride, padding)),
                scalar: false,
            }
        }
        Operator::BilinearResize => {
            let (oh, ow) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
            Case {
                inputs: vec![random(rng, &d)],
                forward: Box::new(move |t| kernels::bilinear_resize(&t[0], oh, ow)),
                record: Box::new(move |tape, v| tape.bilinear_resize(v[0], oh, ow)),
                scalar: false,
            }
        }
        Operator::BatchNormTrain => {
            let c = d[1];
            let x = random(rng, &d).map(|v| 2.0 * v + 0.3);
            let gamma = random(rng, &[c]).map(|v| v + 1.5);
            let beta = random(rng, &[c]);
            Case {
                inputs: vec![x, gamma, beta],
                forward: Box::new(|t| Ok(kernels::batch_norm_train(&t[0], &t[1], &t[2], 1e-5)?.0)),
                record: Box::new(|tape, v| Ok(tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
                scalar: false,
            }
        }
        Operator::BatchNormEval => {
            let c = d[1];
            let x = random(rng, &d);
            let gamma = random(rng, &[c]);
            let beta = random(rng, &[c]);
            let mean = random(rng, &[c]);
            let var = random(rng, &[c]).map(|v| v.abs() + 0.5);
            let (m2, v2) = (mean.clone(), var.clone());
            Case {
                inputs: vec![x, gamma, beta],
                forward: Box::new(move |t| Ok(kernels::batch_norm_eval(&t[0], &t[1], &t[2], &mean, &var, 1e-5)?.0)),
                record: Box::new(move |tape, v| tape.batch_norm_eval(v[0], v[1], v[2], &m2, &v2, 1e-5)),
                scalar: false,
            }
        }
        Operator::Relu => {
            // keep clear of the kink so both difference points share a branch
            let x = random(rng, &d).map(|v| v.signum() * (0.01 + v.abs()));
            Case {
                inputs: vec![x],
                forward: Box::new(|t| Ok(kernels::relu(&t[0]))),
                record: Box::new(|tape, v| tape.relu(v[0])),
                scalar: false,
            }
        }
        Operator::Add | Operator::Mul => {
            let a = random(rng, &d);
            let b = random(rng, &d);
            let is_add = op == Operator::Add;
            Case {
                inputs: vec![a, b],
                forward: Box::new(move |t| {
                    if is_add {
                        kernels::add(&t[0], &t[1])
                    } else {
                        kernels::mul(&t[0], &t[1])
                    }
                }),
                record: Box::new(move |tape, v| {
                    if is_add {
                        tape.add(v[0], v[1])
                    } else {
                        tape.mul(v[0], v[1])
                    }
                }),
                scalar: false,
            }
        }
        Operator::ConcatChannels => {
            let parts = rng.gen_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let c = rng.gen_range(1..=4);
                    random(rng, &[d[0], c, d[2], d[3]])
                })
                .collect();
            Case {
                inputs,
                forward: Box::new(|t| kernels::concat_channels(t)),
                record: Box::new(|tape, v| tape.concat_channels(v)),
                scalar: false,
            }
        }
        Operator::SoftmaxCrossEntropy => {
            let k = rng.gen_range(2..=4);
            let logits = random(rng, &[d[0], k, d[2], d[3]]).map(|v| 3.0 * v);
            let mut labels: Vec<u32> = (0..d[0] * d[2] * d[3])
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        255
                    } else {
                        rng.gen_range(0..k as u32)
                    }
                })
                .collect();
            labels[0] = 0;
            let l2 = labels.clone();
            Case {
                inputs: vec![logits],
                forward: Box::new(move |t| {
                    Ok(Tensor::scalar(kernels::softmax_cross_entropy_mean(&t[0], &labels, 255)?.0))
                }),
                record: Box::new(move |tape, v| tape.softmax_cross_entropy_mean(v[0], &l2, 255)),
                scalar: true,
            }
        }
    }
}

/// Runs the finite-difference check of `op` on inputs drawn from `seed`.
pub fn check_operator(op: Operator, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (op as u64) << 32);
    let case = build_case(op, &mut rng);

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = (case.record)(&mut tape, &vars)?;
    let proj = random(&mut rng, tape.value(out).shape());
    let loss = if case.scalar {
        out
    } else {
        let r = tape.leaf(proj.clone(), false);
        let prod = tape.mul(out, r)?;
        tape.sum(prod)?
    };
    let grads = tape.backward(loss)?;

    let forward = &case.forward;
    let scalar = case.scalar;
    let objective = move |t: &[Tensor<f64>]| -> Result<f64> {
        let out = forward(t)?;
        Ok(if scalar { out.data()[0] } else { project(&out, &proj) })
    };

    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_gradient(&case.inputs, i, FD_STEP, &objective)?;
        let analytic = grads.get(*v).expect("leaf requires grad");
        worst = worst.max(max_relative_error(analytic, &numeric));
        elements += numeric.len();
    }
    Ok(GradCheckReport {
        op,
        seed,
        max_rel_error: worst,
        elements,
    })
}
