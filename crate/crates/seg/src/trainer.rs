//! SGD training loop with frozen-encoder enforcement.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use revhrnet_core::{CoreError, Eager, Gradients, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataio::{collate, load_split, BatchSchedule, DatasetManifest, Sample, Split};
use crate::error::{Result, SegError};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{argmax_channels, Parameter, Phase, SegModel};
use crate::spec::hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps: 300,
            batch_size: 8,
            seed: 0,
            eval_every: 50,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SegError::Invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SegError::Invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(SegError::Invalid(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.steps == 0 {
            return Err(SegError::Invalid("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SegError::Invalid("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(SegError::Invalid("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + g + weight_decay * w; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.learning_rate, config.momentum, config.weight_decay)
    }

    /// Updates every trainable parameter from `grad_of`. Frozen parameters and
    /// buffers are skipped even when a gradient exists. Gradients and updated
    /// values are all checked for finiteness before any parameter moves.
    pub fn step<'a, F>(&mut self, params: Vec<&'a mut Parameter<T>>, step: usize, grad_of: F) -> Result<()>
    where
        T: 'a,
        F: Fn(&str) -> Option<&'a Tensor<T>>,
    {
        let mut work = Vec::with_capacity(params.len());
        for p in params {
            if !p.trainable() {
                continue;
            }
            let g = grad_of(&p.name).ok_or_else(|| SegError::Invalid(format!("no gradient for {}", p.name)))?;
            if g.shape() != p.value.shape() {
                return Err(SegError::Invalid(format!(
                    "gradient of {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(SegError::NonFinite {
                    what: "gradient",
                    step,
                    param: Some(p.name.clone()),
                });
            }
            work.push((p, g));
        }
        let lr = T::lit(self.learning_rate);
        let mom = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        let mut updates = Vec::with_capacity(work.len());
        for (p, g) in work {
            let old_v = self.velocity.get(&p.name);
            let mut v = Vec::with_capacity(g.len());
            let mut w = Vec::with_capacity(g.len());
            for (i, (&wi, &gi)) in p.value.data().iter().zip(g.data()).enumerate() {
                let vi = mom * old_v.map_or(T::zero(), |o| o[i]) + gi + wd * wi;
                v.push(vi);
                w.push(wi - lr * vi);
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(SegError::NonFinite {
                    what: "parameter update",
                    step,
                    param: Some(p.name.clone()),
                });
            }
            updates.push((p, v, w));
        }
        for (p, v, w) in updates {
            p.value.data_mut().copy_from_slice(&w);
            self.velocity.insert(p.name.clone(), v);
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Header {
        fingerprint: String,
        streams: usize,
        stream_counts: Vec<usize>,
        total_params: usize,
        trainable_params: usize,
        train_samples: usize,
        eval_split: Split,
        config: TrainConfig,
    },
    Step {
        step: usize,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        pixel_accuracy: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        mean_iou: Option<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<LogRecord>,
    pub final_loss: f64,
    pub final_metrics: MetricsReport,
}

/// Eval-mode confusion matrix of `model` over preloaded samples.
pub fn evaluate<T: Scalar>(
    model: &SegModel<T>,
    samples: &[Sample<T>],
    batch_size: usize,
    ignore_index: u32,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.spec().decoder.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let batch = collate(&refs)?;
        let logits = model.forward(&mut Eager, &batch.images, Phase::Eval)?.logits;
        let width = batch.images.shape()[3];
        cm.update(&argmax_channels(&logits), &batch.labels, width, ignore_index)?;
    }
    Ok(cm)
}

/// Re-tags a kernel overflow as a training-step numeric failure.
fn at_step(step: usize) -> impl Fn(SegError) -> SegError {
    move |e| match e {
        SegError::Core(CoreError::NonFinite { op, .. }) => SegError::NonFinite {
            what: "activation",
            step,
            param: Some(op.to_string()),
        },
        other => other,
    }
}

fn emit(log: &mut dyn Write, record: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(log, "{line}").map_err(|e| SegError::io("<training log>", e))
}

/// Trains the decoder on the manifest's train split.
///
/// Evaluation runs on the val split, or on train when val is empty, every
/// `eval_every` steps and after the last one. The checkpoint (if configured)
/// is written after each evaluation; a non-finite loss aborts before the
/// next write, so the file on disk always holds the last good state.
pub fn train<T: Scalar>(
    model: &mut SegModel<T>,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    let k = model.spec().decoder.num_classes;
    if k != manifest.num_classes {
        return Err(SegError::Invalid(format!(
            "model predicts {k} classes, dataset has {}",
            manifest.num_classes
        )));
    }
    let train_set: Vec<Sample<T>> = load_split(manifest, Split::Train)?;
    if train_set.is_empty() {
        return Err(SegError::Invalid("train split is empty".into()));
    }
    let eval_split = if manifest.ids(Split::Val).is_empty() { Split::Train } else { Split::Val };
    let eval_set: Vec<Sample<T>> = match eval_split {
        Split::Train => train_set.clone(),
        other => load_split(manifest, other)?,
    };

    let mut schedule = BatchSchedule::new(&train_set, config.batch_size, config.seed)?;
    let mut sgd = Sgd::from_config(config);
    let mut records = Vec::with_capacity(config.steps + 1);
    let mut final_loss = f64::NAN;
    let mut final_metrics = None;

    for step in 1..=config.steps {
        let batch = schedule.next_batch()?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.images, Phase::Train).map_err(at_step(step))?;
        if step == 1 {
            let header = LogRecord::Header {
                fingerprint: hex(&model.spec().fingerprint()),
                streams: out.stream_counts[0],
                stream_counts: out.stream_counts.clone(),
                total_params: model.element_count(),
                trainable_params: model.params().filter(|p| p.trainable()).map(|p| p.value.len()).sum(),
                train_samples: train_set.len(),
                eval_split,
                // Output locations stay out of the log so reruns elsewhere match.
                config: TrainConfig {
                    checkpoint_path: None,
                    ..config.clone()
                },
            };
            emit(log, &header)?;
            records.push(header);
        }
        let loss_var = tape
            .softmax_cross_entropy_mean(out.logits, &batch.labels, manifest.ignore_index)
            .map_err(|e| at_step(step)(e.into()))?;
        let loss = tape.value(loss_var).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(SegError::NonFinite {
                what: "loss",
                step,
                param: None,
            });
        }
        let grads: Gradients<T> = tape.backward(loss_var).map_err(|e| at_step(step)(e.into()))?;
        sgd.step(model.params_mut().collect(), step, |name| grads.param(name))?;
        model.apply_bn_updates(&out.bn_updates);
        final_loss = loss;

        let (mut pixel_accuracy, mut mean_iou) = (None, None);
        if step % config.eval_every == 0 || step == config.steps {
            let report = evaluate(model, &eval_set, config.batch_size, manifest.ignore_index)
                .map_err(at_step(step))?
                .report()?;
            pixel_accuracy = Some(report.pixel_accuracy);
            mean_iou = Some(report.mean_iou);
            final_metrics = Some(report);
            if let Some(path) = &config.checkpoint_path {
                save_checkpoint(model, path)?;
            }
        }
        let record = LogRecord::Step {
            step,
            loss,
            pixel_accuracy,
            mean_iou,
        };
        emit(log, &record)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        final_loss,
        final_metrics: final_metrics.expect("final step evaluates"),
    })
}
