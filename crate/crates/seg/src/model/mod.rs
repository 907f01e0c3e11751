//! Frozen encoder + reverse HRNet decoder.

mod backbone;
mod decoder;
mod layers;
mod params;

use std::path::{Path, PathBuf};

use revhrnet_core::{Eager, Exec, Scalar, Tensor};

pub use backbone::{Backbone, FeaturePyramid};
pub use decoder::{Decoder, DecoderOutput, DecoderStage, FuseTransform};
pub use layers::{BnUpdate, ConvBn, ConvLayer, NormLayer, Pass, Phase, ResidualBlock, BN_EPS, BN_MOMENTUM};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};

use crate::error::{Result, SegError};
use crate::netpbm;
use crate::spec::ArchitectureSpec;

/// Output of [`SegModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<V, T> {
    pub logits: V,
    /// Adapter outputs keyed by stride, finest first.
    pub adapted: Vec<(usize, V)>,
    /// Streams entering each decoder stage, e.g. `[4, 3, 2, 1]`.
    pub stream_counts: Vec<usize>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    spec: ArchitectureSpec,
    backbone: Backbone<T>,
    decoder: Decoder<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let backbone = Backbone::build(&spec.backbone, seed)?;
        let decoder = Decoder::build(
            &spec.decoder,
            &spec.backbone.pyramid_channels(),
            seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )?;
        Ok(Self {
            spec: spec.clone(),
            backbone,
            decoder,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone<T> {
        &mut self.backbone
    }

    pub fn decoder(&self) -> &Decoder<T> {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Decoder<T> {
        &mut self.decoder
    }

    /// Full parameter table: encoder entries, then decoder entries.
    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.backbone.params().iter().chain(self.decoder.params().iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.backbone
            .params_mut()
            .iter_mut()
            .chain(self.decoder.params_mut().iter_mut())
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params_mut().find(|p| p.name == name)
    }

    pub fn element_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    /// Runs the whole network through `exec`.
    ///
    /// A fully frozen encoder is evaluated eagerly and its pyramid enters
    /// `exec` as constants, so none of its internals are recorded on a tape.
    /// `phase` applies to decoder normalisation only.
    pub fn forward<E: Exec<T>>(
        &self,
        exec: &mut E,
        image: &Tensor<T>,
        phase: Phase,
    ) -> Result<ForwardOutput<E::Value, T>> {
        let pyramid = if self.backbone.all_frozen() {
            let p = self.backbone.encode(image)?;
            FeaturePyramid {
                levels: p.levels.into_iter().map(|(s, t)| (s, exec.constant(t))).collect(),
                input_size: p.input_size,
            }
        } else {
            let img = exec.constant(image.clone());
            self.backbone.encode_with(exec, &img)?
        };
        let strides = pyramid.strides();
        let levels: Vec<E::Value> = pyramid.levels.into_iter().map(|(_, v)| v).collect();
        let mut pass = Pass::new(exec, phase);
        let out = self.decoder.run(&mut pass, &levels, pyramid.input_size)?;
        let updates = pass.updates;
        Ok(ForwardOutput {
            logits: out.logits,
            adapted: strides.into_iter().zip(out.adapted).collect(),
            stream_counts: out.stream_counts,
            bn_updates: updates,
        })
    }

    /// Eval-mode logits without a tape.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(&mut Eager, image, Phase::Eval)?.logits)
    }

    /// Per-pixel argmax labels, `N * H * W` long.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<u32>> {
        Ok(argmax_channels(&self.infer(image)?))
    }

    /// Folds train-mode batch statistics into the decoder's running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let momentum = T::lit(BN_MOMENTUM);
        for u in updates {
            u.apply(self.decoder.params_mut(), momentum);
        }
    }

    /// Writes one `stride-<s>.pgm` per adapter output: the channel mean,
    /// min-max scaled to 0..=255 (a constant map becomes 128). Uses the
    /// first image of the batch.
    pub fn dump_feature_maps(&self, image: &Tensor<T>, out_dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out_dir).map_err(|e| SegError::io(out_dir, e))?;
        let out = self.forward(&mut Eager, image, Phase::Eval)?;
        let mut written = Vec::with_capacity(out.adapted.len());
        for (stride, t) in &out.adapted {
            let (_, c, h, w) = t.dims4("dump_feature_maps")?;
            let plane = h * w;
            let mut mean = vec![T::zero(); plane];
            for ch in t.data()[..c * plane].chunks_exact(plane) {
                mean.iter_mut().zip(ch).for_each(|(m, &v)| *m += v);
            }
            let cnt = T::from_usize_lossy(c);
            mean.iter_mut().for_each(|m| *m /= cnt);
            let path = out_dir.join(format!("stride-{stride}.pgm"));
            netpbm::write_pgm(&path, w, h, &normalize_to_u8(&mean))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Min-max scaling to `0..=255`; a constant input maps to 128.
pub fn normalize_to_u8<T: Scalar>(values: &[T]) -> Vec<u8> {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            ((v - lo) / range * T::lit(255.0))
                .round()
                .to_u8()
                .unwrap_or(255)
        })
        .collect()
}

/// Index of the largest logit per pixel (lowest index on ties).
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let s = logits.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * plane + p] > d[base + best * plane + p] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_pins_constant_maps() {
        assert_eq!(normalize_to_u8(&[0.5f32; 4]), vec![128; 4]);
        assert_eq!(normalize_to_u8(&[0.0f32, 1.0, 0.5]), vec![0, 255, 128]);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::<f32>::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
