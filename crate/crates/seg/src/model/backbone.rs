//! Frozen multi-scale residual encoder.

use revhrnet_core::{Eager, Exec, Scalar, Tensor};

use super::layers::{ConvBn, Pass, Phase, ResidualBlock};
use super::params::{ParamStore, Parameter};
use crate::checkpoint::Checkpoint;
use crate::error::{Result, SegError};
use crate::spec::{check_divisible, BackboneSpec, StemKind};

/// Multi-scale encoder output, finest level first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<V> {
    pub levels: Vec<(usize, V)>,
    pub input_size: (usize, usize),
}

impl<V> FeaturePyramid<V> {
    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|(s, _)| *s).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    spec: BackboneSpec,
    store: ParamStore<T>,
    stem: [ConvBn; 2],
    stages: Vec<Vec<ResidualBlock>>,
}

impl<T: Scalar> Backbone<T> {
    /// Builds the encoder with He-initialised weights; every parameter starts frozen.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(seed, true);
        let s = &mut store;
        let first_stride = match spec.stem {
            StemKind::Quarter => 2,
            StemKind::Half => 1,
        };
        let sc = spec.stem_channels;
        let stem = [
            ConvBn::new(s, "backbone.stem.0", 3, sc, 3, first_stride, true),
            ConvBn::new(s, "backbone.stem.1", sc, sc, 3, 2, true),
        ];
        let mut stages = Vec::with_capacity(4);
        let mut cin = sc;
        for (i, (&cout, &blocks)) in spec
            .stage_channels
            .iter()
            .zip(&spec.blocks_per_stage)
            .enumerate()
        {
            // The quarter stem already sits at stride 4; the half stem still needs one halving.
            let stride = if i == 0 && spec.stem == StemKind::Quarter { 1 } else { 2 };
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let name = format!("backbone.stage{}.block{b}", i + 1);
                let (bin, bstride) = if b == 0 { (cin, stride) } else { (cout, 1) };
                stage.push(if spec.uses_bottleneck {
                    ResidualBlock::bottleneck(s, &name, bin, cout, bstride)
                } else {
                    ResidualBlock::basic(s, &name, bin, cout, bstride)
                });
            }
            stages.push(stage);
            cin = cout;
        }
        Ok(Self {
            spec: spec.clone(),
            store,
            stem,
            stages,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn all_frozen(&self) -> bool {
        self.store.iter().all(|p| p.frozen)
    }

    /// Runs the encoder through `exec`. Normalisation always uses stored
    /// running statistics so frozen weights stay bit-identical.
    pub fn encode_with<E: Exec<T>>(&self, exec: &mut E, image: &E::Value) -> Result<FeaturePyramid<E::Value>> {
        let shape = exec.value(image).shape().to_vec();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(SegError::Invalid(format!("expected N,3,H,W image, got {shape:?}")));
        };
        if c != 3 {
            return Err(SegError::Invalid(format!("expected 3 input channels, got {c}")));
        }
        check_divisible(h, w)?;
        let mut pass = Pass::new(exec, Phase::Eval);
        let mut x = self.stem[0].forward(&mut pass, &self.store, image)?;
        x = self.stem[1].forward(&mut pass, &self.store, &x)?;
        let strides = self.spec.strides();
        let mut levels = Vec::with_capacity(strides.len());
        if self.spec.stem == StemKind::Half {
            levels.push((2, x.clone()));
        }
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&mut pass, &self.store, &x)?;
            }
            levels.push((strides[levels.len()], x.clone()));
        }
        Ok(FeaturePyramid {
            levels,
            input_size: (h, w),
        })
    }

    /// Tape-free encoding.
    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<Tensor<T>>> {
        self.encode_with(&mut Eager, image)
    }

    /// Overwrites every parameter (values and frozen flags) from `checkpoint`.
    /// Names and shapes must match the encoder's table exactly; nothing is
    /// modified when any entry is missing, extra or misshapen.
    pub fn load_pretrained(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.apply_to(self.store.iter_mut().collect::<Vec<&mut Parameter<T>>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_pyramid_geometry() {
        let b = Backbone::<f32>::build(&BackboneSpec::desk(StemKind::Quarter), 1).unwrap();
        let img = Tensor::full(&[1, 3, 64, 64], 0.25).unwrap();
        let p = b.encode(&img).unwrap();
        assert_eq!(p.strides(), vec![4, 8, 16, 32]);
        let dims: Vec<_> = p.levels.iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 64, 4, 4], vec![1, 128, 2, 2]]
        );
    }

    #[test]
    fn half_stem_adds_stride_two_level() {
        let b = Backbone::<f32>::build(&BackboneSpec::desk(StemKind::Half), 1).unwrap();
        let img = Tensor::full(&[1, 3, 64, 64], 0.25).unwrap();
        let p = b.encode(&img).unwrap();
        assert_eq!(p.strides(), vec![2, 4, 8, 16, 32]);
        assert_eq!(p.levels[0].1.shape(), &[1, 16, 32, 32]);
        assert_eq!(p.levels[1].1.shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn built_frozen_and_deterministic() {
        let spec = BackboneSpec::desk(StemKind::Quarter);
        let a = Backbone::<f32>::build(&spec, 9).unwrap();
        let b = Backbone::<f32>::build(&spec, 9).unwrap();
        assert!(a.all_frozen());
        assert!(a.params().iter().zip(b.params().iter()).all(|(x, y)| x == y));
        let c = Backbone::<f32>::build(&spec, 10).unwrap();
        assert!(a.params().iter().zip(c.params().iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn rejects_indivisible_input() {
        let b = Backbone::<f32>::build(&BackboneSpec::desk(StemKind::Quarter), 1).unwrap();
        let err = b.encode(&Tensor::zeros(&[1, 3, 48, 64]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }
}
