//! Reverse HRNet decoder.
//!
//! All pyramid levels enter at once as parallel streams. Each stage runs
//! residual blocks per stream and an all-to-all fusion; between stages the
//! coarsest stream is folded into its neighbour and dropped, until a
//! single stride-4 (or stride-2) stream feeds the classification head.

use revhrnet_core::{Exec, Scalar};

use super::layers::{ConvBn, ConvLayer, Pass, ResidualBlock};
use super::params::ParamStore;
use crate::error::{Result, SegError};
use crate::spec::DecoderSpec;

/// Path carrying stream `from` into stream `to` during fusion.
#[derive(Clone, Debug)]
pub enum FuseTransform {
    /// Coarser source: 1x1 convolution, then bilinear resize to the target.
    Up(ConvLayer),
    /// Finer source: stride-2 3x3 convolutions. All but the last keep the
    /// source width and are followed by BN + ReLU; the last maps to the
    /// target width and feeds the sum directly.
    Down { chain: Vec<ConvBn>, last: ConvLayer },
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// Residual blocks of each stream, highest resolution first.
    pub blocks: Vec<Vec<ResidualBlock>>,
    /// `fuse[to][from]`; `None` on the diagonal.
    pub fuse: Vec<Vec<Option<FuseTransform>>>,
}

impl DecoderStage {
    pub fn streams(&self) -> usize {
        self.blocks.len()
    }
}

/// Output of a decoder run.
#[derive(Clone, Debug)]
pub struct DecoderOutput<V> {
    pub logits: V,
    /// Adapter outputs, finest first.
    pub adapted: Vec<V>,
    /// Stream count entering each stage.
    pub stream_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    spec: DecoderSpec,
    store: ParamStore<T>,
    pub(crate) adapters: Vec<ConvLayer>,
    pub(crate) stages: Vec<DecoderStage>,
    pub(crate) merges: Vec<ConvLayer>,
    pub(crate) head: ConvLayer,
}

fn hw<T: Scalar, E: Exec<T>>(exec: &E, v: &E::Value) -> (usize, usize, usize) {
    let s = exec.value(v).shape();
    (s[1], s[2], s[3])
}

impl<T: Scalar> Decoder<T> {
    /// `pyramid_channels` are the encoder level widths, finest first.
    pub fn build(spec: &DecoderSpec, pyramid_channels: &[usize], seed: u64) -> Result<Self> {
        let widths = &spec.stream_widths;
        if pyramid_channels.len() != widths.len() || spec.blocks_per_stage.len() != widths.len() {
            return Err(SegError::Spec(format!(
                "{} pyramid levels, {} streams, {} stages",
                pyramid_channels.len(),
                widths.len(),
                spec.blocks_per_stage.len()
            )));
        }
        let mut store = ParamStore::new(seed, false);
        let s = &mut store;
        let adapters = pyramid_channels
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&cin, &cout))| ConvLayer::new(s, &format!("decoder.adapter{i}"), cin, cout, 1, 1, true))
            .collect();

        let total = widths.len();
        let mut stages = Vec::with_capacity(total);
        let mut merges = Vec::with_capacity(total - 1);
        for (si, &blocks) in spec.blocks_per_stage.iter().enumerate() {
            let n = total - si;
            let prefix = format!("decoder.stage{si}");
            let blocks = (0..n)
                .map(|i| {
                    (0..blocks)
                        .map(|b| {
                            ResidualBlock::basic(s, &format!("{prefix}.stream{i}.block{b}"), widths[i], widths[i], 1)
                        })
                        .collect()
                })
                .collect();
            let fuse = (0..n)
                .map(|to| {
                    (0..n)
                        .map(|from| Self::transform(s, &prefix, from, to, widths))
                        .collect()
                })
                .collect();
            stages.push(DecoderStage { blocks, fuse });
            if n > 1 {
                merges.push(ConvLayer::new(
                    s,
                    &format!("decoder.merge{si}"),
                    widths[n - 1],
                    widths[n - 2],
                    1,
                    1,
                    true,
                ));
            }
        }
        let head = ConvLayer::new(s, "decoder.head", widths[0], spec.num_classes, 1, 1, true);
        Ok(Self {
            spec: spec.clone(),
            store,
            adapters,
            stages,
            merges,
            head,
        })
    }

    fn transform(
        s: &mut ParamStore<T>,
        prefix: &str,
        from: usize,
        to: usize,
        widths: &[usize],
    ) -> Option<FuseTransform> {
        let name = format!("{prefix}.fuse.{from}to{to}");
        if from > to {
            Some(FuseTransform::Up(ConvLayer::new(s, &name, widths[from], widths[to], 1, 1, true)))
        } else if from < to {
            let steps = to - from;
            let chain = (0..steps - 1)
                .map(|k| ConvBn::new(s, &format!("{name}.down{k}"), widths[from], widths[from], 3, 2, true))
                .collect();
            let last = ConvLayer::new(
                s,
                &format!("{name}.down{}", steps - 1),
                widths[from],
                widths[to],
                3,
                2,
                true,
            );
            Some(FuseTransform::Down { chain, last })
        } else {
            None
        }
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stages(&self) -> &[DecoderStage] {
        &self.stages
    }

    /// Maps each pyramid level to its stream width with a 1x1 convolution.
    pub fn adapt<E: Exec<T>>(&self, pass: &mut Pass<'_, T, E>, levels: &[E::Value]) -> Result<Vec<E::Value>> {
        if levels.len() != self.adapters.len() {
            return Err(SegError::Invalid(format!(
                "decoder expects {} pyramid levels, got {}",
                self.adapters.len(),
                levels.len()
            )));
        }
        levels
            .iter()
            .zip(&self.adapters)
            .enumerate()
            .map(|(i, (x, a))| {
                let expected = self.store.get(a.weight).value.shape()[1];
                let (c, _, _) = hw(&*pass.exec, x);
                if c != expected {
                    return Err(SegError::Invalid(format!(
                        "pyramid level {i} has {c} channels, adapter expects {expected}"
                    )));
                }
                a.forward(pass, &self.store, x)
            })
            .collect()
    }

    /// `out[i] = relu(sum_j T(j -> i)(streams[j]))` with the identity on the diagonal.
    pub fn fuse<E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        stage: usize,
        streams: &[E::Value],
    ) -> Result<Vec<E::Value>> {
        let st = &self.stages[stage];
        if streams.len() != st.streams() {
            return Err(SegError::Invalid(format!(
                "stage {stage} fuses {} streams, got {}",
                st.streams(),
                streams.len()
            )));
        }
        let dims: Vec<_> = streams.iter().map(|v| hw(&*pass.exec, v)).collect();
        for (k, pair) in dims.windows(2).enumerate() {
            let (_, h0, w0) = pair[0];
            let (_, h1, w1) = pair[1];
            if h1 != h0.div_ceil(2) || w1 != w0.div_ceil(2) {
                return Err(SegError::Invalid(format!(
                    "stream {} is {h1}x{w1}, expected half of stream {k} ({h0}x{w0})",
                    k + 1
                )));
            }
        }
        let mut out = Vec::with_capacity(streams.len());
        for (to, row) in st.fuse.iter().enumerate() {
            let (_, th, tw) = dims[to];
            let mut acc = streams[to].clone();
            for (from, t) in row.iter().enumerate() {
                let Some(t) = t else { continue };
                let contrib = match t {
                    FuseTransform::Up(conv) => {
                        let y = conv.forward(pass, &self.store, &streams[from])?;
                        pass.exec.bilinear_resize(&y, th, tw)?
                    }
                    FuseTransform::Down { chain, last } => {
                        let mut y = streams[from].clone();
                        for step in chain {
                            y = step.forward(pass, &self.store, &y)?;
                        }
                        last.forward(pass, &self.store, &y)?
                    }
                };
                acc = pass.exec.add(&acc, &contrib)?;
            }
            out.push(pass.exec.relu(&acc)?);
        }
        Ok(out)
    }

    /// Per-stream residual blocks followed by one fusion.
    pub fn decoder_stage<E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        stage: usize,
        streams: &[E::Value],
    ) -> Result<Vec<E::Value>> {
        let st = &self.stages[stage];
        let mut next = Vec::with_capacity(streams.len());
        for (x, blocks) in streams.iter().zip(&st.blocks) {
            let mut y = x.clone();
            for b in blocks {
                y = b.forward(pass, &self.store, &y)?;
            }
            next.push(y);
        }
        self.fuse(pass, stage, &next)
    }

    /// Adds the 1x1-projected, upsampled coarsest stream into its neighbour and drops it.
    pub fn merge_drop_lowest<E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        stage: usize,
        streams: &[E::Value],
    ) -> Result<Vec<E::Value>> {
        let n = streams.len();
        if n < 2 {
            return Err(SegError::Invalid("merge needs at least two streams".into()));
        }
        let conv = self
            .merges
            .get(stage)
            .ok_or_else(|| SegError::Invalid(format!("no merge after stage {stage}")))?;
        let (_, th, tw) = hw(&*pass.exec, &streams[n - 2]);
        let y = conv.forward(pass, &self.store, &streams[n - 1])?;
        let up = pass.exec.bilinear_resize(&y, th, tw)?;
        let merged = pass.exec.add(&streams[n - 2], &up)?;
        let mut out = streams[..n - 2].to_vec();
        out.push(merged);
        Ok(out)
    }

    /// 1x1 classifier on the last stream, resized to the input resolution.
    pub fn segmentation_head<E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        stream: &E::Value,
        out_size: (usize, usize),
    ) -> Result<E::Value> {
        let y = self.head.forward(pass, &self.store, stream)?;
        Ok(pass.exec.bilinear_resize(&y, out_size.0, out_size.1)?)
    }

    /// adapt, then stage/merge until one stream remains, final stage, head.
    pub fn run<E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        levels: &[E::Value],
        out_size: (usize, usize),
    ) -> Result<DecoderOutput<E::Value>> {
        let adapted = self.adapt(pass, levels)?;
        let mut streams = adapted.clone();
        let mut stream_counts = Vec::with_capacity(self.stages.len());
        for stage in 0..self.stages.len() {
            stream_counts.push(streams.len());
            streams = self.decoder_stage(pass, stage, &streams)?;
            if streams.len() > 1 {
                streams = self.merge_drop_lowest(pass, stage, &streams)?;
            }
        }
        let logits = self.segmentation_head(pass, &streams[0], out_size)?;
        Ok(DecoderOutput {
            logits,
            adapted,
            stream_counts,
        })
    }
}
