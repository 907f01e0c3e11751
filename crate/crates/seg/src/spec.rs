//! Declarative architecture descriptions.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SegError};

/// Every supported input must be a multiple of the coarsest pyramid stride.
pub const INPUT_DIVISOR: usize = 32;

/// Resolution established by the encoder stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Two stride-2 convolutions: first working resolution 1/4.
    Quarter,
    /// Stride-1 then stride-2 convolution: first working resolution 1/2,
    /// exposed as an extra pyramid level.
    Half,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem: StemKind,
    pub stem_channels: usize,
    /// Output widths of the stride 4, 8, 16 and 32 stages.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub uses_bottleneck: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    /// Channel width per stream, highest resolution first.
    pub stream_widths: Vec<usize>,
    /// Residual blocks per stream in each decoder stage; one entry per stage.
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    pub variant_extra_stream: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub backbone: BackboneSpec,
    pub decoder: DecoderSpec,
}

impl BackboneSpec {
    /// Miniature residual encoder: basic blocks, widths 16/32/64/128.
    pub fn desk(stem: StemKind) -> Self {
        Self {
            stem,
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            uses_bottleneck: false,
        }
    }

    /// ResNet-50 stage topology (bottleneck blocks 3/4/6/3, widths 256..2048).
    pub fn resnet50(stem: StemKind) -> Self {
        Self {
            stem,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
            uses_bottleneck: true,
        }
    }

    pub fn levels(&self) -> usize {
        match self.stem {
            StemKind::Quarter => 4,
            StemKind::Half => 5,
        }
    }

    /// Strides of the emitted pyramid, finest first.
    pub fn strides(&self) -> Vec<usize> {
        match self.stem {
            StemKind::Quarter => vec![4, 8, 16, 32],
            StemKind::Half => vec![2, 4, 8, 16, 32],
        }
    }

    pub fn pyramid_channels(&self) -> Vec<usize> {
        let mut ch = Vec::with_capacity(5);
        if self.stem == StemKind::Half {
            ch.push(self.stem_channels);
        }
        ch.extend_from_slice(&self.stage_channels);
        ch
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(SegError::Spec("backbone channel widths must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(SegError::Spec("every backbone stage needs at least one block".into()));
        }
        if self.uses_bottleneck && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(SegError::Spec(
                "bottleneck stage widths must be divisible by 4".into(),
            ));
        }
        Ok(())
    }
}

impl DecoderSpec {
    pub fn w48(num_classes: usize) -> Self {
        Self {
            stream_widths: vec![48, 96, 192, 384],
            blocks_per_stage: vec![2, 2, 2, 2],
            num_classes,
            variant_extra_stream: false,
        }
    }

    /// W48 with a prepended width-24 stream and one block per stage.
    pub fn w48_variant(num_classes: usize) -> Self {
        Self {
            stream_widths: vec![24, 48, 96, 192, 384],
            blocks_per_stage: vec![1, 1, 1, 1, 1],
            num_classes,
            variant_extra_stream: true,
        }
    }

    pub fn streams(&self) -> usize {
        self.stream_widths.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }
}

impl ArchitectureSpec {
    /// Default desk-scale configuration (standard stride-4 stem).
    pub fn desk(num_classes: usize) -> Self {
        Self {
            backbone: BackboneSpec::desk(StemKind::Quarter),
            decoder: DecoderSpec::w48(num_classes),
        }
    }

    /// Default desk-scale configuration with the extra stride-2 stream.
    pub fn desk_variant(num_classes: usize) -> Self {
        Self {
            backbone: BackboneSpec::desk(StemKind::Half),
            decoder: DecoderSpec::w48_variant(num_classes),
        }
    }

    pub fn resnet50(num_classes: usize, variant: bool) -> Self {
        if variant {
            Self {
                backbone: BackboneSpec::resnet50(StemKind::Half),
                decoder: DecoderSpec::w48_variant(num_classes),
            }
        } else {
            Self {
                backbone: BackboneSpec::resnet50(StemKind::Quarter),
                decoder: DecoderSpec::w48(num_classes),
            }
        }
    }

    pub fn is_variant(&self) -> bool {
        self.decoder.variant_extra_stream
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = &self.decoder;
        let levels = self.backbone.levels();
        if d.variant_extra_stream != (self.backbone.stem == StemKind::Half) {
            return Err(SegError::Spec(
                "variant_extra_stream requires the half-resolution stem and vice versa".into(),
            ));
        }
        if d.stream_widths.len() != levels {
            return Err(SegError::Spec(format!(
                "decoder has {} streams but the encoder emits {levels} pyramid levels",
                d.stream_widths.len()
            )));
        }
        if d.blocks_per_stage.len() != levels {
            return Err(SegError::Spec(format!(
                "decoder needs {levels} stages ({} merges plus the final stage), got {}",
                levels - 1,
                d.blocks_per_stage.len()
            )));
        }
        if d.stream_widths.contains(&0) || d.blocks_per_stage.contains(&0) {
            return Err(SegError::Spec(
                "stream widths and blocks per stage must be positive".into(),
            ));
        }
        if d.num_classes == 0 {
            return Err(SegError::Spec("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// A variant must use strictly fewer decoder blocks than the standard spec it replaces.
    pub fn validate_variant_against(&self, standard: &ArchitectureSpec) -> Result<()> {
        if !self.is_variant() || standard.is_variant() {
            return Err(SegError::Spec("expected a (variant, standard) pair".into()));
        }
        if self.decoder.total_blocks() >= standard.decoder.total_blocks() {
            return Err(SegError::Spec(format!(
                "variant uses {} decoder blocks, standard {}; the variant must use fewer",
                self.decoder.total_blocks(),
                standard.decoder.total_blocks()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serialises");
        Sha256::digest(&json).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height % INPUT_DIVISOR != 0 || width % INPUT_DIVISOR != 0 {
        return Err(SegError::Indivisible {
            height,
            width,
            divisor: INPUT_DIVISOR,
        });
    }
    Ok(())
}
