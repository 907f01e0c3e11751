//! Run configuration files and checkpoint sidecars.

use std::path::{Path, PathBuf};

use revhrnet::dataio::DatasetManifest;
use revhrnet::trainer::TrainConfig;
use revhrnet::{ArchitectureSpec, Result, SegError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    /// Miniature basic-block encoder, widths 16/32/64/128.
    #[default]
    Desk,
    /// Bottleneck encoder with ResNet-50 stage widths and depths.
    Resnet50,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackbonePreset,
    pub variant_extra_stream: bool,
    /// Falls back to the dataset's class count.
    pub num_classes: Option<usize>,
    pub stream_widths: Option<Vec<usize>>,
    pub blocks_per_stage: Option<Vec<usize>>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackbonePreset::Desk,
            variant_extra_stream: false,
            num_classes: None,
            stream_widths: None,
            blocks_per_stage: None,
            init_seed: 0,
        }
    }
}

fn preset(backbone: BackbonePreset, variant: bool, k: usize) -> ArchitectureSpec {
    match (backbone, variant) {
        (BackbonePreset::Desk, false) => ArchitectureSpec::desk(k),
        (BackbonePreset::Desk, true) => ArchitectureSpec::desk_variant(k),
        (BackbonePreset::Resnet50, v) => ArchitectureSpec::resnet50(k, v),
    }
}

impl ModelConfig {
    /// Preset plus overrides, validated. Variants must also use fewer decoder
    /// blocks than the standard preset of the same encoder.
    pub fn spec(&self, num_classes: usize) -> Result<ArchitectureSpec> {
        let mut spec = preset(self.backbone, self.variant_extra_stream, num_classes);
        if let Some(w) = &self.stream_widths {
            spec.decoder.stream_widths = w.clone();
        }
        if let Some(b) = &self.blocks_per_stage {
            spec.decoder.blocks_per_stage = b.clone();
        }
        spec.validate()?;
        if spec.is_variant() {
            spec.validate_variant_against(&preset(self.backbone, false, num_classes))?;
        }
        Ok(spec)
    }
}

/// One JSON file describing dataset, model and optimiser.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory, relative to the config file.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SegError::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| SegError::Invalid(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        if cfg.train.checkpoint_path.is_some() {
            return Err(SegError::Invalid(
                "train.checkpoint_path is chosen by --out and may not be set in the config".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn dataset_dir(&self) -> Option<PathBuf> {
        self.dataset.as_ref().map(|d| self.base_dir.join(d))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let dir = self
            .dataset_dir()
            .ok_or_else(|| SegError::Invalid("no dataset given (config \"dataset\" or --dataset)".into()))?;
        DatasetManifest::load(&dir)
    }

    /// Class count from the model section, else from the dataset.
    pub fn spec(&self) -> Result<ArchitectureSpec> {
        let k = match self.model.num_classes {
            Some(k) => k,
            None => self.manifest()?.num_classes,
        };
        self.model.spec(k)
    }
}

/// Written next to a checkpoint so that prediction needs no config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub architecture: ArchitectureSpec,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Sidecar {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut name = checkpoint.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = Self::path_for(checkpoint);
        let text = std::fs::read_to_string(&path).map_err(|e| SegError::io(&path, e))?;
        let sc: Sidecar =
            serde_json::from_str(&text).map_err(|e| SegError::Invalid(format!("{}: {e}", path.display())))?;
        sc.architecture.validate()?;
        Ok(sc)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let path = Self::path_for(checkpoint);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| SegError::io(&path, e))
    }
}
