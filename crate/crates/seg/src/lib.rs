//! Semantic segmentation with a frozen multi-scale encoder and a reverse
//! HRNet decoder.

pub mod analyzer;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod spec;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Result, SegError};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::SegModel;
pub use spec::{ArchitectureSpec, BackboneSpec, DecoderSpec, StemKind};

pub type SegModel32 = SegModel<f32>;
pub type SegModel64 = SegModel<f64>;
