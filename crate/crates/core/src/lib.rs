//! Bi-temporal semantic change detection: a siamese encoder, gated
//! cross-temporal feature fusion, a foreground/background mask-guided
//! decoder (attention or selective state-space), the multi-term training
//! objective and the semantic change metrics, on a small CPU tensor engine.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fbg;
pub mod gif;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod types;

pub use config::{EncoderConfig, FbgVariant, FoBaConfig, RunConfig, SynthConfig, TrainConfig};
pub use error::{ErrorKind, FobaError, Result};
pub use model::{FoBaModel, FoBaOutput};
pub use types::{BiTemporalSample, ConfusionMatrix, LabelMap, LossWeights};
