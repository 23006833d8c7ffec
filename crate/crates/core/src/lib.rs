//! Conv-LoRA adapters and a vision-conditioned text-fusion gateway on a small
//! grouped vision/text transformer, trained for anomaly segmentation.

pub mod autodiff;
pub mod backbone;
pub mod conv_lora;
pub mod dfg;
pub mod error;
pub mod harness;
pub mod losses;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use backbone::{build_model, AdapterKind, FusionMode, GroupedModel, ModelConfig, SemanticState};
pub use error::{Error, Result};
pub use harness::config::RunConfig;
pub use harness::data::Sample;
pub use harness::eval::MetricsReport;
pub use parallel::Exec;
