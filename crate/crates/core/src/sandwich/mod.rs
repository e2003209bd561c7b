//! The sandwich: neural pre-processor, standard codec, neural post-processor.

pub mod eval;
pub mod format;
pub mod metrics;
pub mod model;
pub mod train;

pub use format::{Format, Grouped};
pub use metrics::{pareto, psnr_dbit, Provenance, RdPoint};
pub use model::{normalize, slim_spec, CodecPath, Sandwich, SandwichSpec, Scenario, Stage, StageSpec};
pub use train::{train, train_video, LossRow, TrainConfig};
