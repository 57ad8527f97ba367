pub mod datagen;
pub mod error;
pub mod harness;
pub mod layercam;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod swft;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use nn::{CaptureSpec, FeatureCapture, Group, MiniResNet};
pub use swft::FreezePlan;
pub use tensor::{Mode, Tensor};
pub use train::TrainConfig;
