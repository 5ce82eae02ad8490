//! A small two-stage convolutional detector with hand-written backward
//! passes.

pub mod checkpoint;
pub mod detector;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use detector::{detect, detect_multiscale, propose, Proposal, TrainPlan};
pub use model::{DetectorModel, ForwardOutput, Gradients, HeadOutput, NetConfig, Param, TRUNK_STRIDE};
pub use tensor::Tensor;
pub use train::{train, Sample, StepReport, TrainState};
pub use checkpoint::Checkpoint;
