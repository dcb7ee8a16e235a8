//! Synthetic detection world and a linear detection head trained with SGD.
//!
//! Images are scenes of boxed objects; each object carries a noisy copy of
//! its class signature. Per-anchor features pool signatures by IoU, so a
//! linear head can learn to detect classes without any image tensors.

pub mod experiment;
pub mod gradcheck;
pub mod head;
pub mod infer;
pub mod trainer;
pub mod world;

pub use experiment::{run, run_on, Checkpoint, ExperimentConfig, RunResult};
pub use head::{DetectorHead, HeadGradient, HeadOutput, TrainSample};
pub use infer::{infer, nms, InferConfig};
pub use trainer::{train, FeatureSource, TrainConfig, TrainMode, TrainOutput};
pub use world::{generate_world, LabelingPolicy, SynthWorld, SynthWorldConfig};
