//! Cross-dataset object detection training.
//!
//! Several datasets, each labeling only some object classes, are combined
//! into one hybrid dataset with a merged label space. Training uses a
//! dataset-aware focal loss that never takes background negatives from a
//! dataset that may contain unlabeled instances of the class being scored.

pub mod anchors;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod label_space;
pub mod loss;
pub mod synth;

pub use error::{Error, Result};
