//! Procedure-grounded progress supervision for robot manipulation
//! trajectories: annotation records, progress labels, the staged annotation
//! pipeline, VQA sample generation, evaluation metrics, and adaptation splits.

pub mod annotation;
pub mod formats;
pub mod metrics;
pub mod pipeline;
pub mod progress;
pub mod splits;
pub mod synth;
pub mod vqa;
