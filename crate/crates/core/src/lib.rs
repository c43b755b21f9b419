//! Continual audio-visual segmentation engine.
//!
//! The crate covers the full experimental loop for class-incremental
//! audio-visual segmentation at desk scale:
//!
//! - [`synth`]: procedural audio-visual clip generation with controllable
//!   class co-occurrence and identical-visual / distinct-audio class pairs,
//!   so that the audio modality carries real information.
//! - [`stream`]: overlapped and disjoint task streams over a dataset,
//!   including the background-relabeling rule that leaves audio untouched.
//! - [`model`]: a small per-pixel softmax classifier in visual-only and
//!   audio-visual variants, with class-incremental head expansion.
//! - [`metrics`]: confusion-matrix mIoU evaluation and per-clip frame-averaged
//!   mIoU.
//! - [`memory`]: rehearsal exemplar selection by audio contribution deviation,
//!   plus the ablation strategies (smallest / largest / random).
//! - [`collision`]: collision counting between the old model's predictions and
//!   new-task labels, frequency smoothing, and memory resampling.
//! - [`experiment`]: seeded end-to-end runs, method comparison, and reports.

pub mod collision;
pub mod dataset_io;
pub mod experiment;
pub mod louvain;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod report;
pub mod stream;
pub mod synth;
#[cfg(test)]
pub(crate) mod testutil;
pub mod types;

pub use types::{ClassId, GridDims, SampleId};
