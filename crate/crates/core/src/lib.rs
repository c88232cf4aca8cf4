//! Training-free 3D instance segmentation by lifting promptable 2D
//! segmenters onto posed RGB-D scans.

pub mod error;
pub mod evaluation;
pub mod grid;
pub mod io;
pub mod matching;
pub mod medoid;
pub mod merging;
pub mod pipeline;
pub mod projection;
pub mod prompts;
pub mod refinement;
pub mod scene_model;
pub mod synth;

pub use error::{Error, Result};
