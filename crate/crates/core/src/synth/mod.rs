//! Synthetic scenes with ground truth, oracle backends, and noise models.

mod noise;
mod oracle;
mod scene;

pub use noise::{noise_model, NoiseKind, NoiseModel, NoisyBoxBackend, NoisyPointBackend, NoisySegmenter};
pub use oracle::{register_oracles, OracleBoxBackend, OraclePointBackend, OracleSegmenter, ORACLE_KIND};
pub use scene::{generate_scene, render_frame, SceneSpec, SyntheticScene};

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::scene_model::InstanceLabeling3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Cylinder];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-point instance labels plus, when rendered, per-frame instance id images
/// aligned with the scene's frame list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: InstanceLabeling3D,
    /// Shape of instance `k + 1`.
    pub shapes: Vec<ShapeKind>,
    pub id_images: Vec<Grid<u32>>,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
