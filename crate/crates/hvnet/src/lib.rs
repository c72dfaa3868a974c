//! Hybrid-scale voxel BEV detection for LiDAR point clouds.
//!
//! The pipeline voxelizes a point cloud at several scales simultaneously,
//! encodes per-point features with attentive voxel encoders, projects them
//! into dense pseudo-images at an independent set of scales, fuses those
//! maps in a 2D convolutional backbone with a feature fusion pyramid, and
//! detects oriented boxes with a per-class anchor head. All numerical
//! kernels carry hand-written backward passes so the whole network trains
//! without an autodiff framework.

pub mod backbone;
pub mod config;
pub mod error;
pub mod geometry;
pub mod head;
pub mod hvfe;
pub mod infer;
pub mod model;
pub mod plot;
pub mod pointcloud;
pub mod tensor;
pub mod train;
pub mod voxel;
pub mod weights;

pub use error::{HvError, Result};

use rand_chacha::rand_core::SeedableRng;

/// The crate-wide deterministic RNG; every random choice is seeded.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
