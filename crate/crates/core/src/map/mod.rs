//! Voxel semantic map built from segmented RGBD frames, ray-traced masks
//! and goal queries.

mod associate;
mod mask;
mod nav;
mod voxel;

pub use associate::associate_labels;
pub use mask::{mask_to_bboxes, BBox, SegmentMask};
pub use nav::{NavConfig, NavGoal, TIE_EPS};
pub use voxel::{Cell, MapConfig, VoxelIndex, VoxelSemanticMap, MAP_FORMAT_VERSION};
