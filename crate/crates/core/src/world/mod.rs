//! Deterministic synthetic environments: scenes, RGBD sequences with
//! ground-truth instance masks, and the low-quality camera model.

mod degrade;
mod render;
mod scene;
mod trajectory;
mod views;

pub use degrade::{degrade, DegradationSpec};
pub use render::{render_sequence, render_view, DepthImage, RgbdFrame};
pub use scene::{generate_scene, Aabb, SceneDescription, SceneObject, Shape};
pub use trajectory::{orbit, OrbitSpec};
pub use views::{render_instance_views, CloseupSpec};
