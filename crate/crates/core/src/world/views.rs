//! Close-range clean views of single instances: the stand-in for images a
//! user captures with a phone (few-shot training images and queries).

use image::RgbImage;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::imaging::crop;
use crate::map::mask_to_bboxes;
use crate::world::render::render_view;
use crate::world::scene::SceneDescription;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloseupSpec {
    pub min_distance: f64,
    pub max_distance: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    /// Minimum number of visible target pixels for a view to be kept.
    pub min_visible_pixels: usize,
}

impl Default for CloseupSpec {
    fn default() -> Self {
        Self {
            min_distance: 0.4,
            max_distance: 0.8,
            min_elevation_deg: 10.0,
            max_elevation_deg: 55.0,
            min_visible_pixels: 300,
        }
    }
}

const MAX_ATTEMPTS: usize = 500;

/// Renders `count` crops of `instance_id` from random nearby viewpoints and
/// crops each to the instance's ground-truth bounding box.
pub fn render_instance_views(
    scene: &SceneDescription,
    instance_id: u32,
    count: usize,
    intrinsics: &CameraIntrinsics,
    spec: &CloseupSpec,
    seed: u64,
) -> Result<Vec<RgbImage>> {
    let obj = scene
        .object(instance_id)
        .ok_or_else(|| Error::NotFound(format!("instance {instance_id} not in scene")))?;
    let target = obj.center();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut out = Vec::with_capacity(count);
    for _ in 0..MAX_ATTEMPTS {
        if out.len() == count {
            break;
        }
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let el = rng
            .gen_range(spec.min_elevation_deg..=spec.max_elevation_deg)
            .to_radians();
        let dist = rng.gen_range(spec.min_distance..=spec.max_distance);
        let eye = target + dist * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        if !scene.is_free(&eye) {
            continue;
        }
        let pose = CameraPose::look_at(eye, target)?;
        let (frame, mask) = render_view(scene, &pose, intrinsics, 0.0);
        let visible = mask.ids.iter().filter(|&&i| i == instance_id).count();
        if visible < spec.min_visible_pixels {
            continue;
        }
        let Some(b) = mask_to_bboxes(&mask, 1).into_iter().find(|b| b.instance_id == instance_id) else {
            continue;
        };
        out.push(crop(&frame.rgb, b.x_min, b.y_min, b.x_max, b.y_max));
    }
    if out.len() < count {
        return Err(Error::invalid(format!(
            "only {} of {count} close-up views of instance {instance_id} were usable",
            out.len()
        )));
    }
    Ok(out)
}
