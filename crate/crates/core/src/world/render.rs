//! Exact ray/primitive renderer producing RGB, z-depth and ground-truth
//! instance masks.

use image::{Rgb, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, StampedPose};
use crate::map::SegmentMask;
use crate::world::scene::{Aabb, SceneDescription, Shape};

/// Per-pixel z-depth in metres; 0 marks an invalid measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// Encodes as 16-bit millimetres.
    pub fn to_u16_mm(&self) -> image::ImageBuffer<image::Luma<u16>, Vec<u16>> {
        let raw = self.data.iter().map(|d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16).collect();
        image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("size matches")
    }

    pub fn from_u16_mm(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f64 / 1000.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub timestamp: f64,
}

impl RgbdFrame {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if self.rgb.dimensions() != (w as u32, h as u32) || self.depth.width != w || self.depth.height != h {
            return Err(Error::invalid("frame dimensions do not match intrinsics"));
        }
        if self.depth.data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid("depth must be finite and non-negative"));
        }
        Ok(())
    }
}

const WALL_ALBEDO: [f64; 3] = [0.80, 0.80, 0.76];
const FLOOR_ALBEDO: [f64; 3] = [0.45, 0.42, 0.38];
const CEILING_ALBEDO: [f64; 3] = [0.92, 0.92, 0.92];
const TABLE_ALBEDO: [f64; 3] = [0.58, 0.44, 0.30];
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, 0.3, 1.0).normalize()
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
    id: u32,
}

/// Entry distance and entering axis of a ray into a box, if hit in front.
fn ray_aabb_entry(o: &Vector3<f64>, d: &Vector3<f64>, b: &Aabb) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let (mut t0, mut t1) = ((b.min[i] - o[i]) * inv, (b.max[i] - o[i]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = i;
        }
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_near <= 1e-9 {
        return None;
    }
    Some((t_near, axis))
}

/// Exit distance and axis of a ray leaving a box it starts inside.
fn ray_aabb_exit(o: &Vector3<f64>, d: &Vector3<f64>, b: &Aabb) -> Option<(f64, usize)> {
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            continue;
        }
        let t = if d[i] > 0.0 { (b.max[i] - o[i]) / d[i] } else { (b.min[i] - o[i]) / d[i] };
        if t < t_far {
            t_far = t;
            axis = i;
        }
    }
    (t_far.is_finite() && t_far > 0.0).then_some((t_far, axis))
}

fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / a;
    if t0 > 1e-9 {
        return Some(t0);
    }
    let t1 = (-b + sq) / a;
    (t1 > 1e-9).then_some(t1)
}

fn axis_normal(axis: usize, d: &Vector3<f64>, inward: bool) -> Vector3<f64> {
    let mut n = Vector3::zeros();
    n[axis] = if (d[axis] > 0.0) ^ inward { -1.0 } else { 1.0 };
    n
}

/// Nearest surface along `o + t d`. With `d` expressed so that its camera
/// z component is 1, `t` equals z-depth.
fn trace(scene: &SceneDescription, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |hit: Hit| {
        if best.as_ref().map_or(true, |b| hit.t < b.t) {
            best = Some(hit);
        }
    };
    if let Some((t, axis)) = ray_aabb_exit(o, d, &scene.room_bounds) {
        let normal = axis_normal(axis, d, true);
        let albedo = match (axis, d[axis] > 0.0) {
            (2, false) => FLOOR_ALBEDO,
            (2, true) => CEILING_ALBEDO,
            _ => WALL_ALBEDO,
        };
        consider(Hit { t, normal, albedo, id: 0 });
    }
    for s in &scene.surfaces {
        if let Some((t, axis)) = ray_aabb_entry(o, d, s) {
            consider(Hit {
                t,
                normal: axis_normal(axis, d, false),
                albedo: TABLE_ALBEDO,
                id: 0,
            });
        }
    }
    for obj in &scene.objects {
        match obj.shape {
            Shape::Box => {
                if let Some((t, axis)) = ray_aabb_entry(o, d, &obj.bounds()) {
                    consider(Hit {
                        t,
                        normal: axis_normal(axis, d, false),
                        albedo: obj.albedo,
                        id: obj.instance_id,
                    });
                }
            }
            Shape::Sphere => {
                let c = obj.center();
                if let Some(t) = ray_sphere(o, d, &c, obj.size / 2.0) {
                    let normal = (o + d * t - c).normalize();
                    consider(Hit {
                        t,
                        normal,
                        albedo: obj.albedo,
                        id: obj.instance_id,
                    });
                }
            }
        }
    }
    best
}

/// Renders one view.
pub fn render_view(
    scene: &SceneDescription,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    timestamp: f64,
) -> (RgbdFrame, SegmentMask) {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut depth = DepthImage::zeros(w, h);
    let mut mask = SegmentMask::zeros(w, h);
    let origin = pose.position;
    let light = light_dir();
    for v in 0..h {
        for u in 0..w {
            let d = pose.rotate(&intrinsics.pixel_ray(u as f64, v as f64));
            if let Some(hit) = trace(scene, &origin, &d) {
                let shade = AMBIENT + DIFFUSE * hit.normal.dot(&light).max(0.0);
                let px = hit.albedo.map(|a| (a * shade * 255.0).round().clamp(0.0, 255.0) as u8);
                rgb.put_pixel(u as u32, v as u32, Rgb(px));
                depth.data[v * w + u] = hit.t;
                mask.ids[v * w + u] = hit.id;
            }
        }
    }
    let frame = RgbdFrame {
        rgb,
        depth,
        pose: *pose,
        intrinsics: *intrinsics,
        timestamp,
    };
    (frame, mask)
}

/// Renders every pose of a trajectory.
pub fn render_sequence(
    scene: &SceneDescription,
    trajectory: &[StampedPose],
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<(RgbdFrame, SegmentMask)>> {
    if trajectory.is_empty() {
        return Err(Error::invalid("trajectory is empty"));
    }
    intrinsics.validate()?;
    Ok(trajectory
        .iter()
        .map(|sp| render_view(scene, &sp.pose, intrinsics, sp.timestamp))
        .collect())
}
