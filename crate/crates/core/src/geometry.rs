//! Camera models, poses and the TUM trajectory text format.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics. Pixel `(u, v)` with integer coordinates is the pixel
/// centre, so the principal point pixel back-projects onto the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image centre and the given
    /// horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Direction (camera frame, z = 1) of the ray through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point for a pixel with z-depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::from(self.pixel_ray(u, v) * depth)
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// World-from-camera rigid transform. Camera axes follow the optical
/// convention: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    /// `[qx, qy, qz, qw]`
    orientation: [f64; 4],
}

impl TryFrom<PoseRepr> for CameraPose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        CameraPose::from_xyzw(r.position, r.orientation)
    }
}

impl From<CameraPose> for PoseRepr {
    fn from(p: CameraPose) -> Self {
        let q = p.orientation.quaternion();
        PoseRepr {
            position: [p.position.x, p.position.y, p.position.z],
            orientation: [q.i, q.j, q.k, q.w],
        }
    }
}

const QUATERNION_NORM_TOL: f64 = 1e-9;

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a position and a `[qx, qy, qz, qw]` quaternion that
    /// must already be unit length.
    pub fn from_xyzw(position: [f64; 3], q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::invalid(format!("quaternion norm {norm} is not 1")));
        }
        if position.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite pose position"));
        }
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        Ok(Self {
            position: Vector3::from(position),
            orientation: UnitQuaternion::new_unchecked(quat),
        })
    }

    /// Camera at `eye` looking at `target` with world +z as up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at target coincides with eye"));
        }
        let forward = forward.normalize();
        let up = Vector3::z();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Looking straight up or down: pick any perpendicular.
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
        Ok(Self {
            position: eye,
            orientation: UnitQuaternion::from_rotation_matrix(&rot),
        })
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.orientation * p.coords + self.position)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * v
    }

    pub fn inverse_transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.orientation.inverse() * (p.coords - self.position))
    }

    pub fn xyzw(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.i, q.j, q.k, q.w]
    }
}

/// A timestamped pose, one line of a TUM trajectory file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: CameraPose,
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
pub fn parse_tum(text: &str) -> Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("trajectory line {}: {e}", lineno + 1)))?;
        if values.len() != 8 {
            return Err(Error::Format(format!(
                "trajectory line {}: expected 8 fields, got {}",
                lineno + 1,
                values.len()
            )));
        }
        let pose = CameraPose::from_xyzw(
            [values[1], values[2], values[3]],
            [values[4], values[5], values[6], values[7]],
        )
        .map_err(|e| Error::Format(format!("trajectory line {}: {e}", lineno + 1)))?;
        out.push(StampedPose {
            timestamp: values[0],
            pose,
        });
    }
    Ok(out)
}

pub fn format_tum(poses: &[StampedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let t = p.pose.position;
        let q = p.pose.xyzw();
        // {:?} keeps the shortest representation that round-trips exactly.
        let _ = writeln!(
            s,
            "{:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        );
    }
    s
}

pub fn read_tum(path: &Path) -> Result<Vec<StampedPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text)
}

pub fn write_tum(path: &Path, poses: &[StampedPose]) -> Result<()> {
    std::fs::write(path, format_tum(poses)).map_err(|e| Error::io(path, e))
}
