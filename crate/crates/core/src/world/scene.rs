use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Sphere,
}

/// Axis-aligned box in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| 0.5 * (self.min[i] + self.max[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: u32,
    pub shape: Shape,
    pub center: [f64; 3],
    /// Cube edge length or sphere diameter.
    pub size: f64,
    pub albedo: [f64; 3],
}

impl SceneObject {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn bounds(&self) -> Aabb {
        let h = self.size / 2.0;
        let c = self.center;
        Aabb::new([c[0] - h, c[1] - h, c[2] - h], [c[0] + h, c[1] + h, c[2] + h])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub room_bounds: Aabb,
    /// Static furniture (tables); background for segmentation purposes.
    pub surfaces: Vec<Aabb>,
}

/// Base colours; instances cycle through them so several objects share a
/// hue and differ only in shape, shade and context.
const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.20, 0.15],
    [0.20, 0.55, 0.85],
    [0.25, 0.70, 0.30],
    [0.90, 0.80, 0.20],
    [0.60, 0.30, 0.75],
    [0.90, 0.55, 0.20],
];

/// Kept off multiples of the default 5 cm voxel so the table top does not
/// share a voxel layer with the objects resting on it.
const TABLE_HEIGHT: f64 = 0.59;
const MIN_SIZE: f64 = 0.18;
const MAX_SIZE: f64 = 0.32;
const PLACEMENT_GAP: f64 = 0.06;

/// Generates a room with a single table carrying `n_instances` objects.
pub fn generate_scene(seed: u64, n_instances: usize) -> Result<SceneDescription> {
    if n_instances < 1 {
        return Err(Error::invalid("n_instances must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (0.75f64).max(0.25 * (n_instances as f64).sqrt());
    let table = Aabb::new([-half, -half, 0.0], [half, half, TABLE_HEIGHT]);
    let room_half = half + 1.6;
    let room_bounds = Aabb::new([-room_half, -room_half, 0.0], [room_half, room_half, 2.5]);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let shape = if (i / PALETTE.len()) % 2 == 0 { Shape::Box } else { Shape::Sphere };
        let base = PALETTE[i % PALETTE.len()];
        let albedo = base.map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        let mut placed = None;
        for _ in 0..10_000 {
            let size = rng.gen_range(MIN_SIZE..MAX_SIZE);
            let margin = size / 2.0 + 0.02;
            let x = rng.gen_range(-half + margin..half - margin);
            let y = rng.gen_range(-half + margin..half - margin);
            let candidate = SceneObject {
                instance_id: i as u32 + 1,
                shape,
                center: [x, y, TABLE_HEIGHT + size / 2.0],
                size,
                albedo,
            };
            let clear = objects.iter().all(|o| {
                let d = ((o.center[0] - x).powi(2) + (o.center[1] - y).powi(2)).sqrt();
                d > (o.size + size) * std::f64::consts::FRAC_1_SQRT_2 + PLACEMENT_GAP
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        objects.push(placed.ok_or_else(|| Error::invalid(format!("could not place {n_instances} objects")))?);
    }

    let scene = SceneDescription {
        seed,
        objects,
        room_bounds,
        surfaces: vec![table],
    };
    scene.validate()?;
    Ok(scene)
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.instance_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate instance ids"));
        }
        if ids.first() == Some(&0) {
            return Err(Error::invalid("instance id 0 is reserved for background"));
        }
        for o in &self.objects {
            if !(o.size > 0.0) {
                return Err(Error::invalid(format!("object {} has non-positive size", o.instance_id)));
            }
            if !self.room_bounds.contains_box(&o.bounds()) {
                return Err(Error::invalid(format!("object {} leaves the room", o.instance_id)));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.bounds().intersects(&b.bounds()) {
                    return Err(Error::invalid(format!(
                        "objects {} and {} intersect",
                        a.instance_id, b.instance_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, instance_id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.instance_id).collect()
    }

    /// True when `p` lies inside the room and outside every solid.
    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        self.room_bounds.contains(p)
            && !self.surfaces.iter().any(|s| s.contains(p))
            && !self.objects.iter().any(|o| o.bounds().contains(p))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Self = serde_json::from_str(&text)?;
        scene.validate()?;
        Ok(scene)
    }
}
