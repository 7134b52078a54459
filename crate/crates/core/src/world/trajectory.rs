use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, StampedPose};

/// Circular scan around a point of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub frames: usize,
    /// Uniform position jitter amplitude in metres.
    pub jitter: f64,
    /// Seconds between frames.
    pub dt: f64,
    pub seed: u64,
}

pub fn orbit(spec: &OrbitSpec) -> Result<Vec<StampedPose>> {
    if spec.frames == 0 {
        return Err(Error::invalid("orbit needs at least one frame"));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::invalid("orbit radius must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center = Vector3::from(spec.center);
    (0..spec.frames)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / spec.frames as f64;
            let mut jitter = || {
                if spec.jitter > 0.0 {
                    rng.gen_range(-spec.jitter..spec.jitter)
                } else {
                    0.0
                }
            };
            let eye = Vector3::new(
                center.x + spec.radius * angle.cos() + jitter(),
                center.y + spec.radius * angle.sin() + jitter(),
                spec.height + jitter(),
            );
            let look = center + Vector3::new(jitter(), jitter(), jitter());
            Ok(StampedPose {
                timestamp: i as f64 * spec.dt,
                pose: CameraPose::look_at(eye, look)?,
            })
        })
        .collect()
}
