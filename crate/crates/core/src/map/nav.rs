use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::voxel::VoxelSemanticMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavConfig {
    /// Goal search radius around the centroid (horizontal).
    pub radius: f64,
    pub floor_z: f64,
    /// Occupied voxels whose centre lies within this height band above the
    /// floor block a floor cell.
    pub obstacle_min_height: f64,
    pub obstacle_max_height: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            floor_z: 0.0,
            obstacle_min_height: 0.1,
            obstacle_max_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavGoal {
    pub target: [f64; 3],
    pub instance_id: u32,
    pub distance_to_centroid: f64,
}

/// Distances closer than this are treated as ties.
pub const TIE_EPS: f64 = 1e-9;

impl VoxelSemanticMap {
    /// Floor cells `(i, j)` blocked by an occupied voxel in the obstacle band.
    /// Unobserved cells count as free.
    pub fn occupied_floor_cells(&self, nav: &NavConfig) -> HashSet<(i32, i32)> {
        let lo = nav.floor_z + nav.obstacle_min_height;
        let hi = nav.floor_z + nav.obstacle_max_height;
        self.cells()
            .filter(|(_, c)| c.is_occupied())
            .filter(|(idx, _)| {
                let z = self.voxel_center(**idx).z;
                z >= lo && z <= hi
            })
            .map(|(idx, _)| (idx[0], idx[1]))
            .collect()
    }

    pub fn floor_cell_center(&self, i: i32, j: i32) -> (f64, f64) {
        let s = self.voxel_size();
        (
            self.origin[0] + (i as f64 + 0.5) * s,
            self.origin[1] + (j as f64 + 0.5) * s,
        )
    }

    /// Nearest free floor cell (horizontal distance) to the instance
    /// centroid, within `nav.radius`. Ties go to the lexicographically
    /// smallest `(i, j)`.
    pub fn resolve_nav_goal(&self, instance_id: u32, nav: &NavConfig) -> Result<NavGoal> {
        let c = self.instance_centroid(instance_id)?;
        let occupied = self.occupied_floor_cells(nav);
        let s = self.voxel_size();
        let ci = ((c.x - self.origin[0]) / s).floor() as i32;
        let cj = ((c.y - self.origin[1]) / s).floor() as i32;
        let reach = (nav.radius / s).ceil() as i32 + 1;
        let mut best: Option<(f64, i32, i32)> = None;
        for i in ci - reach..=ci + reach {
            for j in cj - reach..=cj + reach {
                if occupied.contains(&(i, j)) {
                    continue;
                }
                let (x, y) = self.floor_cell_center(i, j);
                let d = ((x - c.x).powi(2) + (y - c.y).powi(2)).sqrt();
                if d > nav.radius {
                    continue;
                }
                // Loop order is lexicographic: only a strictly (beyond
                // rounding) closer cell replaces the incumbent.
                if best.map_or(true, |(bd, _, _)| d < bd - TIE_EPS) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.ok_or(Error::GoalUnreachable {
            instance_id,
            radius: nav.radius,
        })?;
        let (x, y) = self.floor_cell_center(i, j);
        Ok(NavGoal {
            target: [x, y, nav.floor_z],
            instance_id,
            distance_to_centroid: d,
        })
    }
}
