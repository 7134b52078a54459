use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::map::mask::SegmentMask;
use crate::world::RgbdFrame;

pub type VoxelIndex = [i32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub voxel_size: f64,
    /// Valid depth window in metres; measurements outside are ignored.
    pub depth_min: f64,
    pub depth_max: f64,
    /// Maximum ray length for traced masks.
    pub trace_range: f64,
    /// Minimum IoU for a fresh segment to inherit a map id.
    pub iou_threshold: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            depth_min: 0.3,
            depth_max: 5.0,
            trace_range: 8.0,
            iou_threshold: 0.25,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::invalid("voxel_size must be positive"));
        }
        if !(self.depth_min >= 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::invalid("depth range must satisfy 0 <= min < max"));
        }
        if !(self.trace_range > 0.0) {
            return Err(Error::invalid("trace_range must be positive"));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::invalid("iou_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Vote tally of one voxel, in first-vote order. Id 0 records background
/// surfaces (walls, floor, furniture) so they occlude rays.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cell {
    votes: Vec<(u32, u32)>,
}

impl Cell {
    pub fn add_vote(&mut self, id: u32) {
        match self.votes.iter_mut().find(|(i, _)| *i == id) {
            Some((_, c)) => *c += 1,
            None => self.votes.push((id, 1)),
        }
    }

    /// Argmax over votes; on ties the id that was voted first wins.
    pub fn effective_id(&self) -> Option<u32> {
        let mut best: Option<(u32, u32)> = None;
        for &(id, c) in &self.votes {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((id, c));
            }
        }
        best.map(|(id, _)| id)
    }

    pub fn votes(&self) -> &[(u32, u32)] {
        &self.votes
    }

    pub fn count(&self, id: u32) -> u32 {
        self.votes.iter().find(|(i, _)| *i == id).map_or(0, |(_, c)| *c)
    }

    pub fn is_occupied(&self) -> bool {
        !self.votes.is_empty()
    }
}

/// Sparse voxel grid with instance-id votes.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSemanticMap {
    pub config: MapConfig,
    pub origin: [f64; 3],
    cells: HashMap<VoxelIndex, Cell>,
    next_id: u32,
}

impl VoxelSemanticMap {
    pub fn new(config: MapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            origin: [0.0; 3],
            cells: HashMap::new(),
            next_id: 1,
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.config.voxel_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, idx: VoxelIndex) -> Option<&Cell> {
        self.cells.get(&idx)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&VoxelIndex, &Cell)> {
        self.cells.iter()
    }

    pub fn voxel_of(&self, p: &Point3<f64>) -> VoxelIndex {
        let s = self.voxel_size();
        [0, 1, 2].map(|i| ((p[i] - self.origin[i]) / s).floor() as i32)
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Point3<f64> {
        let s = self.voxel_size();
        Point3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * s,
            self.origin[1] + (idx[1] as f64 + 0.5) * s,
            self.origin[2] + (idx[2] as f64 + 0.5) * s,
        )
    }

    /// Adds one vote for `id` in voxel `idx`.
    pub fn vote(&mut self, idx: VoxelIndex, id: u32) {
        self.cells.entry(idx).or_default().add_vote(id);
        if id >= self.next_id {
            self.next_id = id + 1;
        }
    }

    /// Reserves a fresh map-global instance id.
    pub fn allocate_id(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    /// Back-projects every valid depth pixel and votes for its mask id
    /// (0 for background surfaces).
    pub fn integrate_frame(&mut self, frame: &RgbdFrame, mask: &SegmentMask) -> Result<()> {
        let k = &frame.intrinsics;
        if mask.dims() != (k.width, k.height) || frame.depth.width != k.width || frame.depth.height != k.height {
            return Err(Error::invalid("mask, depth and intrinsics dimensions must match"));
        }
        let (lo, hi) = (self.config.depth_min, self.config.depth_max);
        for v in 0..k.height {
            for u in 0..k.width {
                let d = frame.depth.get(u, v);
                if !(d.is_finite() && d >= lo && d <= hi) {
                    continue;
                }
                let p = frame.pose.transform_point(&k.back_project(u as f64, v as f64, d));
                let idx = self.voxel_of(&p);
                self.vote(idx, mask.get(u, v));
            }
        }
        Ok(())
    }

    /// Voxels whose effective id is `instance_id`.
    pub fn instance_voxels(&self, instance_id: u32) -> Vec<VoxelIndex> {
        let mut v: Vec<VoxelIndex> = self
            .cells
            .iter()
            .filter(|(_, c)| c.effective_id() == Some(instance_id))
            .map(|(i, _)| *i)
            .collect();
        v.sort_unstable();
        v
    }

    /// Distinct non-zero effective ids, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .cells
            .values()
            .filter_map(Cell::effective_id)
            .filter(|&i| i > 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Mean of the centres of all voxels labelled `instance_id`.
    pub fn instance_centroid(&self, instance_id: u32) -> Result<Vector3<f64>> {
        let voxels = self.instance_voxels(instance_id);
        if voxels.is_empty() {
            return Err(Error::NotFound(format!("instance {instance_id} has no voxels")));
        }
        let sum = voxels
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + self.voxel_center(i).coords);
        Ok(sum / voxels.len() as f64)
    }

    fn bounds(&self) -> Option<(VoxelIndex, VoxelIndex)> {
        let mut it = self.cells.keys();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), k| {
            ([0, 1, 2].map(|i| lo[i].min(k[i])), [0, 1, 2].map(|i| hi[i].max(k[i])))
        }))
    }

    /// First occupied voxel along a ray; `dir` need not be normalised.
    pub fn cast_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(VoxelIndex, u32)> {
        let (lo, hi) = self.bounds()?;
        traverse(
            origin,
            dir,
            self.config.trace_range,
            self.voxel_size(),
            &self.origin,
            lo,
            hi,
            |idx| self.cells.get(&idx).and_then(Cell::effective_id),
        )
    }

    /// Regenerates a frame-consistent instance mask by casting one ray per
    /// pixel through the grid and reading the first occupied voxel.
    pub fn raytrace_mask(&self, pose: &CameraPose, intrinsics: &CameraIntrinsics) -> SegmentMask {
        let mut mask = SegmentMask::zeros(intrinsics.width, intrinsics.height);
        let Some(grid) = DenseLabels::build(self) else {
            return mask;
        };
        let origin = Point3::from(pose.position);
        for v in 0..intrinsics.height {
            for u in 0..intrinsics.width {
                let dir = pose.rotate(&intrinsics.pixel_ray(u as f64, v as f64));
                if let Some((_, id)) = traverse(
                    &origin,
                    &dir,
                    self.config.trace_range,
                    self.voxel_size(),
                    &self.origin,
                    grid.lo,
                    grid.hi,
                    |idx| grid.get(idx),
                ) {
                    mask.set(u, v, id);
                }
            }
        }
        mask
    }
}

/// Dense snapshot of effective ids over the occupied bounding box; turns
/// per-step lookups into array reads.
struct DenseLabels {
    lo: VoxelIndex,
    hi: VoxelIndex,
    dims: [usize; 3],
    ids: Vec<u32>,
}

const EMPTY: u32 = u32::MAX;

impl DenseLabels {
    fn build(map: &VoxelSemanticMap) -> Option<Self> {
        let (lo, hi) = map.bounds()?;
        let dims = [0, 1, 2].map(|i| (hi[i] - lo[i] + 1) as usize);
        let mut ids = vec![EMPTY; dims[0] * dims[1] * dims[2]];
        for (idx, cell) in &map.cells {
            if let Some(id) = cell.effective_id() {
                let o = [0, 1, 2].map(|i| (idx[i] - lo[i]) as usize);
                ids[(o[2] * dims[1] + o[1]) * dims[0] + o[0]] = id;
            }
        }
        Some(Self { lo, hi, dims, ids })
    }

    #[inline]
    fn get(&self, idx: VoxelIndex) -> Option<u32> {
        let o = [0, 1, 2].map(|i| (idx[i] - self.lo[i]) as usize);
        let id = self.ids[(o[2] * self.dims[1] + o[1]) * self.dims[0] + o[0]];
        (id != EMPTY).then_some(id)
    }
}

/// Amanatides-Woo traversal restricted to the index box `[lo, hi]`.
#[allow(clippy::too_many_arguments)]
fn traverse(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    max_range: f64,
    voxel_size: f64,
    grid_origin: &[f64; 3],
    lo: VoxelIndex,
    hi: VoxelIndex,
    lookup: impl Fn(VoxelIndex) -> Option<u32>,
) -> Option<(VoxelIndex, u32)> {
    let len = dir.norm();
    if !(len > 0.0) {
        return None;
    }
    let d = dir / len;
    // Clip the ray against the world-space box covered by [lo, hi].
    let mut t0 = 0.0f64;
    let mut t1 = max_range;
    for i in 0..3 {
        let bmin = grid_origin[i] + lo[i] as f64 * voxel_size;
        let bmax = grid_origin[i] + (hi[i] + 1) as f64 * voxel_size;
        if d[i].abs() < 1e-15 {
            if origin[i] < bmin || origin[i] >= bmax {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((bmin - origin[i]) / d[i], (bmax - origin[i]) / d[i]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    if t0 > t1 {
        return None;
    }
    let start = origin + d * t0;
    let mut idx = [0usize, 1, 2].map(|i| {
        let raw = ((start[i] - grid_origin[i]) / voxel_size).floor() as i32;
        raw.clamp(lo[i], hi[i])
    });
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for i in 0..3 {
        if d[i] > 0.0 {
            step[i] = 1;
            let boundary = grid_origin[i] + (idx[i] + 1) as f64 * voxel_size;
            t_max[i] = (boundary - origin[i]) / d[i];
            t_delta[i] = voxel_size / d[i];
        } else if d[i] < 0.0 {
            step[i] = -1;
            let boundary = grid_origin[i] + idx[i] as f64 * voxel_size;
            t_max[i] = (boundary - origin[i]) / d[i];
            t_delta[i] = -voxel_size / d[i];
        }
    }
    loop {
        if let Some(id) = lookup(idx) {
            return Some((idx, id));
        }
        let axis = if t_max[0] < t_max[1] {
            if t_max[0] < t_max[2] {
                0
            } else {
                2
            }
        } else if t_max[1] < t_max[2] {
            1
        } else {
            2
        };
        if t_max[axis] > t1 {
            return None;
        }
        idx[axis] += step[axis];
        if idx[axis] < lo[axis] || idx[axis] > hi[axis] {
            return None;
        }
        t_max[axis] += t_delta[axis];
    }
}

const MAP_FORMAT: &str = "crossia-voxel-map";
pub const MAP_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    format: String,
    version: u32,
    config: MapConfig,
    origin: [f64; 3],
    next_id: u32,
    /// `(i, j, k, [(id, count), ...])`, sorted by index.
    cells: Vec<(i32, i32, i32, Vec<(u32, u32)>)>,
}

impl VoxelSemanticMap {
    /// Writes the versioned JSON map document. Cells are sorted so equal
    /// maps produce identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Short content hash of the serialised map.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.document()).expect("map serialises");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    fn document(&self) -> MapFile {
        let mut cells: Vec<_> = self
            .cells
            .iter()
            .map(|(i, c)| (i[0], i[1], i[2], c.votes.clone()))
            .collect();
        cells.sort_by_key(|c| (c.0, c.1, c.2));
        MapFile {
            format: MAP_FORMAT.to_string(),
            version: MAP_FORMAT_VERSION,
            config: self.config,
            origin: self.origin,
            next_id: self.next_id,
            cells,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: MapFile = serde_json::from_str(&text)?;
        if doc.format != MAP_FORMAT {
            return Err(Error::Format(format!("not a voxel map: {}", doc.format)));
        }
        if doc.version != MAP_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported map version {}", doc.version)));
        }
        doc.config.validate()?;
        let mut cells = HashMap::with_capacity(doc.cells.len());
        for (i, j, k, votes) in doc.cells {
            if votes.is_empty() || votes.iter().any(|&(_, c)| c == 0) {
                return Err(Error::Format(format!("cell ({i},{j},{k}) has an empty vote")));
            }
            cells.insert([i, j, k], Cell { votes });
        }
        Ok(Self {
            config: doc.config,
            origin: doc.origin,
            cells,
            next_id: doc.next_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::DepthImage;

    fn single_pixel_frame(depth: f64) -> (RgbdFrame, SegmentMask) {
        let k = CameraIntrinsics::new(100.0, 100.0, 1.0, 1.0, 3, 3).unwrap();
        let mut d = DepthImage::zeros(3, 3);
        d.data[4] = depth;
        let mut mask = SegmentMask::zeros(3, 3);
        mask.set(1, 1, 3);
        let frame = RgbdFrame {
            rgb: image::RgbImage::new(3, 3),
            depth: d,
            pose: CameraPose::identity(),
            intrinsics: k,
            timestamp: 0.0,
        };
        (frame, mask)
    }

    #[test]
    fn principal_pixel_votes_into_axis_voxel() {
        let mut map = VoxelSemanticMap::new(MapConfig::default()).unwrap();
        let (frame, mask) = single_pixel_frame(1.0);
        map.integrate_frame(&frame, &mask).unwrap();
        let idx = map.voxel_of(&Point3::new(0.0, 0.0, 1.0));
        assert_eq!(map.cell(idx).unwrap().votes(), &[(3, 1)]);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn zero_depth_adds_nothing() {
        let mut map = VoxelSemanticMap::new(MapConfig::default()).unwrap();
        let (frame, mask) = single_pixel_frame(0.0);
        map.integrate_frame(&frame, &mask).unwrap();
        assert!(map.is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut map = VoxelSemanticMap::new(MapConfig::default()).unwrap();
        let (frame, _) = single_pixel_frame(1.0);
        assert!(matches!(
            map.integrate_frame(&frame, &SegmentMask::zeros(4, 3)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn argmax_vote_and_tie_rule() {
        let mut c = Cell::default();
        c.add_vote(3);
        c.add_vote(5);
        c.add_vote(3);
        assert_eq!(c.effective_id(), Some(3));
        let mut tie = Cell::default();
        tie.add_vote(7);
        tie.add_vote(2);
        assert_eq!(tie.effective_id(), Some(7));
    }

    #[test]
    fn centroid_of_two_voxels() {
        let mut map = VoxelSemanticMap::new(MapConfig {
            voxel_size: 0.1,
            ..MapConfig::default()
        })
        .unwrap();
        map.vote([0, 0, 0], 4);
        map.vote([2, 0, 0], 4);
        let c = map.instance_centroid(4).unwrap();
        assert!((c - Vector3::new(0.15, 0.05, 0.05)).norm() < 1e-12);
        assert!(matches!(map.instance_centroid(9), Err(Error::NotFound(_))));
    }

    #[test]
    fn single_voxel_projects_to_ten_pixel_block() {
        let mut map = VoxelSemanticMap::new(MapConfig {
            voxel_size: 0.1,
            ..MapConfig::default()
        })
        .unwrap();
        map.origin = [-0.05, -0.05, 0.95];
        map.vote([0, 0, 0], 1);
        assert_eq!(map.voxel_center([0, 0, 0]), Point3::new(0.0, 0.0, 1.0));
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let mask = map.raytrace_mask(&CameraPose::identity(), &k);
        let boxes = crate::map::mask_to_bboxes(&mask, 1);
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        // front face at z = 0.95 projects to 100 * 0.1 / 0.95 ~ 10.5 px
        assert!((10..=12).contains(&b.width()), "{b:?}");
        assert!((10..=12).contains(&b.height()), "{b:?}");
        let cx = (b.x_min + b.x_max) as f64 / 2.0;
        let cy = (b.y_min + b.y_max) as f64 / 2.0;
        assert!((cx - 32.0).abs() <= 0.5 && (cy - 32.0).abs() <= 0.5);
    }

    #[test]
    fn empty_map_traces_to_zero_mask() {
        let map = VoxelSemanticMap::new(MapConfig::default()).unwrap();
        let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        assert!(map.raytrace_mask(&CameraPose::identity(), &k).ids.iter().all(|&i| i == 0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let mut map = VoxelSemanticMap::new(MapConfig::default()).unwrap();
        map.vote([1, -2, 3], 4);
        map.vote([1, -2, 3], 0);
        map.vote([0, 0, 0], 2);
        map.save(&path).unwrap();
        assert_eq!(VoxelSemanticMap::load(&path).unwrap(), map);
    }
}
