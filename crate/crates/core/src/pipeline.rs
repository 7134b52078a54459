//! End-to-end data preparation: synthetic world generation, map building
//! and database collection, plus their on-disk layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::adapters::{Deblurrer, Segmenter};
use crate::db::{collect_database, CollectConfig, ObjectImageDatabase};
use crate::error::{Error, Result};
use crate::geometry::{read_tum, write_tum, CameraIntrinsics, StampedPose};
use crate::map::{associate_labels, MapConfig, SegmentMask, VoxelSemanticMap};
use crate::world::{
    degrade, generate_scene, orbit, render_instance_views, render_sequence, CloseupSpec, DegradationSpec, DepthImage,
    OrbitSpec, RgbdFrame, SceneDescription,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_instances: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Camera distance beyond the table edge.
    pub orbit_clearance: f64,
    pub camera_height: f64,
    pub orbit_jitter: f64,
    pub degradation: DegradationSpec,
    /// High-quality user images rendered per instance.
    pub user_images: usize,
    pub queries_per_instance: usize,
    pub closeup: CloseupSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_instances: 12,
            frames: 100,
            width: 320,
            height: 240,
            hfov_deg: 60.0,
            orbit_clearance: 0.9,
            camera_height: 1.6,
            orbit_jitter: 0.05,
            degradation: DegradationSpec::default(),
            user_images: 5,
            queries_per_instance: 8,
            closeup: CloseupSpec::default(),
        }
    }
}

const USER_STREAM: u64 = 0x5553_4552;
const QUERY_STREAM: u64 = 0x5155_4552;

/// Robot observations (degraded), their ground truth, and clean user-side
/// images keyed by ground-truth instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub scene: SceneDescription,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: Vec<StampedPose>,
    pub frames: Vec<RgbdFrame>,
    pub gt_masks: Vec<SegmentMask>,
    pub user_images: BTreeMap<u32, Vec<RgbImage>>,
    pub queries: BTreeMap<u32, Vec<RgbImage>>,
}

pub fn generate_world(seed: u64, cfg: &WorldConfig) -> Result<SyntheticWorld> {
    let scene = generate_scene(seed, cfg.n_instances)?;
    let intrinsics = CameraIntrinsics::from_fov(cfg.width, cfg.height, cfg.hfov_deg)?;
    let table = scene
        .surfaces
        .first()
        .ok_or_else(|| Error::invalid("scene has no table"))?;
    let center = table.center();
    let trajectory = orbit(&OrbitSpec {
        center: [center.x, center.y, table.max[2]],
        radius: (table.max[0] - table.min[0]).max(table.max[1] - table.min[1]) / 2.0 + cfg.orbit_clearance,
        height: cfg.camera_height,
        frames: cfg.frames,
        jitter: cfg.orbit_jitter,
        dt: 120.0 / cfg.frames.max(1) as f64,
        seed,
    })?;
    let rendered = render_sequence(&scene, &trajectory, &intrinsics)?;
    let mut frames = Vec::with_capacity(rendered.len());
    let mut gt_masks = Vec::with_capacity(rendered.len());
    for (i, (mut frame, mask)) in rendered.into_iter().enumerate() {
        let spec = DegradationSpec {
            seed: cfg.degradation.seed ^ seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..cfg.degradation
        };
        frame.rgb = degrade(&frame.rgb, &spec)?;
        frames.push(frame);
        gt_masks.push(mask);
    }
    let mut user_images = BTreeMap::new();
    let mut queries = BTreeMap::new();
    for id in scene.instance_ids() {
        if cfg.user_images > 0 {
            let imgs = render_instance_views(&scene, id, cfg.user_images, &intrinsics, &cfg.closeup, seed ^ USER_STREAM)?;
            user_images.insert(id, imgs);
        }
        if cfg.queries_per_instance > 0 {
            let imgs = render_instance_views(
                &scene,
                id,
                cfg.queries_per_instance,
                &intrinsics,
                &cfg.closeup,
                seed ^ QUERY_STREAM,
            )?;
            queries.insert(id, imgs);
        }
    }
    Ok(SyntheticWorld {
        seed,
        scene,
        intrinsics,
        trajectory,
        frames,
        gt_masks,
        user_images,
        queries,
    })
}

/// Result of integrating a sequence into a fresh map.
#[derive(Debug, Clone)]
pub struct MappingResult {
    pub map: VoxelSemanticMap,
    /// Per-frame masks relabelled to map-global ids.
    pub global_masks: Vec<SegmentMask>,
}

/// Segment, associate against the traced mask, integrate; frame by frame.
pub fn build_map(
    frames: &[RgbdFrame],
    gt_masks: Option<&[SegmentMask]>,
    segmenter: &Segmenter,
    deblurrer: &Deblurrer,
    config: &MapConfig,
) -> Result<MappingResult> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to map"));
    }
    if let Some(gt) = gt_masks {
        if gt.len() != frames.len() {
            return Err(Error::invalid("one ground-truth mask per frame is required"));
        }
    }
    let mut map = VoxelSemanticMap::new(*config)?;
    let mut global_masks = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        frame.validate()?;
        let rgb = deblurrer.deblur(&frame.rgb)?;
        let fresh = segmenter.segment(&rgb, gt_masks.map(|g| &g[i]))?;
        let traced = map.raytrace_mask(&frame.pose, &frame.intrinsics);
        let global = associate_labels(&mut map, &fresh, &traced)?;
        map.integrate_frame(frame, &global)?;
        global_masks.push(global);
    }
    Ok(MappingResult { map, global_masks })
}

fn overlap_counts(labels: &[SegmentMask], gt: &[SegmentMask]) -> HashMap<(u32, u32), usize> {
    let mut counts = HashMap::new();
    for (l, g) in labels.iter().zip(gt) {
        for (&a, &b) in l.ids.iter().zip(&g.ids) {
            if a > 0 && b > 0 {
                *counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn majority(counts: impl Iterator<Item = ((u32, u32), usize)>) -> BTreeMap<u32, u32> {
    let mut best: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    for ((key, value), n) in counts {
        let e = best.entry(key).or_insert((0, u32::MAX));
        if n > e.0 || (n == e.0 && value < e.1) {
            *e = (n, value);
        }
    }
    best.into_iter().map(|(k, (_, v))| (k, v)).collect()
}

/// Majority ground-truth id for every non-zero id of `labels`, counted over
/// pixels where both masks are non-zero.
pub fn label_correspondence(labels: &[SegmentMask], gt: &[SegmentMask]) -> BTreeMap<u32, u32> {
    majority(overlap_counts(labels, gt).into_iter())
}

/// Majority label for every ground-truth id; the inverse view of
/// [`label_correspondence`].
pub fn gt_correspondence(labels: &[SegmentMask], gt: &[SegmentMask]) -> BTreeMap<u32, u32> {
    majority(overlap_counts(labels, gt).into_iter().map(|((a, b), n)| ((b, a), n)))
}

/// Map, database and label bookkeeping of one collection run.
#[derive(Debug, Clone)]
pub struct CollectedRun {
    pub mapping: MappingResult,
    pub db: ObjectImageDatabase,
    /// Ground-truth id to map id.
    pub gt_to_map: BTreeMap<u32, u32>,
}

/// A held-out query with its ground truth expressed as a map id.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub name: String,
    pub image: RgbImage,
    pub instance_id: u32,
}

/// Maps the world, collects crops, and attaches up to `max_shots` user
/// images to each instance. The user knows which object they photographed;
/// here that knowledge is the ground-truth to map-id correspondence.
pub fn collect_run(
    world: &SyntheticWorld,
    segmenter: &Segmenter,
    deblurrer: &Deblurrer,
    map_config: &MapConfig,
    collect: &CollectConfig,
) -> Result<CollectedRun> {
    let mapping = build_map(&world.frames, Some(&world.gt_masks), segmenter, deblurrer, map_config)?;
    let mut db = collect_database(&world.frames, &mapping.map, deblurrer, collect, &map_reference(&mapping.map))?;
    let gt_to_map = gt_correspondence(&mapping.global_masks, &world.gt_masks);
    for (gt, images) in &world.user_images {
        let Some(&id) = gt_to_map.get(gt) else { continue };
        if db.instances.contains_key(&id) && !images.is_empty() {
            db.add_user_images(id, images, images.len().min(collect.max_shots))?;
        }
    }
    Ok(CollectedRun { mapping, db, gt_to_map })
}

/// Content reference of a map, recorded in the database metadata.
pub fn map_reference(map: &VoxelSemanticMap) -> String {
    format!("map:{}", map.digest())
}

/// Queries of `world` whose object was mapped, labelled with map ids.
pub fn labelled_queries(world: &SyntheticWorld, gt_to_map: &BTreeMap<u32, u32>) -> Vec<Query> {
    let mut out = Vec::new();
    for (gt, images) in &world.queries {
        if let Some(&id) = gt_to_map.get(gt) {
            for (k, img) in images.iter().enumerate() {
                out.push(Query {
                    name: format!("queries/{gt}/{k}.png"),
                    image: img.clone(),
                    instance_id: id,
                });
            }
        }
    }
    out
}

fn png_path(dir: &Path, name: String) -> std::path::PathBuf {
    dir.join(name)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldIndex {
    seed: u64,
    intrinsics: CameraIntrinsics,
    frames: usize,
    user_images: BTreeMap<u32, usize>,
    queries: BTreeMap<u32, usize>,
}

impl SyntheticWorld {
    /// Layout: `scene.json`, `world.json`, `trajectory.txt` (TUM),
    /// `frames/<i>_{rgb,depth,mask}.png`, `user/<id>/<k>.png`,
    /// `queries/<id>/<k>.png`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(&dir.join("frames"))?;
        self.scene.save(&dir.join("scene.json"))?;
        write_tum(&dir.join("trajectory.txt"), &self.trajectory)?;
        for (i, (f, m)) in self.frames.iter().zip(&self.gt_masks).enumerate() {
            let frames = dir.join("frames");
            f.rgb.save(png_path(&frames, format!("{i:05}_rgb.png")))?;
            f.depth.to_u16_mm().save(png_path(&frames, format!("{i:05}_depth.png")))?;
            m.to_u16_image()?.save(png_path(&frames, format!("{i:05}_mask.png")))?;
        }
        for (sub, set) in [("user", &self.user_images), ("queries", &self.queries)] {
            for (id, imgs) in set {
                let d = dir.join(sub).join(id.to_string());
                ensure_dir(&d)?;
                for (k, img) in imgs.iter().enumerate() {
                    img.save(png_path(&d, format!("{k}.png")))?;
                }
            }
        }
        let index = WorldIndex {
            seed: self.seed,
            intrinsics: self.intrinsics,
            frames: self.frames.len(),
            user_images: self.user_images.iter().map(|(k, v)| (*k, v.len())).collect(),
            queries: self.queries.iter().map(|(k, v)| (*k, v.len())).collect(),
        };
        let path = dir.join("world.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    /// Inverse of [`SyntheticWorld::save`]. Depth is restored at millimetre
    /// resolution.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("world.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: WorldIndex = serde_json::from_str(&text)?;
        let scene = SceneDescription::load(&dir.join("scene.json"))?;
        let trajectory = read_tum(&dir.join("trajectory.txt"))?;
        if trajectory.len() != index.frames {
            return Err(Error::Format("trajectory length does not match frame count".into()));
        }
        let mut frames = Vec::with_capacity(index.frames);
        let mut gt_masks = Vec::with_capacity(index.frames);
        let fdir = dir.join("frames");
        for (i, sp) in trajectory.iter().enumerate() {
            let rgb = image::open(fdir.join(format!("{i:05}_rgb.png")))?.into_rgb8();
            let depth = DepthImage::from_u16_mm(&image::open(fdir.join(format!("{i:05}_depth.png")))?.into_luma16());
            let mask = SegmentMask::from_u16_image(&image::open(fdir.join(format!("{i:05}_mask.png")))?.into_luma16());
            frames.push(RgbdFrame {
                rgb,
                depth,
                pose: sp.pose,
                intrinsics: index.intrinsics,
                timestamp: sp.timestamp,
            });
            gt_masks.push(mask);
        }
        let load_set = |sub: &str, counts: &BTreeMap<u32, usize>| -> Result<BTreeMap<u32, Vec<RgbImage>>> {
            counts
                .iter()
                .map(|(&id, &n)| {
                    let imgs = (0..n)
                        .map(|k| Ok(image::open(dir.join(sub).join(id.to_string()).join(format!("{k}.png")))?.into_rgb8()))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((id, imgs))
                })
                .collect()
        };
        Ok(Self {
            seed: index.seed,
            user_images: load_set("user", &index.user_images)?,
            queries: load_set("queries", &index.queries)?,
            scene,
            intrinsics: index.intrinsics,
            trajectory,
            frames,
            gt_masks,
        })
    }
}
