//! Object-image database: low-quality crops labelled from the semantic map,
//! few-shot high-quality user images and per-instance centroids.
//!
//! On disk:
//!
//! ```text
//! <root>/manifest.json
//! <root>/crops/<instance_id>/<frame>_<k>.png
//! <root>/user/<instance_id>/<shot>.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::Deblurrer;
use crate::error::{Error, Result};
use crate::imaging::crop;
use crate::map::{mask_to_bboxes, BBox, VoxelSemanticMap};
use crate::world::RgbdFrame;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "crossia-object-db";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Low,
    High,
}

impl Domain {
    /// Binary label used by the domain classifier.
    pub fn label(self) -> usize {
        match self {
            Domain::Low => 0,
            Domain::High => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRecord {
    /// Pseudo-label (map-global instance id).
    pub instance_id: u32,
    /// Relative to the database root.
    pub path: PathBuf,
    pub source_frame: Option<usize>,
    pub bbox: Option<BBox>,
    pub domain: Domain,
    pub shot_index: Option<usize>,
    /// SHA-256 over dimensions and raw RGB bytes.
    pub digest: String,
    #[serde(skip)]
    pub image: RgbImage,
}

pub fn image_digest(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub centroid: [f64; 3],
    pub crops: Vec<CropRecord>,
}

impl InstanceEntry {
    pub fn low(&self) -> impl Iterator<Item = &CropRecord> {
        self.crops.iter().filter(|c| c.domain == Domain::Low)
    }

    pub fn high(&self) -> impl Iterator<Item = &CropRecord> {
        self.crops.iter().filter(|c| c.domain == Domain::High)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    /// Boxes narrower or shorter than this many pixels are dropped.
    pub min_bbox: u32,
    /// Upper bound on high-quality images per instance.
    pub max_shots: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            min_bbox: 10,
            max_shots: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbMeta {
    /// Identifies the map the labels came from (path or digest).
    pub map_reference: String,
    pub config: CollectConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectImageDatabase {
    pub instances: BTreeMap<u32, InstanceEntry>,
    pub meta: DbMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    meta: DbMeta,
    instances: Vec<ManifestInstance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestInstance {
    id: u32,
    centroid: [f64; 3],
    crops: Vec<CropRecord>,
}

/// Crops every frame with boxes taken from the map's ray-traced masks.
///
/// Each frame is passed through `deblurrer` before cropping; the traced id
/// becomes the crop's pseudo-label. Instances without any crop are left
/// out. Centroids are copied from the map.
pub fn collect_database(
    frames: &[RgbdFrame],
    map: &VoxelSemanticMap,
    deblurrer: &Deblurrer,
    config: &CollectConfig,
    map_reference: &str,
) -> Result<ObjectImageDatabase> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to collect from"));
    }
    let mut crops: BTreeMap<u32, Vec<CropRecord>> = BTreeMap::new();
    for (fi, frame) in frames.iter().enumerate() {
        frame.validate()?;
        let rgb = deblurrer.deblur(&frame.rgb)?;
        let traced = map.raytrace_mask(&frame.pose, &frame.intrinsics);
        for (k, b) in mask_to_bboxes(&traced, config.min_bbox).into_iter().enumerate() {
            let image = crop(&rgb, b.x_min, b.y_min, b.x_max, b.y_max);
            crops.entry(b.instance_id).or_default().push(CropRecord {
                instance_id: b.instance_id,
                path: PathBuf::from(format!("crops/{}/{fi:05}_{k}.png", b.instance_id)),
                source_frame: Some(fi),
                bbox: Some(b),
                domain: Domain::Low,
                shot_index: None,
                digest: image_digest(&image),
                image,
            });
        }
    }
    let mut instances = BTreeMap::new();
    for (id, crops) in crops {
        let c = map.instance_centroid(id)?;
        instances.insert(
            id,
            InstanceEntry {
                centroid: [c.x, c.y, c.z],
                crops,
            },
        );
    }
    Ok(ObjectImageDatabase {
        instances,
        meta: DbMeta {
            map_reference: map_reference.to_string(),
            config: config.clone(),
        },
    })
}

impl ObjectImageDatabase {
    pub fn instance_ids(&self) -> Vec<u32> {
        self.instances.keys().copied().collect()
    }

    pub fn crops(&self) -> impl Iterator<Item = &CropRecord> {
        self.instances.values().flat_map(|e| e.crops.iter())
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.crops().filter(|c| c.domain == domain).count()
    }

    /// Records the first `shots` images as high-quality views of
    /// `instance_id`, replacing any previous ones.
    pub fn add_user_images(&mut self, instance_id: u32, images: &[RgbImage], shots: usize) -> Result<()> {
        if shots < 1 || shots > images.len() {
            return Err(Error::invalid(format!(
                "shots must lie in 1..={}, got {shots}",
                images.len()
            )));
        }
        if shots > self.meta.config.max_shots {
            return Err(Error::invalid(format!(
                "shots {shots} exceeds the configured maximum {}",
                self.meta.config.max_shots
            )));
        }
        let entry = self
            .instances
            .get_mut(&instance_id)
            .ok_or_else(|| Error::NotFound(format!("instance {instance_id} not in database")))?;
        entry.crops.retain(|c| c.domain != Domain::High);
        for (shot, img) in images.iter().take(shots).enumerate() {
            entry.crops.push(CropRecord {
                instance_id,
                path: PathBuf::from(format!("user/{instance_id}/{shot}.png")),
                source_frame: None,
                bbox: None,
                domain: Domain::High,
                shot_index: Some(shot),
                digest: image_digest(img),
                image: img.clone(),
            });
        }
        Ok(())
    }

    /// Copy keeping only the first `shots` high-quality images per instance.
    pub fn with_shots(&self, shots: usize) -> Self {
        let mut db = self.clone();
        for e in db.instances.values_mut() {
            e.crops
                .retain(|c| c.domain == Domain::Low || c.shot_index.is_some_and(|s| s < shots));
        }
        db
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            meta: self.meta.clone(),
            instances: self
                .instances
                .iter()
                .map(|(&id, e)| ManifestInstance {
                    id,
                    centroid: e.centroid,
                    crops: e.crops.clone(),
                })
                .collect(),
        }
    }

    /// Content digest of the manifest (which itself holds image digests).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.manifest()).expect("manifest serialises");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for c in self.crops() {
            let path = root.join(&c.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            c.image.save(&path)?;
        }
        let text = serde_json::to_string_pretty(&self.manifest())?;
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(MANIFEST_FORMAT) {
            return Err(Error::Format(format!("{} is not a database manifest", path.display())));
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MANIFEST_VERSION as u64 => {}
            other => return Err(Error::Format(format!("unsupported manifest version {other:?}"))),
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let mut instances = BTreeMap::new();
        for inst in manifest.instances {
            let mut crops = Vec::with_capacity(inst.crops.len());
            for mut c in inst.crops {
                let file = root.join(&c.path);
                if !file.exists() {
                    return Err(Error::Integrity {
                        path: file,
                        detail: "crop file missing".into(),
                    });
                }
                c.image = image::open(&file)?.into_rgb8();
                if image_digest(&c.image) != c.digest {
                    return Err(Error::Integrity {
                        path: file,
                        detail: "digest mismatch".into(),
                    });
                }
                if c.instance_id != inst.id {
                    return Err(Error::Format(format!("crop {} filed under instance {}", c.path.display(), inst.id)));
                }
                crops.push(c);
            }
            instances.insert(
                inst.id,
                InstanceEntry {
                    centroid: inst.centroid,
                    crops,
                },
            );
        }
        Ok(Self {
            instances,
            meta: manifest.meta,
        })
    }
}
