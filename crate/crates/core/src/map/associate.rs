use std::collections::{BTreeMap, HashMap};

use crate::error::Result;
use crate::map::mask::SegmentMask;
use crate::map::voxel::VoxelSemanticMap;

/// Relabels segmenter-local ids in `fresh` to map-global ids.
///
/// Each fresh segment takes the traced id it overlaps with the highest IoU
/// (lower id on ties) when that IoU reaches the map's threshold; otherwise
/// the map allocates a new id for it. Fresh segments are processed in
/// ascending id order so allocation is deterministic.
pub fn associate_labels(
    map: &mut VoxelSemanticMap,
    fresh: &SegmentMask,
    traced: &SegmentMask,
) -> Result<SegmentMask> {
    fresh.check_same_dims(traced)?;
    let fresh_area = fresh.areas();
    let traced_area = traced.areas();
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&f, &t) in fresh.ids.iter().zip(&traced.ids) {
        if f > 0 && t > 0 {
            *overlap.entry((f, t)).or_insert(0) += 1;
        }
    }
    let threshold = map.config.iou_threshold;
    let mut relabel: BTreeMap<u32, u32> = BTreeMap::new();
    for (&f, &fa) in &fresh_area {
        let mut best: Option<(f64, u32)> = None;
        for (&t, &ta) in &traced_area {
            let inter = overlap.get(&(f, t)).copied().unwrap_or(0);
            if inter == 0 {
                continue;
            }
            let iou = inter as f64 / (fa + ta - inter) as f64;
            if best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, t));
            }
        }
        let global = match best {
            Some((iou, t)) if iou >= threshold => t,
            _ => map.allocate_id(),
        };
        relabel.insert(f, global);
    }
    let ids = fresh
        .ids
        .iter()
        .map(|&f| if f == 0 { 0 } else { relabel[&f] })
        .collect();
    SegmentMask::from_ids(fresh.width, fresh.height, ids)
}
