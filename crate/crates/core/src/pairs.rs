//! Robot and cross pair sampling over the object-image database.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_one, AugmentParams};
use crate::db::{Domain, ObjectImageDatabase};
use crate::error::{Error, Result};
use crate::imaging::FloatImage;
use crate::loss::PairKind;

/// Position of a crop: instance id and index into that instance's crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRef {
    pub instance_id: u32,
    pub index: usize,
}

/// A sampled pair before augmentation. For cross pairs `a` is the
/// low-quality crop and `b` the high-quality image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub kind: PairKind,
    pub label: u32,
    pub a: CropRef,
    pub b: CropRef,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairBatch {
    pub robot_pairs: Vec<PairSpec>,
    pub cross_pairs: Vec<PairSpec>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.robot_pairs.len() + self.cross_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &PairSpec> {
        self.robot_pairs.iter().chain(&self.cross_pairs)
    }
}

/// A pair with both views augmented to encoder resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub kind: PairKind,
    pub label: u32,
    pub view_a: FloatImage,
    pub view_b: FloatImage,
    pub domains: (Domain, Domain),
}

struct Pool {
    id: u32,
    low: Vec<usize>,
    high: Vec<usize>,
}

/// Samples `batch_pairs` pairs. When some instance can supply robot pairs
/// (two low crops) and some can supply cross pairs (a low crop and a high
/// image), the batch is split evenly, robot pairs taking the odd one;
/// otherwise every pair is of the available kind. Instances are drawn
/// uniformly, then crops uniformly within the instance.
pub fn build_pairs(db: &ObjectImageDatabase, batch_pairs: usize, seed: u64) -> Result<PairBatch> {
    if batch_pairs == 0 {
        return Err(Error::invalid("batch_pairs must be at least 1"));
    }
    let pools: Vec<Pool> = db
        .instances
        .iter()
        .map(|(&id, e)| {
            let (mut low, mut high) = (Vec::new(), Vec::new());
            for (i, c) in e.crops.iter().enumerate() {
                match c.domain {
                    Domain::Low => low.push(i),
                    Domain::High => high.push(i),
                }
            }
            Pool { id, low, high }
        })
        .collect();
    let robot: Vec<&Pool> = pools.iter().filter(|p| p.low.len() >= 2).collect();
    let cross: Vec<&Pool> = pools.iter().filter(|p| !p.low.is_empty() && !p.high.is_empty()).collect();
    let (m, n) = match (robot.is_empty(), cross.is_empty()) {
        (true, true) => {
            return Err(Error::CannotSample(
                "no instance has two low-quality crops or a low/high combination".into(),
            ))
        }
        (false, true) => (batch_pairs, 0),
        (true, false) => (0, batch_pairs),
        (false, false) => (batch_pairs - batch_pairs / 2, batch_pairs / 2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = PairBatch::default();
    for _ in 0..m {
        let pool = robot[rng.gen_range(0..robot.len())];
        let mut two = pool.low.choose_multiple(&mut rng, 2);
        let (a, b) = (*two.next().expect("two crops"), *two.next().expect("two crops"));
        batch.robot_pairs.push(PairSpec {
            kind: PairKind::Robot,
            label: pool.id,
            a: CropRef { instance_id: pool.id, index: a },
            b: CropRef { instance_id: pool.id, index: b },
        });
    }
    for _ in 0..n {
        let pool = cross[rng.gen_range(0..cross.len())];
        let a = *pool.low.choose(&mut rng).expect("low crop");
        let b = *pool.high.choose(&mut rng).expect("high image");
        batch.cross_pairs.push(PairSpec {
            kind: PairKind::Cross,
            label: pool.id,
            a: CropRef { instance_id: pool.id, index: a },
            b: CropRef { instance_id: pool.id, index: b },
        });
    }
    Ok(batch)
}

/// Augments both views of every pair (cross pairs included). Each view is
/// drawn from its own stream so results do not depend on evaluation order.
pub fn materialize(
    db: &ObjectImageDatabase,
    batch: &PairBatch,
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    let fetch = |r: &CropRef| {
        db.instances
            .get(&r.instance_id)
            .and_then(|e| e.crops.get(r.index))
            .ok_or_else(|| Error::NotFound(format!("crop {}:{}", r.instance_id, r.index)))
    };
    batch
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let (ca, cb) = (fetch(&spec.a)?, fetch(&spec.b)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let view_a = augment_one(&FloatImage::from_rgb(&ca.image), params, &mut rng)?;
            let view_b = augment_one(&FloatImage::from_rgb(&cb.image), params, &mut rng)?;
            Ok(ContrastivePair {
                kind: spec.kind,
                label: spec.label,
                view_a,
                view_b,
                domains: (ca.domain, cb.domain),
            })
        })
        .collect()
}
