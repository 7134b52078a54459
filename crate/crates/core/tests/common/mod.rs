//! Oracles and fixtures shared by the integration tests. Every oracle here
//! is written from the definitions, without calling the code it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use crossia::loss::{adversarial_term, loss_total, LossConfig, PairKind, PairRef, Reduction};
use crossia::map::{MapConfig, NavConfig, VoxelSemanticMap};
use crossia::model::{ArchConfig, EncoderBundle, ViewOutputs};
use crossia::nn::{Parameters, Tensor3};
use crossia::retrieval::EmbeddingVector;
use crossia::train::{batch_gradient, AdversarialConfig, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const CLASSES: usize = 8;
pub const PROJ_DIM: usize = 16;

pub fn tiny_arch(domain_head: bool) -> ArchConfig {
    ArchConfig {
        input_size: 8,
        channels: vec![4, 6],
        feature_dim: 12,
        proj_dim: PROJ_DIM,
        pred_hidden: 8,
        domain_head,
    }
}

pub fn tiny_bundle(seed: u64, domain_head: bool) -> EncoderBundle {
    EncoderBundle::new(tiny_arch(domain_head), (1..=CLASSES as u32).collect(), seed).unwrap()
}

pub fn tiny_training(adversarial: Option<f64>, classifier: bool) -> TrainingConfig {
    TrainingConfig {
        arch: tiny_arch(adversarial.is_some()),
        reduction: Reduction::Sum,
        classifier,
        adversarial: AdversarialConfig {
            enabled: adversarial.is_some(),
            lambda: adversarial.unwrap_or(0.0),
        },
        ..TrainingConfig::desk()
    }
}

pub fn random_view<R: Rng>(rng: &mut R, size: usize) -> Tensor3 {
    let mut t = Tensor3::zeros(3, size, size);
    for v in &mut t.data {
        *v = StandardNormal.sample(rng);
    }
    t
}

/// Random robot and cross pairs over `n_views` views; at least one pair.
pub fn random_pairs<R: Rng>(rng: &mut R, n_views: usize) -> Vec<PairRef> {
    let n = rng.gen_range(1..=6);
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0..n_views);
            let mut b = rng.gen_range(0..n_views);
            if n_views > 1 {
                while b == a {
                    b = rng.gen_range(0..n_views);
                }
            }
            PairRef {
                kind: if rng.gen_bool(0.5) { PairKind::Robot } else { PairKind::Cross },
                view_a: a,
                view_b: b,
                target: rng.gen_range(0..CLASSES),
            }
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[target]
}

/// The pair objective transcribed one scalar at a time: the summed robot
/// pair losses plus the summed cross pair losses.
pub fn oracle_loss(views: &[ViewOutputs], pairs: &[PairRef], classifier: bool) -> f64 {
    let mut robot = 0.0;
    let mut cross = 0.0;
    for p in pairs {
        let (a, b) = (&views[p.view_a], &views[p.view_b]);
        let mut l = -0.5 * (cos(&a.p, &b.z) + cos(&b.p, &a.z));
        if classifier {
            l += 0.5 * (ce(&a.logits, p.target) + ce(&b.logits, p.target));
        }
        match p.kind {
            PairKind::Robot => robot += l,
            PairKind::Cross => cross += l,
        }
    }
    robot + cross
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Location of one scalar parameter in `params()` order.
#[derive(Debug, Clone, Copy)]
pub struct ParamIndex {
    pub buffer: usize,
    pub offset: usize,
}

pub fn sample_params<R: Rng>(bundle: &EncoderBundle, n: usize, rng: &mut R) -> Vec<ParamIndex> {
    let sizes: Vec<usize> = bundle.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    while out.len() < n.min(total) {
        let flat = rng.gen_range(0..total);
        if !seen.insert(flat) {
            continue;
        }
        let (mut buffer, mut offset) = (0, flat);
        while offset >= sizes[buffer] {
            offset -= sizes[buffer];
            buffer += 1;
        }
        out.push(ParamIndex { buffer, offset });
    }
    out
}

pub fn get_param(bundle: &EncoderBundle, at: ParamIndex) -> f64 {
    bundle.params()[at.buffer][at.offset]
}

pub fn set_param(bundle: &mut EncoderBundle, at: ParamIndex, value: f64) {
    bundle.params_mut()[at.buffer][at.offset] = value;
}

/// Which view outputs a finite-difference probe lets vary with the
/// parameters; the others stay at their unperturbed values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frozen {
    /// `z` is a constant: the stop-gradient surrogate.
    Z,
    /// `p` and the logits are constants, so only the `z` paths move.
    PAndLogits,
}

/// Pair loss and domain loss of `bundle` with the chosen outputs pinned to
/// `base`.
pub fn probe(
    bundle: &EncoderBundle,
    views: &[Tensor3],
    base: &[ViewOutputs],
    pairs: &[PairRef],
    classifier: bool,
    domain_labels: Option<&[usize]>,
    frozen: Frozen,
) -> (f64, f64) {
    let outs: Vec<ViewOutputs> = views
        .iter()
        .zip(base)
        .map(|(v, b)| {
            let mut o = bundle.forward(v).unwrap();
            match frozen {
                Frozen::Z => o.z = b.z.clone(),
                Frozen::PAndLogits => {
                    o.p = b.p.clone();
                    o.logits = b.logits.clone();
                }
            }
            o
        })
        .collect();
    let pair = loss_total(
        &outs,
        pairs,
        &LossConfig {
            reduction: Reduction::Sum,
            classifier,
        },
    )
    .unwrap()
    .total;
    let adv = match domain_labels {
        Some(labels) => {
            let logits: Vec<Vec<f64>> = outs.iter().map(|o| o.domain_logits.clone().unwrap()).collect();
            adversarial_term(&logits, labels, 0.0).unwrap().value
        }
        None => 0.0,
    };
    (pair, adv)
}

/// Central differences of both loss parts with respect to one parameter.
#[allow(clippy::too_many_arguments)]
pub fn central_difference(
    bundle: &EncoderBundle,
    at: ParamIndex,
    h: f64,
    views: &[Tensor3],
    base: &[ViewOutputs],
    pairs: &[PairRef],
    classifier: bool,
    domain_labels: Option<&[usize]>,
    frozen: Frozen,
) -> (f64, f64) {
    let mut b = bundle.clone();
    let w = get_param(bundle, at);
    set_param(&mut b, at, w + h);
    let (p_plus, a_plus) = probe(&b, views, base, pairs, classifier, domain_labels, frozen);
    set_param(&mut b, at, w - h);
    let (p_minus, a_minus) = probe(&b, views, base, pairs, classifier, domain_labels, frozen);
    ((p_plus - p_minus) / (2.0 * h), (a_plus - a_minus) / (2.0 * h))
}

/// Reference nearest free floor cell: scans a wide window, keeps cells
/// within the radius, and picks the smallest distance, then the smallest
/// `(i, j)` among distances equal up to rounding.
pub fn brute_force_goal(map: &VoxelSemanticMap, id: u32, nav: &NavConfig) -> Option<([f64; 3], f64)> {
    let voxels = map.instance_voxels(id);
    let s = map.voxel_size();
    let n = voxels.len() as f64;
    let cx = voxels.iter().map(|v| map.origin[0] + (v[0] as f64 + 0.5) * s).sum::<f64>() / n;
    let cy = voxels.iter().map(|v| map.origin[1] + (v[1] as f64 + 0.5) * s).sum::<f64>() / n;
    let blocked: HashSet<(i32, i32)> = map
        .cells()
        .filter(|(_, c)| c.is_occupied())
        .filter(|(idx, _)| {
            let z = map.origin[2] + (idx[2] as f64 + 0.5) * s;
            z >= nav.floor_z + nav.obstacle_min_height && z <= nav.floor_z + nav.obstacle_max_height
        })
        .map(|(idx, _)| (idx[0], idx[1]))
        .collect();
    let mut candidates = Vec::new();
    for i in -200..200 {
        for j in -200..200 {
            if blocked.contains(&(i, j)) {
                continue;
            }
            let x = map.origin[0] + (i as f64 + 0.5) * s;
            let y = map.origin[1] + (j as f64 + 0.5) * s;
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            if d <= nav.radius {
                candidates.push((d, i, j, x, y));
            }
        }
    }
    let best = candidates.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    candidates
        .iter()
        .filter(|c| c.0 <= best + 1e-9)
        .min_by_key(|c| (c.1, c.2))
        .map(|c| ([c.3, c.4, nav.floor_z], c.0))
}

pub fn random_embedding<R: Rng>(rng: &mut R, dim: usize, source: &str) -> EmbeddingVector {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    EmbeddingVector::new(v, source).unwrap()
}

pub fn random_db<R: Rng>(rng: &mut R, dim: usize) -> BTreeMap<u32, Vec<EmbeddingVector>> {
    let n = rng.gen_range(1..=10);
    let mut db = BTreeMap::new();
    for _ in 0..n {
        let id = rng.gen_range(1..50);
        let crops = (0..rng.gen_range(1..=5))
            .map(|k| random_embedding(rng, dim, &format!("{id}/{k}")))
            .collect();
        db.insert(id, crops);
    }
    db
}

/// Top instance by a plain scan over every (instance, crop) pair using the
/// best crop score; ties go to the lower id.
pub fn brute_force_top(query: &EmbeddingVector, db: &BTreeMap<u32, Vec<EmbeddingVector>>) -> u32 {
    let mut best: Option<(f64, u32)> = None;
    for (&id, crops) in db {
        for c in crops {
            let s = cos(&query.values, &c.values);
            let better = match best {
                None => true,
                Some((bs, bid)) => s > bs || (s == bs && id < bid),
            };
            if better {
                best = Some((s, id));
            }
        }
    }
    best.unwrap().1
}

fn forward_all(bundle: &EncoderBundle, views: &[Tensor3]) -> Vec<ViewOutputs> {
    views.iter().map(|v| bundle.forward(v).unwrap()).collect()
}

fn nonzero(o: &ViewOutputs) -> bool {
    [&o.z, &o.p].iter().all(|v| v.iter().any(|x| x.abs() > 1e-9))
}

/// Worst relative gap between the batch loss and the scalar transcription
/// over `batches` random batches, under both reductions and with and
/// without the classifier terms.
pub fn loss_oracle_gap(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut checked, mut bundle_seed) = (0, 0);
    while checked < batches {
        bundle_seed += 1;
        let bundle = tiny_bundle(bundle_seed, false);
        let views: Vec<_> = (0..rng.gen_range(2..8)).map(|_| random_view(&mut rng, 8)).collect();
        let pairs = random_pairs(&mut rng, views.len());
        let outs = forward_all(&bundle, &views);
        // A draw whose ReLUs are all dead has no direction to compare.
        if !outs.iter().all(nonzero) {
            continue;
        }
        checked += 1;
        for classifier in [true, false] {
            let want = oracle_loss(&outs, &pairs, classifier);
            for reduction in [Reduction::Sum, Reduction::Mean] {
                let got = loss_total(&outs, &pairs, &LossConfig { reduction, classifier }).unwrap();
                assert_eq!(got.robot_pairs + got.cross_pairs, pairs.len());
                let scale = if reduction == Reduction::Mean { pairs.len() as f64 } else { 1.0 };
                worst = worst.max(rel_err(got.total * scale, want, 1e-12));
            }
        }
    }
    worst
}

/// Analytic gradient vs central differences of the stop-gradient
/// surrogate on 120 random parameters. With a domain head the backbone
/// should see the domain gradient multiplied by `-lambda` and the head
/// should see it unchanged. Returns the count checked and the worst gap.
pub fn gradient_gap(seed: u64, adversarial: Option<f64>) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = tiny_bundle(seed, adversarial.is_some());
    let cfg = tiny_training(adversarial, true);
    let views: Vec<_> = (0..6).map(|_| random_view(&mut rng, 8)).collect();
    let pairs = random_pairs(&mut rng, views.len());
    let labels: Vec<usize> = (0..views.len()).map(|i| i % 2).collect();
    let labels_opt = adversarial.map(|_| labels.as_slice());
    let mut grads = bundle.zeros_like();
    batch_gradient(&bundle, &views, &pairs, labels_opt, &cfg, &mut grads).unwrap();
    let base = forward_all(&bundle, &views);
    let lambda = adversarial.unwrap_or(0.0);
    let backbone = bundle.backbone_buffers();
    let mut worst: f64 = 0.0;
    let sampled = sample_params(&bundle, 120, &mut rng);
    for &at in &sampled {
        let (d_pair, d_adv) = central_difference(&bundle, at, 1e-6, &views, &base, &pairs, true, labels_opt, Frozen::Z);
        let scale = if at.buffer < backbone { -lambda } else { 1.0 };
        let got = get_param(&grads, at);
        worst = worst.max(rel_err(got, d_pair + scale * d_adv, 1e-6));
    }
    (sampled.len(), worst)
}

pub struct ZPathReport {
    /// Worst gap between the analytic gradient and the `p`-only reference.
    pub worst: f64,
    /// Summed magnitude the `z` paths would have contributed.
    pub z_path_mass: f64,
    pub classifier_untouched: bool,
}

/// Cosine terms only: the gradient must equal the reference that holds
/// every `z` constant, even though the `z` paths do carry signal.
pub fn z_path_check(seed: u64) -> ZPathReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = tiny_bundle(seed, false);
    let cfg = tiny_training(None, false);
    let views: Vec<_> = (0..6).map(|_| random_view(&mut rng, 8)).collect();
    let pairs = random_pairs(&mut rng, views.len());
    let mut grads = bundle.zeros_like();
    batch_gradient(&bundle, &views, &pairs, None, &cfg, &mut grads).unwrap();
    let base = forward_all(&bundle, &views);
    let classifier_buffer = bundle.params().len() - 2;
    let classifier_untouched = grads.params()[classifier_buffer..].iter().all(|b| b.iter().all(|&g| g == 0.0));
    let (mut worst, mut z_path_mass) = (0.0f64, 0.0);
    for at in sample_params(&bundle, 120, &mut rng) {
        let (via_p, _) = central_difference(&bundle, at, 1e-6, &views, &base, &pairs, false, None, Frozen::Z);
        let (via_z, _) = central_difference(&bundle, at, 1e-6, &views, &base, &pairs, false, None, Frozen::PAndLogits);
        worst = worst.max(rel_err(get_param(&grads, at), via_p, 1e-6));
        z_path_mass += via_z.abs();
    }
    ZPathReport {
        worst,
        z_path_mass,
        classifier_untouched,
    }
}

/// A map with one object (id 1) of up to 20 voxels, surrounded by
/// background surfaces and a second object.
pub fn random_map<R: Rng>(rng: &mut R) -> (VoxelSemanticMap, Vec<[i32; 3]>) {
    let size = [0.05, 0.1, 0.2][rng.gen_range(0..3)];
    let mut map = VoxelSemanticMap::new(MapConfig {
        voxel_size: size,
        ..MapConfig::default()
    })
    .unwrap();
    map.origin = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0];
    let mut used = HashSet::new();
    let mut inst = Vec::new();
    for _ in 0..rng.gen_range(1..20) {
        let v = [rng.gen_range(-3..=3), rng.gen_range(-3..=3), rng.gen_range(2..(2.5 / size) as i32)];
        if used.insert(v) {
            map.vote(v, 1);
            inst.push(v);
        }
    }
    let reach = (1.2 / size) as i32;
    for _ in 0..rng.gen_range(0..400) {
        let v = [
            rng.gen_range(-reach..=reach),
            rng.gen_range(-reach..=reach),
            rng.gen_range(0..(1.0 / size) as i32),
        ];
        if used.insert(v) {
            map.vote(v, if rng.gen_bool(0.5) { 0 } else { 2 });
        }
    }
    (map, inst)
}
