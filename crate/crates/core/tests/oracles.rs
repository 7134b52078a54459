mod common;

use common::*;
use crossia::eval::{compute_metrics, TrialResult};
use crossia::map::{MapConfig, NavConfig, VoxelSemanticMap};
use crossia::retrieval::{rank_instances, Aggregation, EmbeddingVector};
use crossia::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trials(ranks: &[usize]) -> Vec<TrialResult> {
    ranks
        .iter()
        .enumerate()
        .map(|(i, &k)| TrialResult::new(format!("q{i}"), 1, k).unwrap())
        .collect()
}

#[test]
fn metric_fixtures() {
    let m = compute_metrics("x", trials(&[1, 2, 4])).unwrap().metrics.unwrap();
    assert_eq!(m.sr, 1.0 / 3.0);
    assert_eq!(m.mrr, 7.0 / 12.0);
    assert!((m.mr - 12.0 / 7.0).abs() <= 4.0 * f64::EPSILON);
    assert!((m.mean_rank - 7.0 / 3.0).abs() < 1e-15);

    let m = compute_metrics("x", trials(&[1, 1, 1])).unwrap().metrics.unwrap();
    assert_eq!((m.sr, m.mrr, m.mr), (1.0, 1.0, 1.0));

    let m = compute_metrics("x", trials(&[2, 2])).unwrap().metrics.unwrap();
    assert_eq!((m.sr, m.mrr, m.mr), (0.0, 0.5, 2.0));

    assert!(TrialResult::new("q", 1, 0).is_err());
    assert!(compute_metrics("x", Vec::new()).is_err());
}

#[test]
fn metric_invariants_on_random_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let ranks: Vec<usize> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(1..20)).collect();
        let m = compute_metrics("x", trials(&ranks)).unwrap().metrics.unwrap();
        assert!(m.mrr >= m.sr);
        assert!((m.mr * m.mrr - 1.0).abs() < 1e-12);
        // Harmonic mean never exceeds the arithmetic mean.
        assert!(m.mr <= m.mean_rank + 1e-12);
    }
}

#[test]
fn centroid_is_mean_of_voxel_centres() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let (map, instance) = random_map(&mut rng);
        let s = map.voxel_size();
        let n = instance.len() as f64;
        let want: Vec<f64> = (0..3)
            .map(|a| instance.iter().map(|v| map.origin[a] + (v[a] as f64 + 0.5) * s).sum::<f64>() / n)
            .collect();
        let got = map.instance_centroid(1).unwrap();
        for a in 0..3 {
            assert!((got[a] - want[a]).abs() < 1e-9);
        }
    }
}

#[test]
fn nav_goal_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let nav = NavConfig::default();
    let mut unreachable = 0;
    for _ in 0..100 {
        let (map, _) = random_map(&mut rng);
        match (map.resolve_nav_goal(1, &nav), brute_force_goal(&map, 1, &nav)) {
            (Ok(goal), Some((target, d))) => {
                for a in 0..3 {
                    assert!((goal.target[a] - target[a]).abs() < 1e-12);
                }
                assert!((goal.distance_to_centroid - d).abs() < 1e-12);
                assert!(goal.distance_to_centroid <= 1.0);
            }
            (Err(Error::GoalUnreachable { .. }), None) => unreachable += 1,
            (got, want) => panic!("{got:?} vs {want:?}"),
        }
    }
    assert!(unreachable < 100);
}

#[test]
fn fully_blocked_surroundings_are_unreachable() {
    let mut map = VoxelSemanticMap::new(MapConfig {
        voxel_size: 0.2,
        ..MapConfig::default()
    })
    .unwrap();
    map.vote([0, 0, 3], 1);
    for i in -8..=8 {
        for j in -8..=8 {
            map.vote([i, j, 1], 0);
        }
    }
    assert!(matches!(
        map.resolve_nav_goal(1, &NavConfig::default()),
        Err(Error::GoalUnreachable { instance_id: 1, .. })
    ));
}

fn scaled(v: &EmbeddingVector, f: f64) -> EmbeddingVector {
    EmbeddingVector::new(v.values.iter().map(|x| x * f).collect(), v.source.clone()).unwrap()
}

#[test]
fn ranking_ignores_positive_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let db = random_db(&mut rng, 8);
        let q = random_embedding(&mut rng, 8, "q");
        for agg in [Aggregation::Max, Aggregation::Mean] {
            let base = rank_instances(&q, &db, agg, None).unwrap();

            let uniform: std::collections::BTreeMap<_, _> =
                db.iter().map(|(&id, cs)| (id, cs.iter().map(|c| scaled(c, 3.7)).collect())).collect();
            let r = rank_instances(&scaled(&q, 3.7), &uniform, agg, None).unwrap();
            for (a, b) in base.ranking.iter().zip(&r.ranking) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-12);
            }

            let mixed: std::collections::BTreeMap<_, _> = db
                .iter()
                .map(|(&id, cs)| (id, cs.iter().map(|c| scaled(c, rng.gen_range(0.01..100.0))).collect()))
                .collect();
            let r = rank_instances(&scaled(&q, rng.gen_range(0.01..100.0)), &mixed, agg, None).unwrap();
            let ids = |x: &crossia::retrieval::RankingResult| x.ranking.iter().map(|p| p.0).collect::<Vec<_>>();
            assert_eq!(ids(&base), ids(&r));
        }
    }
}

#[test]
fn top_one_matches_pairwise_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..100 {
        let db = random_db(&mut rng, 6);
        let q = random_embedding(&mut rng, 6, "q");
        let r = rank_instances(&q, &db, Aggregation::Max, None).unwrap();
        assert_eq!(r.top(), brute_force_top(&q, &db));
    }
}

#[test]
fn ties_go_to_the_lower_id() {
    let v = EmbeddingVector::new(vec![1.0, 0.0], "a").unwrap();
    let db = [(7, vec![v.clone()]), (3, vec![v.clone()])].into_iter().collect();
    let r = rank_instances(&v, &db, Aggregation::Max, Some(7)).unwrap();
    assert_eq!(r.top(), 3);
    assert_eq!(r.k, Some(2));
}
