//! Cosine retrieval over database crops and goal resolution.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::adapters::Deblurrer;
use crate::db::{Domain, ObjectImageDatabase};
use crate::error::{Error, Result};
use crate::loss::cosine_similarity;
use crate::map::{NavConfig, NavGoal, VoxelSemanticMap};
use crate::model::{image_to_tensor, EncoderBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source: String,
}

impl EmbeddingVector {
    /// Rejects non-finite or zero-norm vectors.
    pub fn new(values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        let source = source.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("embed", format!("non-finite embedding for {source}")));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::numeric("embed", format!("zero-norm embedding for {source}")));
        }
        Ok(Self { values, source })
    }
}

/// Backbone features of `images`; `sources[i]` names image `i` in errors.
pub fn embed(bundle: &EncoderBundle, images: &[RgbImage], sources: &[String]) -> Result<Vec<EmbeddingVector>> {
    if images.len() != sources.len() {
        return Err(Error::invalid("one source name per image is required"));
    }
    images
        .iter()
        .zip(sources)
        .map(|(img, src)| {
            if img.width() == 0 || img.height() == 0 {
                return Err(Error::invalid(format!("empty image {src}")));
            }
            let f = bundle.backbone(&image_to_tensor(img, bundle.arch.input_size))?;
            EmbeddingVector::new(f, src.clone())
        })
        .collect()
}

pub fn embed_one(bundle: &EncoderBundle, image: &RgbImage, source: &str) -> Result<EmbeddingVector> {
    Ok(embed(bundle, std::slice::from_ref(image), &[source.to_string()])?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query: String,
    /// `(instance_id, score)`, best first.
    pub ranking: Vec<(u32, f64)>,
    pub ground_truth: Option<u32>,
    /// 1-based rank of the ground truth, when it is among the candidates.
    pub k: Option<usize>,
}

impl RankingResult {
    pub fn top(&self) -> u32 {
        self.ranking[0].0
    }
}

/// Scores every instance against `query` and sorts by descending score,
/// ties going to the lower id.
pub fn rank_instances(
    query: &EmbeddingVector,
    db: &BTreeMap<u32, Vec<EmbeddingVector>>,
    aggregation: Aggregation,
    ground_truth: Option<u32>,
) -> Result<RankingResult> {
    let mut ranking = Vec::with_capacity(db.len());
    for (&id, crops) in db {
        if crops.is_empty() {
            continue;
        }
        let scores = crops
            .iter()
            .map(|c| cosine_similarity(&query.values, &c.values))
            .collect::<Result<Vec<_>>>()?;
        let score = match aggregation {
            Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        };
        ranking.push((id, score));
    }
    if ranking.is_empty() {
        return Err(Error::invalid("database has no embeddings"));
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = ground_truth.and_then(|g| ranking.iter().position(|(id, _)| *id == g).map(|p| p + 1));
    Ok(RankingResult {
        query: query.source.clone(),
        ranking,
        ground_truth,
        k,
    })
}

const CACHE_FORMAT: &str = "crossia-embedding-cache";

/// Database crop embeddings for one bundle, keyed so a stale cache is
/// detected rather than silently reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbEmbeddings {
    pub format: String,
    pub bundle_fingerprint: String,
    pub db_digest: String,
    /// Preprocessing applied to crops before embedding.
    pub preprocess: String,
    pub instances: BTreeMap<u32, Vec<EmbeddingVector>>,
}

impl DbEmbeddings {
    /// Embeds the low-quality (robot) crops: the observations the robot
    /// itself collected. User images are training material only.
    pub fn build(bundle: &EncoderBundle, db: &ObjectImageDatabase, deblurrer: &Deblurrer) -> Result<Self> {
        let mut instances = BTreeMap::new();
        for (&id, entry) in &db.instances {
            let mut v = Vec::new();
            for c in entry.crops.iter().filter(|c| c.domain == Domain::Low) {
                let img = deblurrer.deblur(&c.image)?;
                v.push(embed_one(bundle, &img, &c.path.to_string_lossy())?);
            }
            if !v.is_empty() {
                instances.insert(id, v);
            }
        }
        Ok(Self {
            format: CACHE_FORMAT.into(),
            bundle_fingerprint: bundle.fingerprint(),
            db_digest: db.digest(),
            preprocess: deblurrer.tag(),
            instances,
        })
    }

    pub fn matches(&self, bundle: &EncoderBundle, db: &ObjectImageDatabase, deblurrer: &Deblurrer) -> bool {
        self.format == CACHE_FORMAT
            && self.bundle_fingerprint == bundle.fingerprint()
            && self.db_digest == db.digest()
            && self.preprocess == deblurrer.tag()
    }

    /// Reads `path` when it matches the inputs; otherwise rebuilds and
    /// rewrites it.
    pub fn load_or_build(
        path: &Path,
        bundle: &EncoderBundle,
        db: &ObjectImageDatabase,
        deblurrer: &Deblurrer,
    ) -> Result<Self> {
        if let Ok(text) = std::fs::read_to_string(path) {
            match serde_json::from_str::<Self>(&text) {
                Ok(c) if c.matches(bundle, db, deblurrer) => return Ok(c),
                _ => log::info!("embedding cache {} is stale, rebuilding", path.display()),
            }
        }
        let c = Self::build(bundle, db, deblurrer)?;
        std::fs::write(path, serde_json::to_string(&c)?).map_err(|e| Error::io(path, e))?;
        Ok(c)
    }

    pub fn rank(&self, query: &EmbeddingVector, aggregation: Aggregation, gt: Option<u32>) -> Result<RankingResult> {
        rank_instances(query, &self.instances, aggregation, gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocateResult {
    pub ranking: RankingResult,
    pub goal: NavGoal,
}

/// Embeds the query, ranks instances and resolves the winner to a goal.
pub fn locate(
    query: &RgbImage,
    bundle: &EncoderBundle,
    db: &DbEmbeddings,
    map: &VoxelSemanticMap,
    nav: &NavConfig,
    aggregation: Aggregation,
) -> Result<LocateResult> {
    let q = embed_one(bundle, query, "query")?;
    let ranking = db.rank(&q, aggregation, None)?;
    let goal = map.resolve_nav_goal(ranking.top(), nav)?;
    Ok(LocateResult { ranking, goal })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64], s: &str) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), s).unwrap()
    }

    fn db_from(scores: &[(u32, &[f64])]) -> BTreeMap<u32, Vec<EmbeddingVector>> {
        // Unit vectors in the plane whose dot with (1, 0) is the score.
        scores
            .iter()
            .map(|&(id, s)| {
                let v = s.iter().map(|&c| ev(&[c, (1.0 - c * c).max(0.0).sqrt()], "c")).collect();
                (id, v)
            })
            .collect()
    }

    #[test]
    fn max_aggregation() {
        let db = db_from(&[(1, &[0.2, 0.9]), (2, &[0.5])]);
        let r = rank_instances(&ev(&[1.0, 0.0], "q"), &db, Aggregation::Max, Some(2)).unwrap();
        assert_eq!(r.ranking.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!((r.ranking[0].1 - 0.9).abs() < 1e-12);
        assert!((r.ranking[1].1 - 0.5).abs() < 1e-12);
        assert_eq!(r.k, Some(2));
        let m = rank_instances(&ev(&[1.0, 0.0], "q"), &db, Aggregation::Mean, None).unwrap();
        assert_eq!(m.top(), 1);
        assert!((m.ranking[0].1 - 0.55).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let db = db_from(&[(5, &[0.7]), (3, &[0.7]), (9, &[0.1])]);
        let r = rank_instances(&ev(&[1.0, 0.0], "q"), &db, Aggregation::Max, Some(5)).unwrap();
        assert_eq!(r.ranking.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 5, 9]);
        assert_eq!(r.k, Some(2));
    }

    #[test]
    fn empty_database_is_invalid() {
        let db = BTreeMap::new();
        assert!(matches!(
            rank_instances(&ev(&[1.0], "q"), &db, Aggregation::Max, None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_embedding_rejected() {
        let e = EmbeddingVector::new(vec![0.0, 0.0], "crop-7").unwrap_err();
        assert!(e.to_string().contains("crop-7"));
    }
}
