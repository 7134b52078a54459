//! Retrieval metrics, benchmark tables, the few-shot ablation and latent
//! space export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::adapters::Deblurrer;
use crate::db::{Domain, ObjectImageDatabase};
use crate::error::{Error, Result};
use crate::loss::cosine_similarity;
use crate::model::EncoderBundle;
use crate::pipeline::Query;
use crate::retrieval::{embed_one, Aggregation, DbEmbeddings};
use crate::train::{train, Checkpoint, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub query: String,
    pub instance_id: u32,
    pub k: usize,
    pub s: bool,
}

impl TrialResult {
    pub fn new(query: impl Into<String>, instance_id: u32, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::invalid("ranks are 1-based"));
        }
        Ok(Self {
            query: query.into(),
            instance_id,
            k,
            s: k == 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sr: f64,
    pub mrr: f64,
    /// Reciprocal of MRR.
    pub mr: f64,
    /// Arithmetic mean of the ranks, reported alongside `mr`.
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n: usize,
    /// Absent when the condition failed.
    pub metrics: Option<Metrics>,
    /// Mean cosine between high-quality and same-instance low-quality
    /// embeddings.
    pub alignment: Option<f64>,
    pub trials: Vec<TrialResult>,
    /// Queries left out, with the reason.
    pub skipped: Vec<String>,
    pub failure: Option<String>,
}

impl EvalReport {
    pub fn failed(label: &str, reason: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            n: 0,
            metrics: None,
            alignment: None,
            trials: Vec::new(),
            skipped: Vec::new(),
            failure: Some(reason.into()),
        }
    }

    /// `"CrossIA | SR 0.751 | MRR 0.812 | MR 1.24"`.
    pub fn table_row(&self) -> String {
        match &self.metrics {
            Some(m) => format_row(&self.label, m.sr, m.mrr, m.mr),
            None => format!("{} | FAILED: {}", self.label, self.failure.as_deref().unwrap_or("unknown")),
        }
    }

    /// `"Five-shot | 0.751 | 0.812 | 1.24"`.
    pub fn ablation_row(&self) -> String {
        match &self.metrics {
            Some(m) => format!("{} | {:.3} | {:.3} | {:.2}", self.label, m.sr, m.mrr, m.mr),
            None => format!("{} | FAILED: {}", self.label, self.failure.as_deref().unwrap_or("unknown")),
        }
    }
}

pub fn format_row(label: &str, sr: f64, mrr: f64, mr: f64) -> String {
    format!("{label} | SR {sr:.3} | MRR {mrr:.3} | MR {mr:.2}")
}

pub fn compute_metrics(label: &str, trials: Vec<TrialResult>) -> Result<EvalReport> {
    if trials.is_empty() {
        return Err(Error::invalid("no trials to score"));
    }
    if let Some(t) = trials.iter().find(|t| t.k < 1 || t.s != (t.k == 1)) {
        return Err(Error::invalid(format!("inconsistent trial {}", t.query)));
    }
    let n = trials.len() as f64;
    let sr = trials.iter().filter(|t| t.s).count() as f64 / n;
    let mrr = trials.iter().map(|t| 1.0 / t.k as f64).sum::<f64>() / n;
    let mean_rank = trials.iter().map(|t| t.k as f64).sum::<f64>() / n;
    Ok(EvalReport {
        label: label.into(),
        n: trials.len(),
        metrics: Some(Metrics {
            sr,
            mrr,
            mr: 1.0 / mrr,
            mean_rank,
        }),
        alignment: None,
        trials,
        skipped: Vec::new(),
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BundleSource {
    Bundle(Box<EncoderBundle>),
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub label: String,
    pub source: BundleSource,
    /// Pass the robot crops through the benchmark's deblurrer first.
    pub deblur: bool,
}

/// Mean cosine between each high-quality image and every low-quality crop
/// of the same instance.
pub fn cross_domain_alignment(bundle: &EncoderBundle, db: &ObjectImageDatabase) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for entry in db.instances.values() {
        let lows = entry
            .low()
            .map(|c| embed_one(bundle, &c.image, &c.path.to_string_lossy()))
            .collect::<Result<Vec<_>>>()?;
        for h in entry.high() {
            let hv = embed_one(bundle, &h.image, &h.path.to_string_lossy())?;
            for l in &lows {
                sum += cosine_similarity(&hv.values, &l.values)?;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Ranks every query against the database crops with one bundle.
pub fn evaluate_bundle(
    label: &str,
    bundle: &EncoderBundle,
    db: &ObjectImageDatabase,
    queries: &[Query],
    deblurrer: &Deblurrer,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    let emb = DbEmbeddings::build(bundle, db, deblurrer)?;
    let mut trials = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for q in queries {
        if !emb.instances.contains_key(&q.instance_id) {
            log::warn!("query {} refers to unknown instance {}", q.name, q.instance_id);
            skipped.push(format!("{}: unknown instance {}", q.name, q.instance_id));
            continue;
        }
        let v = embed_one(bundle, &q.image, &q.name)?;
        let r = emb.rank(&v, aggregation, Some(q.instance_id))?;
        trials.push(TrialResult::new(q.name.clone(), q.instance_id, r.k.expect("ground truth is ranked"))?);
    }
    if trials.is_empty() {
        let mut r = EvalReport::failed(label, "no query refers to a known instance");
        r.skipped = skipped;
        return Ok(r);
    }
    let mut report = compute_metrics(label, trials)?;
    report.skipped = skipped;
    report.alignment = cross_domain_alignment(bundle, db)?;
    Ok(report)
}

/// One report per condition. A condition that cannot be loaded or scored
/// yields a failed report; the others are unaffected.
pub fn run_benchmark(
    conditions: &[Condition],
    queries: &[Query],
    db: &ObjectImageDatabase,
    deblurrer: &Deblurrer,
    aggregation: Aggregation,
) -> Vec<EvalReport> {
    conditions
        .iter()
        .map(|c| {
            let result = (|| {
                let bundle = match &c.source {
                    BundleSource::Bundle(b) => (**b).clone(),
                    BundleSource::Checkpoint(p) => Checkpoint::load(p)?.bundle,
                };
                let identity = Deblurrer::Identity;
                let d = if c.deblur { deblurrer } else { &identity };
                evaluate_bundle(&c.label, &bundle, db, queries, d, aggregation)
            })();
            result.unwrap_or_else(|e| {
                log::warn!("condition {} failed: {e}", c.label);
                EvalReport::failed(&c.label, e.to_string())
            })
        })
        .collect()
}

pub fn shot_label(shots: usize) -> String {
    match shots {
        1 => "One-shot".into(),
        3 => "Three-shot".into(),
        5 => "Five-shot".into(),
        n => format!("{n}-shot"),
    }
}

/// Trains once per entry of `shots_list` and evaluates each bundle.
pub fn few_shot_ablation(
    db: &ObjectImageDatabase,
    shots_list: &[usize],
    config: &TrainingConfig,
    queries: &[Query],
) -> Result<Vec<EvalReport>> {
    let max = shots_list
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::invalid("shots_list is empty"))?;
    if shots_list.contains(&0) {
        return Err(Error::invalid("shots must be at least 1"));
    }
    for (id, e) in &db.instances {
        let have = e.high().count();
        if have < max {
            return Err(Error::invalid(format!(
                "instance {id} has {have} high-quality images, {max} needed"
            )));
        }
    }
    shots_list
        .iter()
        .map(|&shots| {
            let cfg = TrainingConfig {
                shots,
                ..config.clone()
            };
            let (bundle, _) = train(db, &cfg)?;
            evaluate_bundle(
                &shot_label(shots),
                &bundle,
                &db.with_shots(shots),
                queries,
                &Deblurrer::Identity,
                Aggregation::Max,
            )
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("label,n,sr,mrr,mr,mean_rank,alignment,skipped,status\n");
    for r in reports {
        let m = r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.n,
            fmt_opt(m.map(|m| m.sr)),
            fmt_opt(m.map(|m| m.mrr)),
            fmt_opt(m.map(|m| m.mr)),
            fmt_opt(m.map(|m| m.mean_rank)),
            fmt_opt(r.alignment),
            r.skipped.len(),
            if r.failure.is_some() { "failed" } else { "ok" }
        );
    }
    s
}

/// Writes `<stem>.csv`, `<stem>.json` and a human-readable `<stem>.txt`.
pub fn write_reports(reports: &[EvalReport], dir: &Path, stem: &str, ablation: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(format!("{stem}.csv"), reports_csv(reports))?;
    write(format!("{stem}.json"), serde_json::to_string_pretty(reports)?)?;
    let mut table = String::new();
    for r in reports {
        table.push_str(&if ablation { r.ablation_row() } else { r.table_row() });
        table.push('\n');
    }
    let skipped: Vec<&String> = reports.iter().flat_map(|r| &r.skipped).collect();
    if !skipped.is_empty() {
        let _ = writeln!(table, "skipped queries: {}", skipped.len());
        for s in skipped {
            let _ = writeln!(table, "  {s}");
        }
    }
    write(format!("{stem}.txt"), table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub values: Vec<f64>,
    pub instance_id: u32,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub instance_id: u32,
    pub domain: Domain,
}

/// Embeds every crop and user image of `db`.
pub fn latent_points(bundle: &EncoderBundle, db: &ObjectImageDatabase) -> Result<Vec<LatentPoint>> {
    db.crops()
        .map(|c| {
            Ok(LatentPoint {
                values: embed_one(bundle, &c.image, &c.path.to_string_lossy())?.values,
                instance_id: c.instance_id,
                domain: c.domain,
            })
        })
        .collect()
}

/// Projects onto the two leading principal components. Each axis is signed
/// so that its largest-magnitude loading is positive.
pub fn export_latent_projection(points: &[LatentPoint]) -> Result<Vec<ProjectedPoint>> {
    if points.len() < 2 {
        return Err(Error::invalid("at least two points are needed"));
    }
    let d = points[0].values.len();
    if d == 0 || points.iter().any(|p| p.values.len() != d) {
        return Err(Error::invalid("embeddings must share a non-zero dimension"));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(&p.values).for_each(|(m, v)| *m += v / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i].values[j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else { return vec![0.0; d] };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1));
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = x.row(i);
            ProjectedPoint {
                x: row.iter().zip(&a0).map(|(r, a)| r * a).sum(),
                y: row.iter().zip(&a1).map(|(r, a)| r * a).sum(),
                instance_id: p.instance_id,
                domain: p.domain,
            }
        })
        .collect())
}

pub fn latent_csv(points: &[ProjectedPoint]) -> String {
    let mut s = String::from("x,y,instance_id,domain\n");
    for p in points {
        let d = match p.domain {
            Domain::Low => "low",
            Domain::High => "high",
        };
        let _ = writeln!(s, "{:.9},{:.9},{},{d}", p.x, p.y, p.instance_id);
    }
    s
}

/// Scatter plot: colour per instance, circles for robot crops and squares
/// for user images.
pub fn latent_svg(points: &[ProjectedPoint]) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let sx = (SIZE - 2.0 * PAD) / (x1 - x0).max(1e-12);
    let sy = (SIZE - 2.0 * PAD) / (y1 - y0).max(1e-12);
    let mut ids: Vec<u32> = points.iter().map(|p| p.instance_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let hue: BTreeMap<u32, f64> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, 360.0 * i as f64 / ids.len() as f64))
        .collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for p in points {
        let cx = PAD + (p.x - x0) * sx;
        let cy = SIZE - PAD - (p.y - y0) * sy;
        let fill = format!("hsl({:.0},70%,45%)", hue[&p.instance_id]);
        match p.domain {
            Domain::Low => {
                let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{fill}\" fill-opacity=\"0.6\"/>");
            }
            Domain::High => {
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"{fill}\" stroke=\"black\"/>",
                    cx - 4.0,
                    cy - 4.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
