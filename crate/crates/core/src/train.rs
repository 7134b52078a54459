//! Fine-tuning loop: sample pairs, augment, forward, loss, SGD.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentParams;
use crate::db::ObjectImageDatabase;
use crate::error::{Error, Result};
use crate::loss::{adversarial_term, loss_total_with_grads, LossBreakdown, LossConfig, PairRef, Reduction};
use crate::model::{float_to_tensor, ArchConfig, EncoderBundle, ViewTrace};
use crate::nn::Parameters;
use crate::pairs::{build_pairs, materialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over all epochs.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    pub enabled: bool,
    pub lambda: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm bound per step; 0 disables clipping.
    pub grad_clip: f64,
    pub schedule: LrSchedule,
    pub batch_pairs: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// High-quality images per instance made available to training.
    pub shots: usize,
    pub adversarial: AdversarialConfig,
    pub reduction: Reduction,
    pub classifier: bool,
    pub augment: AugmentParams,
    pub arch: ArchConfig,
    /// Seeds parameter initialisation.
    pub init_seed: u64,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        let arch = ArchConfig::desk();
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            // Without clipping a few seeds collapse in the first epochs.
            grad_clip: 1.0,
            schedule: LrSchedule::Cosine,
            batch_pairs: 64,
            epochs: 50,
            steps_per_epoch: 8,
            shots: 5,
            adversarial: AdversarialConfig::default(),
            reduction: Reduction::Mean,
            classifier: true,
            augment: AugmentParams {
                output_size: arch.input_size,
                ..AugmentParams::default()
            },
            arch,
            init_seed: 0,
            seed: 0,
        }
    }

    /// Hyperparameters as published, with the loss summed over pairs as
    /// written and no clipping or schedule; the architecture stays the
    /// small desk network since no pretrained backbone ships.
    pub fn paper() -> Self {
        Self {
            learning_rate: 0.07,
            batch_pairs: 256,
            epochs: 1000,
            reduction: Reduction::Sum,
            grad_clip: 0.0,
            schedule: LrSchedule::Constant,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push("momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            problems.push("weight_decay must be non-negative".into());
        }
        if !(self.grad_clip >= 0.0) {
            problems.push("grad_clip must be non-negative".into());
        }
        if self.epochs < 1 {
            problems.push("epochs must be at least 1".into());
        }
        if self.steps_per_epoch < 1 {
            problems.push("steps_per_epoch must be at least 1".into());
        }
        if self.batch_pairs < 1 {
            problems.push("batch_pairs must be at least 1".into());
        }
        if self.shots < 1 {
            problems.push("shots must be at least 1".into());
        }
        if self.adversarial.enabled && !(self.adversarial.lambda >= 0.0) {
            problems.push("adversarial.lambda must be non-negative".into());
        }
        if self.augment.output_size != self.arch.input_size {
            problems.push("augment.output_size must equal arch.input_size".into());
        }
        if let Err(e) = self.augment.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.arch.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            reduction: self.reduction,
            classifier: self.classifier,
        }
    }
}

/// Per-epoch means of the step loss breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub robot_cosine: f64,
    pub robot_ce: f64,
    pub cross_cosine: f64,
    pub cross_ce: f64,
    pub adversarial: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,robot_cosine,robot_ce,cross_cosine,cross_ce,adversarial,total";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format_row(r));
        }
        s
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn format_row(r: &LogRow) -> String {
    format!(
        "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
        r.epoch, r.robot_cosine, r.robot_ce, r.cross_cosine, r.cross_ce, r.adversarial, r.total
    )
}

/// Optional sink receiving each log row as soon as its epoch ends.
pub type LogSink<'a> = &'a mut dyn Write;

/// Loss and gradient of one batch of augmented pairs, accumulated into
/// `grads`. Exposed for the gradient checks.
pub fn batch_gradient(
    bundle: &EncoderBundle,
    views: &[crate::nn::Tensor3],
    pairs: &[PairRef],
    domain_labels: Option<&[usize]>,
    cfg: &TrainingConfig,
    grads: &mut EncoderBundle,
) -> Result<LossBreakdown> {
    let traces: Vec<ViewTrace> = views.iter().map(|v| bundle.forward_trace(v)).collect::<Result<_>>()?;
    let outputs: Vec<_> = traces.iter().map(|t| t.outputs.clone()).collect();
    let (mut breakdown, mut view_grads) = loss_total_with_grads(&outputs, pairs, &cfg.loss_config())?;
    let mut lambda = 0.0;
    if cfg.adversarial.enabled {
        let labels = domain_labels.ok_or_else(|| Error::invalid("adversarial training needs domain labels"))?;
        let logits: Vec<Vec<f64>> = outputs
            .iter()
            .map(|o| {
                o.domain_logits
                    .clone()
                    .ok_or_else(|| Error::invalid("adversarial training needs a domain head"))
            })
            .collect::<Result<_>>()?;
        let term = adversarial_term(&logits, labels, cfg.adversarial.lambda)?;
        for (g, lg) in view_grads.iter_mut().zip(term.logit_grads) {
            g.domain_logits = Some(lg);
        }
        lambda = cfg.adversarial.lambda;
        breakdown = breakdown.with_adversarial(term.value);
    }
    for (trace, g) in traces.iter().zip(&view_grads) {
        bundle.backward(trace, g, lambda, grads);
    }
    Ok(breakdown)
}

fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update((step as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("eight bytes"))
}

/// Fresh bundle for `db` as configured (random initialisation).
pub fn init_bundle(db: &ObjectImageDatabase, cfg: &TrainingConfig) -> Result<EncoderBundle> {
    let mut arch = cfg.arch.clone();
    arch.domain_head = cfg.adversarial.enabled;
    EncoderBundle::new(arch, db.instance_ids(), cfg.init_seed)
}

/// Fine-tunes a freshly initialised bundle on `db`.
pub fn train(db: &ObjectImageDatabase, cfg: &TrainingConfig) -> Result<(EncoderBundle, TrainingLog)> {
    train_from(init_bundle(db, cfg)?, db, cfg, None)
}

/// Fine-tunes `bundle` in place. High-quality images beyond `cfg.shots`
/// per instance are ignored.
pub fn train_from(
    mut bundle: EncoderBundle,
    db: &ObjectImageDatabase,
    cfg: &TrainingConfig,
    mut sink: Option<LogSink<'_>>,
) -> Result<(EncoderBundle, TrainingLog)> {
    cfg.validate()?;
    if cfg.adversarial.enabled != bundle.domain.is_some() {
        return Err(Error::invalid("domain head presence must match the adversarial setting"));
    }
    let db = db.with_shots(cfg.shots);
    for id in db.instance_ids() {
        if bundle.class_index(id).is_none() {
            return Err(Error::invalid(format!("instance {id} has no classifier row")));
        }
    }
    let mut velocity = bundle.zeros_like();
    let mut grads = bundle.zeros_like();
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let mut acc = LogRow {
            epoch,
            robot_cosine: 0.0,
            robot_ce: 0.0,
            cross_cosine: 0.0,
            cross_ce: 0.0,
            adversarial: 0.0,
            total: 0.0,
        };
        for step in 0..cfg.steps_per_epoch {
            let seed = step_seed(cfg.seed, epoch, step);
            let batch = build_pairs(&db, cfg.batch_pairs, seed)?;
            let pairs = materialize(&db, &batch, &cfg.augment, seed.rotate_left(17))?;
            let mut views = Vec::with_capacity(2 * pairs.len());
            let mut refs = Vec::with_capacity(pairs.len());
            let mut domains = Vec::with_capacity(2 * pairs.len());
            for p in &pairs {
                let target = bundle.class_index(p.label).expect("checked above");
                refs.push(PairRef {
                    kind: p.kind,
                    view_a: views.len(),
                    view_b: views.len() + 1,
                    target,
                });
                views.push(float_to_tensor(&p.view_a));
                views.push(float_to_tensor(&p.view_b));
                domains.push(p.domains.0.label());
                domains.push(p.domains.1.label());
            }
            grads.zero();
            let b = batch_gradient(&bundle, &views, &refs, Some(&domains), cfg, &mut grads).map_err(|e| match e {
                Error::Numeric { location, detail } => Error::Numeric {
                    location: format!("epoch {epoch} step {step} {location}"),
                    detail,
                },
                other => other,
            })?;
            if !b.is_finite() {
                return Err(Error::Numeric {
                    location: format!("epoch {epoch} step {step}"),
                    detail: format!("non-finite loss {b:?}"),
                });
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            let lr = cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
            sgd_step(&mut bundle, &grads, &mut velocity, lr, cfg);
            if !bundle.all_finite() {
                return Err(Error::Numeric {
                    location: format!("epoch {epoch} step {step}"),
                    detail: "parameters became non-finite".into(),
                });
            }
            acc.robot_cosine += b.robot_cosine;
            acc.robot_ce += b.robot_ce;
            acc.cross_cosine += b.cross_cosine;
            acc.cross_ce += b.cross_ce;
            acc.adversarial += b.adversarial.unwrap_or(0.0);
            acc.total += b.total;
        }
        let n = cfg.steps_per_epoch as f64;
        for v in [
            &mut acc.robot_cosine,
            &mut acc.robot_ce,
            &mut acc.cross_cosine,
            &mut acc.cross_ce,
            &mut acc.adversarial,
            &mut acc.total,
        ] {
            *v /= n;
        }
        log::info!("epoch {epoch}: total {:.5}", acc.total);
        if let Some(s) = sink.as_mut() {
            s.write_all(format_row(&acc).as_bytes())
                .map_err(|e| Error::Backend(format!("log sink: {e}")))?;
        }
        log.rows.push(acc);
    }
    Ok((bundle, log))
}

/// Rescales `grads` so its global L2 norm is at most `max_norm` (0 = off).
fn clip_gradients(grads: &mut EncoderBundle, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.params().iter().flat_map(|p| p.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in grads.params_mut() {
            p.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Momentum SGD with L2 weight decay: `v = mu v + g + wd w; w -= lr v`.
fn sgd_step(bundle: &mut EncoderBundle, grads: &EncoderBundle, velocity: &mut EncoderBundle, lr: f64, cfg: &TrainingConfig) {
    for ((w, g), v) in bundle
        .params_mut()
        .into_iter()
        .zip(grads.params())
        .zip(velocity.params_mut())
    {
        for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
    }
}

const CHECKPOINT_FORMAT: &str = "crossia-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_fingerprint: String,
    pub db_digest: String,
    pub bundle_fingerprint: String,
    pub bundle: EncoderBundle,
}

impl Checkpoint {
    pub fn new(bundle: EncoderBundle, config_fingerprint: &str, db_digest: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_fingerprint: config_fingerprint.into(),
            db_digest: db_digest.into(),
            bundle_fingerprint: bundle.fingerprint(),
            bundle,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.bundle.arch.validate()?;
        if !ck.bundle.all_finite() {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: "non-finite parameters".into(),
            });
        }
        if ck.bundle.fingerprint() != ck.bundle_fingerprint {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: "parameter fingerprint mismatch".into(),
            });
        }
        Ok(ck)
    }
}
