//! Fine-tuning objective.
//!
//! Each pair `(a, b)` with shared label `y*` contributes
//!
//! ```text
//! -1/2 [cos(p_a, sg(z_b)) + cos(p_b, sg(z_a))] + 1/2 [CE(y_a, y*) + CE(y_b, y*)]
//! ```
//!
//! where `sg` is stop-gradient. Robot pairs hold two low-quality views;
//! cross pairs hold one low- and one high-quality view. The batch loss is
//! the sum over robot pairs plus the sum over cross pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ViewGrad, ViewOutputs};

/// Norms at or below this are rejected by the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Robot,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub reduction: Reduction,
    /// Include the classifier cross-entropy terms.
    pub classifier: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            reduction: Reduction::Sum,
            classifier: true,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > COSINE_EPS && nb > COSINE_EPS) {
        return Err(Error::numeric("cosine_similarity", "zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// `d cos(a, b) / d a`, with `b` held constant.
pub fn cosine_grad_first(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let cos = cosine_similarity(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect())
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// `softmax(logits) - onehot(target)`.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let mut g: Vec<f64> = log_softmax(logits).iter().map(|l| l.exp()).collect();
    g[target] -= 1.0;
    g
}

/// Cosine and cross-entropy parts of one pair loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairLoss {
    pub cosine: f64,
    pub ce: f64,
}

impl PairLoss {
    pub fn total(&self) -> f64 {
        self.cosine + self.ce
    }
}

fn check_target(a: &ViewOutputs, target: usize) -> Result<()> {
    if target >= a.logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} logits",
            a.logits.len()
        )));
    }
    Ok(())
}

fn symmetric_pair_loss(a: &ViewOutputs, b: &ViewOutputs, target: usize, classifier: bool) -> Result<PairLoss> {
    check_target(a, target)?;
    let cosine = -0.5 * (cosine_similarity(&a.p, &b.z)? + cosine_similarity(&b.p, &a.z)?);
    let ce = if classifier {
        0.5 * (cross_entropy(&a.logits, target) + cross_entropy(&b.logits, target))
    } else {
        0.0
    };
    Ok(PairLoss { cosine, ce })
}

/// Loss of a pair of low-quality views.
pub fn loss_robot(a: &ViewOutputs, b: &ViewOutputs, target: usize) -> Result<PairLoss> {
    symmetric_pair_loss(a, b, target, true)
}

/// Loss of a (low-quality, high-quality) pair.
pub fn loss_cross(low: &ViewOutputs, high: &ViewOutputs, target: usize) -> Result<PairLoss> {
    symmetric_pair_loss(low, high, target, true)
}

/// One pair of a batch, referencing views by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub kind: PairKind,
    pub view_a: usize,
    pub view_b: usize,
    /// Classifier row of the shared pseudo-label.
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub robot_cosine: f64,
    pub robot_ce: f64,
    pub cross_cosine: f64,
    pub cross_ce: f64,
    pub adversarial: Option<f64>,
    pub robot_pairs: usize,
    pub cross_pairs: usize,
}

impl LossBreakdown {
    fn finish(&mut self) {
        self.total =
            self.robot_cosine + self.robot_ce + self.cross_cosine + self.cross_ce + self.adversarial.unwrap_or(0.0);
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.robot_cosine, self.robot_ce, self.cross_cosine, self.cross_ce]
            .iter()
            .chain(self.adversarial.as_ref())
            .all(|v| v.is_finite())
    }
}

/// Batch loss without gradients.
pub fn loss_total(views: &[ViewOutputs], pairs: &[PairRef], cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(loss_total_with_grads(views, pairs, cfg)?.0)
}

/// Batch loss and `dL/dp`, `dL/dlogits` for every view. Gradients never
/// flow into `z`: each `z` enters only as a constant similarity target.
pub fn loss_total_with_grads(
    views: &[ViewOutputs],
    pairs: &[PairRef],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<ViewGrad>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("batch has no pairs"));
    }
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / pairs.len() as f64,
    };
    let mut grads: Vec<ViewGrad> = views
        .iter()
        .map(|v| ViewGrad {
            p: vec![0.0; v.p.len()],
            logits: vec![0.0; v.logits.len()],
            domain_logits: None,
        })
        .collect();
    let mut out = LossBreakdown::default();
    for pair in pairs {
        let (a, b) = (
            views.get(pair.view_a).ok_or_else(|| Error::invalid("pair references a missing view"))?,
            views.get(pair.view_b).ok_or_else(|| Error::invalid("pair references a missing view"))?,
        );
        let loss = symmetric_pair_loss(a, b, pair.target, cfg.classifier)?;
        match pair.kind {
            PairKind::Robot => {
                out.robot_cosine += scale * loss.cosine;
                out.robot_ce += scale * loss.ce;
                out.robot_pairs += 1;
            }
            PairKind::Cross => {
                out.cross_cosine += scale * loss.cosine;
                out.cross_ce += scale * loss.ce;
                out.cross_pairs += 1;
            }
        }
        let ga = cosine_grad_first(&a.p, &b.z)?;
        let gb = cosine_grad_first(&b.p, &a.z)?;
        for (g, v) in grads[pair.view_a].p.iter_mut().zip(&ga) {
            *g -= 0.5 * scale * v;
        }
        for (g, v) in grads[pair.view_b].p.iter_mut().zip(&gb) {
            *g -= 0.5 * scale * v;
        }
        if cfg.classifier {
            for (idx, view) in [(pair.view_a, a), (pair.view_b, b)] {
                let ce = cross_entropy_grad(&view.logits, pair.target);
                for (g, v) in grads[idx].logits.iter_mut().zip(&ce) {
                    *g += 0.5 * scale * v;
                }
            }
        }
    }
    out.finish();
    Ok((out, grads))
}

/// Value and logit gradients of the domain-classification term.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialTerm {
    pub value: f64,
    pub logit_grads: Vec<Vec<f64>>,
    /// Multiplier applied to gradients entering the backbone (`-lambda`).
    pub backbone_scale: f64,
}

/// Mean cross-entropy of the domain head over views (label 0 = low
/// quality, 1 = high quality).
pub fn adversarial_term(domain_logits: &[Vec<f64>], labels: &[usize], lambda: f64) -> Result<AdversarialTerm> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    if domain_logits.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("one domain label per view is required"));
    }
    if labels.iter().any(|&l| l > 1) || domain_logits.iter().any(|l| l.len() != 2) {
        return Err(Error::invalid("domain labels are binary"));
    }
    let n = labels.len() as f64;
    let value = domain_logits
        .iter()
        .zip(labels)
        .map(|(l, &t)| cross_entropy(l, t))
        .sum::<f64>()
        / n;
    let logit_grads = domain_logits
        .iter()
        .zip(labels)
        .map(|(l, &t)| cross_entropy_grad(l, t).into_iter().map(|g| g / n).collect())
        .collect();
    Ok(AdversarialTerm {
        value,
        logit_grads,
        backbone_scale: -lambda,
    })
}

impl LossBreakdown {
    pub fn with_adversarial(mut self, value: f64) -> Self {
        self.adversarial = Some(value);
        self.finish();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(z: Vec<f64>, p: Vec<f64>, logits: Vec<f64>) -> ViewOutputs {
        ViewOutputs {
            feature: vec![1.0],
            z,
            p,
            logits,
            domain_logits: None,
        }
    }

    #[test]
    fn aligned_with_uniform_logits() {
        let z = vec![0.6, 0.8];
        let zt = vec![1.0, 0.0];
        let a = view(z.clone(), zt.clone(), vec![0.0; 4]);
        let b = view(zt, z, vec![0.0; 4]);
        let l = loss_robot(&a, &b, 1).unwrap();
        assert!((l.total() - (-1.0 + 4f64.ln())).abs() < 1e-12);
        assert!((l.total() - 0.3863).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_with_confident_logits() {
        let a = view(vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 800.0]);
        let b = view(vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 800.0]);
        let l = loss_robot(&a, &b, 1).unwrap();
        assert!(l.total().abs() < 1e-12);
    }

    #[test]
    fn cross_minimum_and_maximum() {
        let low = view(vec![0.0, 2.0], vec![3.0, 0.0], vec![-900.0, 900.0]);
        let high = view(vec![1.0, 0.0], vec![0.0, 1.0], vec![-900.0, 900.0]);
        assert!((loss_cross(&low, &high, 1).unwrap().total() + 1.0).abs() < 1e-12);

        let low = view(vec![0.0, 2.0], vec![-3.0, 0.0], vec![0.0, 0.0]);
        let high = view(vec![1.0, 0.0], vec![0.0, -1.0], vec![0.0, 0.0]);
        let l = loss_cross(&low, &high, 0).unwrap().total();
        assert!((l - (1.0 + 2f64.ln())).abs() < 1e-12);
        assert!((l - 1.6931).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_is_numeric_error() {
        let a = view(vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0]);
        let b = view(vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0]);
        assert!(matches!(loss_robot(&a, &b, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(
            loss_total(&[], &[], &LossConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_pair_total_equals_pair_loss() {
        let a = view(vec![0.3, -0.2, 0.9], vec![0.1, 0.5, -0.4], vec![0.2, -0.1]);
        let b = view(vec![-0.7, 0.2, 0.1], vec![0.4, 0.4, 0.3], vec![0.5, 0.3]);
        let pairs = [PairRef {
            kind: PairKind::Robot,
            view_a: 0,
            view_b: 1,
            target: 1,
        }];
        let br = loss_total(&[a.clone(), b.clone()], &pairs, &LossConfig::default()).unwrap();
        assert!((br.total - loss_robot(&a, &b, 1).unwrap().total()).abs() < 1e-15);
        assert_eq!(br.cross_cosine, 0.0);
        assert_eq!(br.cross_ce, 0.0);
        assert_eq!((br.robot_pairs, br.cross_pairs), (1, 0));
    }

    #[test]
    fn uniform_domain_logits_give_ln2() {
        let logits = vec![vec![0.3, 0.3]; 4];
        let t = adversarial_term(&logits, &[0, 1, 0, 1], 1.0).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(t.backbone_scale, -1.0);
    }

    #[test]
    fn cosine_gradient_matches_finite_difference() {
        let a = [0.3, -1.2, 0.5];
        let b = [0.9, 0.1, -0.4];
        let g = cosine_grad_first(&a, &b).unwrap();
        let h = 1e-7;
        for i in 0..3 {
            let mut p = a;
            p[i] += h;
            let mut m = a;
            m[i] -= h;
            let fd = (cosine_similarity(&p, &b).unwrap() - cosine_similarity(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
