//! Detection metrics, attack evaluation scenarios, parameter sweeps and
//! cost accounting.

use std::time::Instant;

use ndt::Tensor64;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    adaptive_attack, check_budget, fgsm, least_likely_target, orthogonal_pgd, pgd, AdaptiveConfig, AttackBudget,
    OrthogonalStrategy,
};
use crate::augment::AugmentationSpec;
use crate::data::{Curve, LabeledImages, ResultTable};
use crate::detector::{calibrate_thresholds, detect_features, neighbor_features, DetectorThresholds, NeighborFeatures, Verdict};
use crate::models::{classify, LayerSpec, ModelBundle};
use crate::{Error, Result};

/// Unit of metric computation; higher scores mean more likely adversarial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub is_adversarial: bool,
    pub provenance: String,
}

impl ScoredSample {
    pub fn new(score: f64, is_adversarial: bool) -> Self {
        Self {
            score,
            is_adversarial,
            provenance: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr, threshold)`, flagging `score >= threshold`; starts at
    /// `(0, 0, +inf)` and ends at `(1, 1, min score)`.
    pub points: Vec<(f64, f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_curve(&self, name: &str) -> Curve {
        Curve {
            name: name.to_string(),
            points: self.points.clone(),
        }
    }
}

fn split_counts(samples: &[ScoredSample]) -> Result<(u64, u64)> {
    let p = samples.iter().filter(|s| s.is_adversarial).count() as u64;
    let n = samples.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    Ok((p, n))
}

/// Groups of tied scores in descending order: `(score, positives, negatives)`.
fn tie_groups(samples: &[ScoredSample]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for s in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s.score => {
                if s.is_adversarial {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s.score, s.is_adversarial as u64, (!s.is_adversarial) as u64)),
        }
    }
    groups
}

/// ROC curve and the Mann-Whitney AUC `P(pos > neg) + P(tie) / 2`, computed
/// from integer pair counts so it matches direct pair counting exactly.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<RocCurve> {
    let (p, n) = split_counts(samples)?;
    let groups = tie_groups(samples);
    let mut points = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the U statistic: each positive scores 2 per lower negative, 1 per tie.
    let mut u2: u128 = 0;
    let mut neg_below = n;
    for &(score, gp, gn) in &groups {
        neg_below -= gn;
        u2 += gp as u128 * (2 * neg_below as u128 + gn as u128);
        tp += gp;
        fp += gn;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64, score));
    }
    let auc = u2 as f64 / (2 * p as u128 * n as u128) as f64;
    Ok(RocCurve { points, auc })
}

/// Largest TPR over thresholds whose FPR is at most `fpr_cap`.
pub fn tpr_at_fpr(samples: &[ScoredSample], fpr_cap: f64) -> Result<f64> {
    let roc = roc_auc(samples)?;
    Ok(roc
        .points
        .iter()
        .filter(|(f, _, _)| *f <= fpr_cap + 1e-12)
        .map(|&(_, t, _)| t)
        .fold(0.0, f64::max))
}

/// Outcome of one attacked input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub detected: bool,
    pub correct: bool,
}

/// Fraction of attacked inputs that are rejected or still correctly classified.
pub fn robust_accuracy(outcomes: &[AttackOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("attacked set"));
    }
    Ok(outcomes.iter().filter(|o| o.detected || o.correct).count() as f64 / outcomes.len() as f64)
}

/// [`robust_accuracy`] for an attacked set under calibrated thresholds.
pub fn robust_accuracy_of(
    attacked: &LabeledImages,
    bundle: &ModelBundle,
    thresholds: &DetectorThresholds,
    policy: &[AugmentationSpec],
    neighbor_seed: u64,
) -> Result<f64> {
    let mut outcomes = Vec::with_capacity(attacked.len());
    for i in 0..attacked.len() {
        let f = neighbor_features(bundle, &attacked.image(i), policy, thresholds.k, neighbor_seed)?;
        let r = detect_features(&f, thresholds)?;
        outcomes.push(AttackOutcome {
            detected: r.verdict == Verdict::Reject,
            correct: f.classifier_label == attacked.labels[i],
        });
    }
    robust_accuracy(&outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Adaptive,
    Orthogonal,
    Selection,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fgsm" => Self::Fgsm,
            "pgd" => Self::Pgd,
            "adaptive" => Self::Adaptive,
            "orthogonal" => Self::Orthogonal,
            "selection" => Self::Selection,
            _ => return Err(Error::Config(format!("unknown attack `{s}` (fgsm, pgd, adaptive, orthogonal, selection)"))),
        })
    }
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
            Self::Adaptive => "adaptive",
            Self::Orthogonal => "orthogonal",
            Self::Selection => "selection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub kind: AttackKind,
    pub eps: f64,
    pub steps: usize,
    /// Step size as a fraction of `eps`.
    pub step_fraction: f64,
    pub alpha: f64,
    pub k_eot: usize,
    pub seed: u64,
}

impl AttackSettings {
    pub fn budget(&self) -> AttackBudget {
        AttackBudget {
            eps: self.eps,
            steps: self.steps,
            step_size: self.eps * self.step_fraction,
            random_start: true,
            seed: self.seed,
        }
    }

    pub fn provenance(&self) -> String {
        format!("{}/eps={:.6}", self.kind.name(), self.eps)
    }
}

/// Adversarial images for `set`, all checked against the budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedSet {
    pub images: LabeledImages,
    /// Classifier label differs from the true label.
    pub success: Vec<bool>,
    pub predicted: Vec<usize>,
}

/// Everything an attack needs besides the inputs.
pub struct AttackEnv<'a> {
    pub bundle: &'a ModelBundle,
    pub policy: &'a [AugmentationSpec],
    /// Needed by the detector-aware attacks.
    pub thresholds: Option<&'a DetectorThresholds>,
    pub neighbor_seed: u64,
}

pub fn run_attack(set: &LabeledImages, env: &AttackEnv<'_>, s: &AttackSettings) -> Result<AttackedSet> {
    let bundle = env.bundle;
    let budget = s.budget();
    let x_adv = match s.kind {
        AttackKind::Fgsm => fgsm(&set.images, &set.labels, &bundle.classifier, s.eps)?.x_adv,
        AttackKind::Pgd => {
            let mut parts = Vec::new();
            let idx: Vec<usize> = (0..set.len()).collect();
            for (c, chunk) in idx.chunks(64).enumerate() {
                let b = AttackBudget {
                    seed: budget.seed.wrapping_add(c as u64),
                    ..budget
                };
                let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
                parts.push(pgd(&set.batch(chunk), &labels, &bundle.classifier, &b)?.x_adv);
            }
            Tensor64::stack(&parts)?
        }
        kind => {
            let cfg = AdaptiveConfig {
                alpha: s.alpha,
                k_eot: s.k_eot,
                budget,
                policy: env.policy.to_vec(),
            };
            let logits = classify(&bundle.classifier, &set.images)?.logits;
            let c = bundle.num_classes();
            let mut parts = Vec::with_capacity(set.len());
            for i in 0..set.len() {
                let x = set.image(i);
                let y = set.labels[i];
                let t = least_likely_target(&logits.data()[i * c..(i + 1) * c], y);
                parts.push(match kind {
                    AttackKind::Adaptive => adaptive_attack(&x, y, t, bundle, &cfg, i as u64)?,
                    _ => {
                        let th = env.thresholds.ok_or_else(|| Error::Config("detector-aware attack needs thresholds".into()))?;
                        let strategy = if kind == AttackKind::Selection {
                            OrthogonalStrategy::Selection
                        } else {
                            OrthogonalStrategy::Orthogonal
                        };
                        orthogonal_pgd(&x, y, t, bundle, th, env.policy, env.neighbor_seed, &cfg, strategy, i as u64)?
                    }
                });
            }
            Tensor64::stack(&parts)?
        }
    };
    check_budget(&x_adv, &set.images, s.eps)?;
    let images = LabeledImages {
        images: x_adv,
        labels: set.labels.clone(),
        num_classes: set.num_classes,
    };
    let predicted = classify(&bundle.classifier, &images.images)?.labels;
    let success = predicted.iter().zip(&set.labels).map(|(p, y)| p != y).collect();
    Ok(AttackedSet { images, success, predicted })
}

/// Clean evidence plus the correctly classified test inputs that attacks start from.
pub struct EvalContext<'a> {
    pub bundle: &'a ModelBundle,
    pub policy: &'a [AugmentationSpec],
    pub neighbor_seed: u64,
    /// Neighbor count used for evaluation (and the maximum of a neighbor sweep).
    pub k: usize,
    pub target_fpr: f64,
    /// Clean calibration evidence, computed with at least `k` neighbors.
    pub calib: &'a [NeighborFeatures],
    /// Correctly classified clean test inputs.
    pub test: &'a LabeledImages,
    /// Their clean evidence, computed with at least `k` neighbors.
    pub clean: &'a [NeighborFeatures],
    pub attack: AttackSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub grid: String,
    pub k: usize,
    pub eps: f64,
    pub alpha: f64,
    pub auc: f64,
    pub auc_label: f64,
    pub auc_rep: f64,
    pub tpr_at_fpr_5: f64,
    pub robust_accuracy: f64,
    pub attack_success: f64,
    /// Rejection rate of the clean negatives.
    pub clean_fpr: f64,
    pub n_adv: usize,
    pub n_clean: usize,
}

impl EvalRow {
    pub const HEADER: [&'static str; 13] = [
        "grid",
        "k",
        "eps",
        "alpha",
        "auc",
        "auc_label",
        "auc_rep",
        "tpr_at_fpr_5",
        "robust_accuracy",
        "attack_success",
        "clean_fpr",
        "n_adv",
        "n_clean",
    ];

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.grid.clone(),
            self.k.to_string(),
            format!("{:.6}", self.eps),
            self.alpha.to_string(),
            format!("{:.6}", self.auc),
            format!("{:.6}", self.auc_label),
            format!("{:.6}", self.auc_rep),
            format!("{:.6}", self.tpr_at_fpr_5),
            format!("{:.6}", self.robust_accuracy),
            format!("{:.6}", self.attack_success),
            format!("{:.6}", self.clean_fpr),
            self.n_adv.to_string(),
            self.n_clean.to_string(),
        ]
    }
}

/// Scores of clean negatives and adversarial positives under one calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSets {
    pub combined: Vec<ScoredSample>,
    pub label: Vec<ScoredSample>,
    pub rep: Vec<ScoredSample>,
}

pub fn score_sets(th: &DetectorThresholds, clean: &[NeighborFeatures], adv: &[NeighborFeatures], provenance: &str) -> ScoreSets {
    let mut out = ScoreSets {
        combined: Vec::new(),
        label: Vec::new(),
        rep: Vec::new(),
    };
    for (set, is_adv) in [(clean, false), (adv, true)] {
        for f in set {
            let s = th.scores(&f.prefix(th.k));
            let p = if is_adv { provenance.to_string() } else { "clean".to_string() };
            out.combined.push(ScoredSample { score: s.combined, is_adversarial: is_adv, provenance: p.clone() });
            out.label.push(ScoredSample { score: s.label, is_adversarial: is_adv, provenance: p.clone() });
            out.rep.push(ScoredSample { score: s.rep, is_adversarial: is_adv, provenance: p });
        }
    }
    out
}

/// Metrics for one attack at one neighbor count, given the adversarial
/// evidence (at least `k` neighbors) of every attacked input.
pub fn evaluate_attacked(
    ctx: &EvalContext<'_>,
    k: usize,
    attacked: &AttackedSet,
    adv_features: &[NeighborFeatures],
    settings: &AttackSettings,
) -> Result<(EvalRow, ScoreSets, DetectorThresholds)> {
    let th = calibrate_thresholds(ctx.calib, k, ctx.target_fpr)?;
    let pos: Vec<NeighborFeatures> = adv_features
        .iter()
        .zip(&attacked.success)
        .filter(|(_, &s)| s)
        .map(|(f, _)| f.prefix(k))
        .collect();
    let clean: Vec<NeighborFeatures> = ctx.clean.iter().map(|f| f.prefix(k)).collect();
    let sets = score_sets(&th, &clean, &pos, &settings.provenance());
    let auc_of = |s: &[ScoredSample]| roc_auc(s).map(|r| r.auc).unwrap_or(f64::NAN);
    let mut outcomes = Vec::with_capacity(adv_features.len());
    for (i, f) in adv_features.iter().enumerate() {
        outcomes.push(AttackOutcome {
            detected: detect_features(&f.prefix(k), &th)?.verdict == Verdict::Reject,
            correct: !attacked.success[i],
        });
    }
    let clean_fpr = clean.iter().filter(|f| th.rejects(f)).count() as f64 / clean.len().max(1) as f64;
    let row = EvalRow {
        grid: String::new(),
        k,
        eps: settings.eps,
        alpha: settings.alpha,
        auc: auc_of(&sets.combined),
        auc_label: auc_of(&sets.label),
        auc_rep: auc_of(&sets.rep),
        tpr_at_fpr_5: tpr_at_fpr(&sets.combined, 0.05).unwrap_or(f64::NAN),
        robust_accuracy: robust_accuracy(&outcomes)?,
        attack_success: attacked.success.iter().filter(|&&s| s).count() as f64 / attacked.success.len().max(1) as f64,
        clean_fpr,
        n_adv: pos.len(),
        n_clean: clean.len(),
    };
    Ok((row, sets, th))
}

/// Attacks the context's test inputs and computes the evidence of every output.
pub fn attack_and_featurize(ctx: &EvalContext<'_>, settings: &AttackSettings, thresholds: Option<&DetectorThresholds>) -> Result<(AttackedSet, Vec<NeighborFeatures>)> {
    let env = AttackEnv {
        bundle: ctx.bundle,
        policy: ctx.policy,
        thresholds,
        neighbor_seed: ctx.neighbor_seed,
    };
    let attacked = run_attack(ctx.test, &env, settings)?;
    let feats = (0..attacked.images.len())
        .map(|i| neighbor_features(ctx.bundle, &attacked.images.image(i), ctx.policy, ctx.k, ctx.neighbor_seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((attacked, feats))
}

/// Attack plus metrics at the context's neighbor count.
pub fn evaluate(ctx: &EvalContext<'_>, settings: &AttackSettings) -> Result<(EvalRow, ScoreSets)> {
    let th = calibrate_thresholds(ctx.calib, ctx.k, ctx.target_fpr)?;
    let (attacked, feats) = attack_and_featurize(ctx, settings, Some(&th))?;
    let (row, sets, _) = evaluate_attacked(ctx, ctx.k, &attacked, &feats, settings)?;
    Ok((row, sets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Neighbors,
    Alpha,
    Epsilon,
    Ablation,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "neighbors" => Self::Neighbors,
            "alpha" => Self::Alpha,
            "epsilon" => Self::Epsilon,
            "ablation" => Self::Ablation,
            _ => return Err(Error::Config(format!("unknown sweep `{s}` (neighbors, alpha, epsilon, ablation)"))),
        })
    }
}

/// One row per grid point. The neighbor sweep attacks once and rescores
/// prefixes of the neighbor lists; the other sweeps attack per grid point.
/// The ablation sweep runs over budgets and reports each mechanism's AUC.
pub fn run_sweep(kind: SweepKind, grid: &[f64], ctx: &EvalContext<'_>) -> Result<Vec<EvalRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    match kind {
        SweepKind::Neighbors => {
            let k_max = grid.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
            if k_max > ctx.k {
                return Err(Error::Config(format!("neighbor grid exceeds the context's k = {}", ctx.k)));
            }
            let th = calibrate_thresholds(ctx.calib, ctx.k, ctx.target_fpr)?;
            let (attacked, feats) = attack_and_featurize(ctx, &ctx.attack, Some(&th))?;
            for &k in grid {
                let k = k as usize;
                if k == 0 {
                    return Err(Error::Config("neighbor grid values must be >= 1".into()));
                }
                let (mut row, _, _) = evaluate_attacked(ctx, k, &attacked, &feats, &ctx.attack)?;
                row.grid = k.to_string();
                rows.push(row);
            }
        }
        SweepKind::Alpha | SweepKind::Epsilon | SweepKind::Ablation => {
            for &v in grid {
                let mut s = ctx.attack.clone();
                match kind {
                    SweepKind::Alpha => s.alpha = v,
                    _ => s.eps = v,
                }
                let (mut row, _) = evaluate(ctx, &s)?;
                row.grid = format!("{v}");
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn rows_table(name: &str, rows: &[EvalRow]) -> ResultTable {
    let mut t = ResultTable::new(name, &EvalRow::HEADER);
    for r in rows {
        t.push(r.cells());
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Parameters of every network used at detection time.
    pub params: usize,
    /// Analytic FLOPs of one forward pass through each of those networks.
    pub flops: u64,
    /// Analytic FLOPs of detecting one input with `k` neighbors.
    pub detection_flops: u64,
    /// Median seconds of five detection passes over the sample batch.
    pub wall_time: f64,
    /// `flops * params * wall_time`.
    pub overall: f64,
}

fn seq_flops(layers: &[LayerSpec], input: &[usize]) -> u64 {
    let mut shape = input.to_vec();
    let mut total = 0;
    for l in layers {
        total += l.flops(&shape);
        shape = l.output_shape(&shape);
    }
    total
}

pub fn cost_report(bundle: &ModelBundle, batch: &LabeledImages, policy: &[AugmentationSpec], k: usize, seed: u64) -> Result<CostReport> {
    let input = bundle.input_shape();
    let feat = [crate::models::FEATURE_DIM];
    let clf = seq_flops(&bundle.classifier.net.layers, &input);
    let trunk = seq_flops(&bundle.encoder.trunk.layers, &input);
    let proj = seq_flops(&bundle.encoder.projector.layers, &feat);
    let head = seq_flops(&bundle.head.layer.layers, &feat);
    let flops = clf + trunk + proj + head;
    let detection_flops = clf + (k as u64 + 1) * (trunk + proj) + k as u64 * head;
    let mut times = Vec::with_capacity(5);
    for _ in 0..5 {
        let t = Instant::now();
        for i in 0..batch.len() {
            neighbor_features(bundle, &batch.image(i), policy, k, seed)?;
        }
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let wall_time = times[2];
    let params = bundle.param_count();
    Ok(CostReport {
        params,
        flops,
        detection_flops,
        wall_time,
        overall: flops as f64 * params as f64 * wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(adv: &[f64], clean: &[f64]) -> Vec<ScoredSample> {
        adv.iter()
            .map(|&s| ScoredSample::new(s, true))
            .chain(clean.iter().map(|&s| ScoredSample::new(s, false)))
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&samples(&[0.9, 0.8], &[0.1, 0.2])).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&samples(&[0.5, 0.5], &[0.5])).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&samples(&[0.9, 0.8], &[0.7, 0.85])).unwrap().auc, 0.75);
        assert!(matches!(roc_auc(&samples(&[0.9], &[])), Err(Error::SingleClass)));
    }

    #[test]
    fn curve_endpoints() {
        let r = roc_auc(&samples(&[0.9, 0.3], &[0.7, 0.1])).unwrap();
        assert_eq!(r.points.first().unwrap().0, 0.0);
        assert_eq!((r.points.last().unwrap().0, r.points.last().unwrap().1), (1.0, 1.0));
    }

    #[test]
    fn tpr_examples() {
        let s = samples(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(tpr_at_fpr(&s, 0.01).unwrap(), 1.0);
        let s = samples(&[0.1, 0.5], &[0.9, 0.2]);
        assert_eq!(tpr_at_fpr(&s, 1.0).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&s, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn robust_accuracy_examples() {
        let all = vec![AttackOutcome { detected: true, correct: false }; 3];
        assert_eq!(robust_accuracy(&all).unwrap(), 1.0);
        let none = vec![AttackOutcome { detected: false, correct: false }; 3];
        assert_eq!(robust_accuracy(&none).unwrap(), 0.0);
        assert!(robust_accuracy(&[]).is_err());
    }
}
