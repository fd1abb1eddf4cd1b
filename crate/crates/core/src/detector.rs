//! Label-consistency and representation-similarity detection against
//! augmentation neighbors, with thresholds calibrated on clean data.

use ndt::{Graph64, Tensor64};
use serde::{Deserialize, Serialize};

use crate::augment::{generate_neighbors, AugmentationSpec, NeighborSet};
use crate::data::LabeledImages;
use crate::models::{argmax_rows, classify, ClassHead, ClassifierNet, ModelBundle, SslEncoder};
use crate::{Error, Result};

/// Per-input evidence: the classifier's label plus, for every neighbor, the
/// head's label and the embedding cosine to the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborFeatures {
    pub classifier_label: usize,
    pub neighbor_labels: Vec<usize>,
    pub cosines: Vec<f64>,
}

impl NeighborFeatures {
    pub fn k(&self) -> usize {
        self.cosines.len()
    }

    /// The first `k` neighbors. Neighbor `i` does not depend on `k`, so this
    /// equals recomputing with `k` neighbors under the same seed.
    pub fn prefix(&self, k: usize) -> Self {
        let k = k.min(self.k());
        Self {
            classifier_label: self.classifier_label,
            neighbor_labels: self.neighbor_labels[..k].to_vec(),
            cosines: self.cosines[..k].to_vec(),
        }
    }

    pub fn label_matches(&self) -> Vec<bool> {
        self.neighbor_labels.iter().map(|&l| l == self.classifier_label).collect()
    }

    pub fn ind_label(&self) -> usize {
        self.label_matches().into_iter().filter(|&m| m).count()
    }

    /// Neighbors whose cosine similarity is at least `tau_cos`.
    pub fn ind_rep(&self, tau_cos: f64) -> usize {
        self.cosines.iter().filter(|&&c| c >= tau_cos).count()
    }

    /// `ind_label / k`.
    pub fn label_stat(&self) -> f64 {
        self.ind_label() as f64 / self.k() as f64
    }

    /// Mean neighbor cosine.
    pub fn rep_stat(&self) -> f64 {
        self.cosines.iter().sum::<f64>() / self.k() as f64
    }
}

fn cosine_rows(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::ZeroEmbedding);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Head labels for the neighbors and embedding cosines to the source, from
/// one trunk pass over `[x; neighbors]`.
fn ssl_evidence(encoder: &SslEncoder, head: &ClassHead, set: &NeighborSet) -> Result<(Vec<usize>, Vec<f64>)> {
    let k = set.k();
    let all = Tensor64::stack(&[set.source.clone(), set.neighbors.clone()])?;
    let mut g = Graph64::new();
    let xv = g.constant(all);
    let f = encoder.features(&mut g, xv)?;
    let z = encoder.projector.forward(&mut g, f, crate::models::Params::Frozen)?;
    let logits = head.logits(&mut g, f)?;
    let labels = argmax_rows(g.value(logits));
    let z = g.value(z);
    let d = z.shape()[1];
    let rows: Vec<&[f64]> = z.data().chunks(d).collect();
    let cosines = (1..=k).map(|i| cosine_rows(rows[0], rows[i])).collect::<Result<_>>()?;
    Ok((labels[1..].to_vec(), cosines))
}

/// Count of neighbors whose head label equals the classifier's label of `x`.
pub fn label_consistency_count(
    x: &Tensor64,
    neighbors: &NeighborSet,
    classifier: &ClassifierNet,
    encoder: &SslEncoder,
    head: &ClassHead,
) -> Result<usize> {
    let y = classify(classifier, x)?.labels[0];
    let (labels, _) = ssl_evidence(encoder, head, neighbors)?;
    Ok(labels.iter().filter(|&&l| l == y).count())
}

/// Count of neighbors with `cos(h(f(x)), h(f(x_i))) >= tau_cos`.
pub fn representation_similarity_count(x: &Tensor64, neighbors: &NeighborSet, encoder: &SslEncoder, tau_cos: f64) -> Result<usize> {
    let mut g = Graph64::new();
    let xv = g.constant(Tensor64::stack(&[x.clone(), neighbors.neighbors.clone()])?);
    let z = encoder.embed(&mut g, xv)?;
    let z = g.value(z);
    let d = z.shape()[1];
    let rows: Vec<&[f64]> = z.data().chunks(d).collect();
    let mut count = 0;
    for r in &rows[1..] {
        if cosine_rows(rows[0], r)? >= tau_cos {
            count += 1;
        }
    }
    Ok(count)
}

/// Evidence for one input `[1, c, h, w]` from `k` neighbors drawn under `seed`.
pub fn neighbor_features(bundle: &ModelBundle, x: &Tensor64, policy: &[AugmentationSpec], k: usize, seed: u64) -> Result<NeighborFeatures> {
    let set = generate_neighbors(x, k, policy, seed)?;
    let classifier_label = classify(&bundle.classifier, x)?.labels[0];
    let (neighbor_labels, cosines) = ssl_evidence(&bundle.encoder, &bundle.head, &set)?;
    Ok(NeighborFeatures {
        classifier_label,
        neighbor_labels,
        cosines,
    })
}

/// [`neighbor_features`] for every image of a set, in order.
pub fn features_for_set(
    bundle: &ModelBundle,
    set: &LabeledImages,
    policy: &[AugmentationSpec],
    k: usize,
    seed: u64,
) -> Result<Vec<NeighborFeatures>> {
    (0..set.len()).map(|i| neighbor_features(bundle, &set.image(i), policy, k, seed)).collect()
}

/// Empirical CDF with mid-rank ties: `(#{c < v} + #{c == v}/2) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { sorted: values }
    }

    pub fn eval(&self, v: f64) -> f64 {
        let lt = self.sorted.partition_point(|&c| c < v);
        let le = self.sorted.partition_point(|&c| c <= v);
        (lt as f64 + 0.5 * (le - lt) as f64) / self.sorted.len() as f64
    }
}

/// Continuous detection scores; higher means more likely adversarial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// `1 - ind_label / k`.
    pub label: f64,
    /// `1 - mean cosine`.
    pub rep: f64,
    /// `1 - min(F_label(label stat), F_rep(rep stat))` with calibration ECDFs `F`.
    pub combined: f64,
}

/// Calibrated detector state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub tau_cos: f64,
    pub t_label: usize,
    pub t_rep: usize,
    pub target_fpr: f64,
    pub k: usize,
    /// Joint and per-mechanism rejection rates on the calibration split.
    pub calibrated_fpr: f64,
    pub label_fpr: f64,
    pub rep_fpr: f64,
    pub label_ecdf: Ecdf,
    pub rep_ecdf: Ecdf,
}

impl DetectorThresholds {
    pub fn scores(&self, f: &NeighborFeatures) -> Scores {
        let (l, r) = (f.label_stat(), f.rep_stat());
        Scores {
            label: 1.0 - l,
            rep: 1.0 - r,
            combined: 1.0 - self.label_ecdf.eval(l).min(self.rep_ecdf.eval(r)),
        }
    }

    pub fn rejects(&self, f: &NeighborFeatures) -> bool {
        f.ind_label() < self.t_label || f.ind_rep(self.tau_cos) < self.t_rep
    }

    /// The same calibration with explicit integer thresholds.
    pub fn with_counts(&self, t_label: usize, t_rep: usize) -> Self {
        Self { t_label, t_rep, ..self.clone() }
    }
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Largest `t` in `[0, k]` whose rejection fraction `#{count < t} / n` is at most `budget`.
pub fn largest_feasible_threshold(counts: &[usize], k: usize, budget: f64) -> usize {
    let n = counts.len() as f64;
    (0..=k)
        .rev()
        .find(|&t| counts.iter().filter(|&&c| c < t).count() as f64 / n <= budget + 1e-12)
        .unwrap_or(0)
}

/// Calibrates on clean evidence only. `tau_cos` is the 5th percentile of all
/// clean neighbor cosines; each count threshold is the largest integer whose
/// clean rejection rate stays within half of `target_fpr`. A zero target
/// yields thresholds that accept everything.
pub fn calibrate_thresholds(clean: &[NeighborFeatures], k: usize, target_fpr: f64) -> Result<DetectorThresholds> {
    if !(0.0..1.0).contains(&target_fpr) {
        return Err(Error::BadTarget(target_fpr));
    }
    if clean.is_empty() {
        return Err(Error::Empty("clean calibration set"));
    }
    let clean: Vec<NeighborFeatures> = clean
        .iter()
        .map(|f| {
            if f.k() < k {
                Err(Error::KMismatch { calibrated: k, got: f.k() })
            } else {
                Ok(f.prefix(k))
            }
        })
        .collect::<Result<_>>()?;
    let all_cos: Vec<f64> = clean.iter().flat_map(|f| f.cosines.iter().copied()).collect();
    let tau_cos = percentile(&all_cos, 0.05).clamp(-1.0, 1.0);
    let labels: Vec<usize> = clean.iter().map(NeighborFeatures::ind_label).collect();
    let reps: Vec<usize> = clean.iter().map(|f| f.ind_rep(tau_cos)).collect();
    let (t_label, t_rep) = if target_fpr == 0.0 {
        (0, 0)
    } else {
        (
            largest_feasible_threshold(&labels, k, target_fpr / 2.0),
            largest_feasible_threshold(&reps, k, target_fpr / 2.0),
        )
    };
    let n = clean.len() as f64;
    let frac = |pred: &dyn Fn(usize) -> bool| (0..clean.len()).filter(|&i| pred(i)).count() as f64 / n;
    let label_fpr = frac(&|i| labels[i] < t_label);
    let rep_fpr = frac(&|i| reps[i] < t_rep);
    let calibrated_fpr = frac(&|i| labels[i] < t_label || reps[i] < t_rep);
    if calibrated_fpr > target_fpr + 1e-12 {
        return Err(Error::Unreachable { achieved: calibrated_fpr });
    }
    Ok(DetectorThresholds {
        tau_cos,
        t_label,
        t_rep,
        target_fpr,
        k,
        calibrated_fpr,
        label_fpr,
        rep_fpr,
        label_ecdf: Ecdf::new(clean.iter().map(NeighborFeatures::label_stat).collect()),
        rep_ecdf: Ecdf::new(clean.iter().map(NeighborFeatures::rep_stat).collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

/// Verdict with the per-neighbor audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub ind_label: usize,
    pub ind_rep: usize,
    pub verdict: Verdict,
    pub classifier_label: usize,
    pub label_matches: Vec<bool>,
    pub cosines: Vec<f64>,
    pub scores: Scores,
}

/// Verdict from precomputed evidence.
pub fn detect_features(f: &NeighborFeatures, th: &DetectorThresholds) -> Result<DetectionRecord> {
    if f.k() != th.k {
        return Err(Error::KMismatch { calibrated: th.k, got: f.k() });
    }
    let ind_label = f.ind_label();
    let ind_rep = f.ind_rep(th.tau_cos);
    let verdict = if ind_label < th.t_label || ind_rep < th.t_rep {
        Verdict::Reject
    } else {
        Verdict::Accept
    };
    Ok(DetectionRecord {
        ind_label,
        ind_rep,
        verdict,
        classifier_label: f.classifier_label,
        label_matches: f.label_matches(),
        cosines: f.cosines.clone(),
        scores: th.scores(f),
    })
}

/// Generates `k` neighbors of `x` under `seed` and applies the calibrated thresholds.
pub fn detect(
    x: &Tensor64,
    bundle: &ModelBundle,
    th: &DetectorThresholds,
    policy: &[AugmentationSpec],
    k: usize,
    seed: u64,
) -> Result<DetectionRecord> {
    if k != th.k {
        return Err(Error::KMismatch { calibrated: th.k, got: k });
    }
    detect_features(&neighbor_features(bundle, x, policy, k, seed)?, th)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(ind: usize, k: usize, cos: f64) -> NeighborFeatures {
        NeighborFeatures {
            classifier_label: 1,
            neighbor_labels: (0..k).map(|i| if i < ind { 1 } else { 0 }).collect(),
            cosines: vec![cos; k],
        }
    }

    #[test]
    fn exhaustive_threshold_scan() {
        // 90 samples at 50, 10 at 10: T = 11 would reject 10%.
        let mut counts = vec![50; 90];
        counts.extend(vec![10; 10]);
        assert_eq!(largest_feasible_threshold(&counts, 50, 0.025), 10);
        for t in 0..=50usize {
            let rate = counts.iter().filter(|&&c| c < t).count() as f64 / 100.0;
            assert_eq!(rate <= 0.025, t <= 10);
        }
    }

    #[test]
    fn uniform_perfect_scores_pick_k() {
        let clean: Vec<_> = (0..50).map(|_| feats(8, 8, 0.9)).collect();
        let th = calibrate_thresholds(&clean, 8, 0.05).unwrap();
        assert_eq!((th.t_label, th.t_rep), (8, 8));
        assert_eq!(th.calibrated_fpr, 0.0);
        let zero = calibrate_thresholds(&clean, 8, 0.0).unwrap();
        assert_eq!((zero.t_label, zero.t_rep), (0, 0));
    }

    #[test]
    fn boundary_counts_are_accepted() {
        let clean: Vec<_> = (0..40).map(|i| feats(4 + i % 5, 8, 0.5 + 0.01 * i as f64)).collect();
        let th = calibrate_thresholds(&clean, 8, 0.05).unwrap().with_counts(5, 3);
        let mut f = feats(5, 8, 0.0);
        f.cosines = vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
        let r = detect_features(&f, &th).unwrap();
        assert_eq!((r.ind_label, r.ind_rep, r.verdict), (5, 3, Verdict::Accept));
        let r = detect_features(&f, &th.with_counts(6, 3)).unwrap();
        assert_eq!(r.verdict, Verdict::Reject);
        assert!(matches!(detect_features(&f.prefix(4), &th), Err(Error::KMismatch { .. })));
    }

    #[test]
    fn ecdf_mid_ranks() {
        let e = Ecdf::new(vec![0.1, 0.2, 0.2, 0.4]);
        assert_eq!(e.eval(0.0), 0.0);
        assert_eq!(e.eval(0.2), 0.5);
        assert_eq!(e.eval(0.3), 0.75);
        assert_eq!(e.eval(1.0), 1.0);
    }
}
