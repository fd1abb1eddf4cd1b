//! Empirical checks of the feature-gap argument: adversarial inputs should
//! move further from their augmented copies in feature space than clean
//! inputs do, and augmentation should shrink an adversarial perturbation's
//! first-order effect on the features below that of the raw perturbation
//! while keeping it above that of budget-matched noise.

use std::collections::HashMap;

use ndt::{Graph64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{check_budget, pgd_on, AttackBudget};
use crate::augment::{neighbor_rng, sample_augmentation, Augmentation, AugmentationSpec};
use crate::data::{LabeledImages, ResultTable};
use crate::models::{argmax_rows, ModelBundle};
use crate::{Error, Result};

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPair {
    /// `||f(x) - f(W x)||^2`.
    pub clean_gap: f64,
    /// Same `W`, applied to the adversarial input.
    pub adv_gap: f64,
    /// The attack changed the SSL prediction.
    pub attack_succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub pairs: Vec<GapPair>,
    /// Means over pairs whose attack succeeded.
    pub mean_clean_gap: f64,
    pub mean_adv_gap: f64,
    pub ratio: f64,
    /// Fraction of those pairs with `adv_gap > clean_gap`.
    pub dominance: f64,
    /// Samples whose attack failed; excluded from the summary.
    pub skipped: usize,
}

impl GapReport {
    pub fn from_pairs(pairs: Vec<GapPair>) -> Self {
        let used: Vec<&GapPair> = pairs.iter().filter(|p| p.attack_succeeded).collect();
        let n = used.len() as f64;
        let mean_clean_gap = used.iter().map(|p| p.clean_gap).sum::<f64>() / n;
        let mean_adv_gap = used.iter().map(|p| p.adv_gap).sum::<f64>() / n;
        let dominance = used.iter().filter(|p| p.adv_gap > p.clean_gap).count() as f64 / n;
        Self {
            skipped: pairs.len() - used.len(),
            mean_clean_gap,
            mean_adv_gap,
            ratio: mean_adv_gap / mean_clean_gap,
            dominance,
            pairs,
        }
    }

    pub fn table(&self) -> ResultTable {
        let mut t = ResultTable::new("feature_gap", &["sample", "clean_gap", "adv_gap", "attack_succeeded"]);
        for (i, p) in self.pairs.iter().enumerate() {
            t.push(vec![
                i.to_string(),
                format!("{:.9}", p.clean_gap),
                format!("{:.9}", p.adv_gap),
                p.attack_succeeded.to_string(),
            ]);
        }
        t
    }
}

fn ssl_logits(bundle: &ModelBundle) -> impl Fn(&mut Graph64, Var) -> Result<Var> + '_ {
    move |g: &mut Graph64, x: Var| bundle.ssl_logits(g, x)
}

/// Untargeted PGD against the SSL classifier `g(f(x))`, in chunks.
pub fn ssl_pgd(set: &LabeledImages, bundle: &ModelBundle, budget: &AttackBudget) -> Result<Tensor64> {
    let f = ssl_logits(bundle);
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut parts = Vec::new();
    for (c, chunk) in idx.chunks(CHUNK).enumerate() {
        let b = AttackBudget {
            seed: budget.seed.wrapping_add(c as u64),
            ..*budget
        };
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        parts.push(pgd_on(&f, &set.batch(chunk), &labels, &b)?.x_adv);
    }
    let x_adv = Tensor64::stack(&parts)?;
    check_budget(&x_adv, &set.images, budget.eps)?;
    Ok(x_adv)
}

fn ssl_labels(bundle: &ModelBundle, x: &Tensor64) -> Result<Vec<usize>> {
    let mut g = Graph64::new();
    let xv = g.input("x", x.clone(), false);
    let logits = bundle.ssl_logits(&mut g, xv)?;
    Ok(argmax_rows(g.value(logits)))
}

fn draw(policy: &[AugmentationSpec], shape: [usize; 3], seed: u64, i: usize) -> Result<Augmentation> {
    sample_augmentation(policy, shape, &mut neighbor_rng(seed, i))
}

fn sq_dist_rows(a: &Tensor64, b: &Tensor64) -> Vec<f64> {
    let d = a.shape()[1];
    a.data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(r, s)| r.iter().zip(s).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect()
}

/// Gap pairs for given clean and adversarial batches; sample `i` uses the
/// augmentation drawn from `neighbor_rng(seed, i)` for both members.
pub fn feature_gaps(
    clean: &Tensor64,
    adv: &Tensor64,
    success: &[bool],
    bundle: &ModelBundle,
    policy: &[AugmentationSpec],
    seed: u64,
) -> Result<Vec<GapPair>> {
    let shape = bundle.input_shape();
    let n = clean.shape()[0];
    let mut pairs = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let (mut xs, mut wxs, mut advs, mut wadvs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in chunk {
            let aug = draw(policy, shape, seed, i)?;
            let x = clean.row(i);
            let xa = adv.row(i);
            wxs.push(aug.apply(&x));
            wadvs.push(aug.apply(&xa));
            xs.push(x);
            advs.push(xa);
        }
        let feats = |v: &[Tensor64]| -> Result<Tensor64> { bundle.encoder.predict_features(&Tensor64::stack(v)?) };
        let cg = sq_dist_rows(&feats(&xs)?, &feats(&wxs)?);
        let ag = sq_dist_rows(&feats(&advs)?, &feats(&wadvs)?);
        for (j, &i) in chunk.iter().enumerate() {
            pairs.push(GapPair {
                clean_gap: cg[j],
                adv_gap: ag[j],
                attack_succeeded: success[i],
            });
        }
    }
    Ok(pairs)
}

/// Attacks `set` with PGD against the SSL classifier and compares the
/// feature gaps of clean and adversarial inputs under shared augmentations.
pub fn feature_gap_check(set: &LabeledImages, bundle: &ModelBundle, policy: &[AugmentationSpec], budget: &AttackBudget, seed: u64) -> Result<GapReport> {
    if set.is_empty() {
        return Err(Error::Empty("theory sample set"));
    }
    let x_adv = ssl_pgd(set, bundle, budget)?;
    let pred = ssl_labels(bundle, &x_adv)?;
    let success: Vec<bool> = pred.iter().zip(&set.labels).map(|(p, y)| p != y).collect();
    let pairs = feature_gaps(&set.images, &x_adv, &success, bundle, policy, seed)?;
    Ok(GapReport::from_pairs(pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingSample {
    /// `||J_f(x) delta||`.
    pub adv: f64,
    /// `||J_f(x) W delta||`.
    pub aug_adv: f64,
    /// `||J_f(x) W delta_hat||` with uniform noise `delta_hat`.
    pub aug_noise: f64,
    /// Zero first norm; excluded from the fractions.
    pub degenerate: bool,
}

impl OrderingSample {
    pub fn first_holds(&self) -> bool {
        self.adv > self.aug_adv
    }

    pub fn second_holds(&self) -> bool {
        self.aug_adv > self.aug_noise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub samples: Vec<OrderingSample>,
    pub fraction_holding: f64,
    pub fraction_first: f64,
    pub fraction_second: f64,
    pub skipped: usize,
}

impl OrderingReport {
    pub fn from_samples(samples: Vec<OrderingSample>) -> Self {
        let used: Vec<&OrderingSample> = samples.iter().filter(|s| !s.degenerate).collect();
        let n = used.len() as f64;
        let frac = |p: &dyn Fn(&OrderingSample) -> bool| used.iter().filter(|s| p(s)).count() as f64 / n;
        Self {
            fraction_holding: frac(&|s| s.first_holds() && s.second_holds()),
            fraction_first: frac(&|s| s.first_holds()),
            fraction_second: frac(&|s| s.second_holds()),
            skipped: samples.len() - used.len(),
            samples,
        }
    }

    pub fn table(&self) -> ResultTable {
        let mut t = ResultTable::new("perturbation_ordering", &["sample", "adv", "aug_adv", "aug_noise", "degenerate"]);
        for (i, s) in self.samples.iter().enumerate() {
            t.push(vec![
                i.to_string(),
                format!("{:.9}", s.adv),
                format!("{:.9}", s.aug_adv),
                format!("{:.9}", s.aug_noise),
                s.degenerate.to_string(),
            ]);
        }
        t
    }
}

fn row_norms(t: &Tensor64) -> Vec<f64> {
    let d = t.numel() / t.shape()[0];
    t.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Norms of the trunk Jacobian at `x` applied to `delta`, `W delta` and
/// `W delta_hat`, one forward tape per chunk and one tangent sweep per vector.
pub fn ordering_norms(
    clean: &Tensor64,
    delta: &Tensor64,
    noise: &Tensor64,
    bundle: &ModelBundle,
    policy: &[AugmentationSpec],
    seed: u64,
) -> Result<Vec<OrderingSample>> {
    let shape = bundle.input_shape();
    let n = clean.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in idx.chunks(CHUNK) {
        let (mut xs, mut ds, mut wds, mut wns) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in chunk {
            let aug = draw(policy, shape, seed, i)?;
            let d = delta.row(i);
            wds.push(aug.apply_linear(&d));
            wns.push(aug.apply_linear(&noise.row(i)));
            ds.push(d);
            xs.push(clean.row(i));
        }
        let mut g = Graph64::new();
        let xv = g.input("x", Tensor64::stack(&xs)?, true);
        let f = bundle.encoder.features(&mut g, xv)?;
        let mut norms = Vec::with_capacity(3);
        for v in [&ds, &wds, &wns] {
            let t = g.jvp(f, &HashMap::from([("x".to_string(), Tensor64::stack(v)?)]))?;
            norms.push(row_norms(&t));
        }
        for j in 0..chunk.len() {
            out.push(OrderingSample {
                adv: norms[0][j],
                aug_adv: norms[1][j],
                aug_noise: norms[2][j],
                degenerate: norms[0][j] == 0.0,
            });
        }
    }
    Ok(out)
}

/// `delta` from PGD against the SSL classifier, `delta_hat` uniform in the
/// same L-inf ball.
pub fn perturbation_ordering_check(
    set: &LabeledImages,
    bundle: &ModelBundle,
    policy: &[AugmentationSpec],
    budget: &AttackBudget,
    seed: u64,
) -> Result<OrderingReport> {
    if set.is_empty() {
        return Err(Error::Empty("theory sample set"));
    }
    let x_adv = ssl_pgd(set, bundle, budget)?;
    let delta = x_adv.zip_map(&set.images, |a, b| a - b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let e = budget.eps;
    let noise: Vec<f64> = (0..delta.numel()).map(|_| if e > 0.0 { rng.gen_range(-e..=e) } else { 0.0 }).collect();
    let noise = Tensor64::new(delta.shape().to_vec(), noise)?;
    let samples = ordering_norms(&set.images, &delta, &noise, bundle, policy, seed)?;
    Ok(OrderingReport::from_samples(samples))
}
