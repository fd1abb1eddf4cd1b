//! L-inf attacks: FGSM, PGD, the augmentation-aware adaptive attack with
//! expectation over transformations, and a simplified Orthogonal-PGD.

use ndt::{Graph64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_in_graph, neighbor_rng, sample_augmentation, Augmentation, AugmentationSpec};
use crate::detector::{detect, DetectorThresholds, Verdict};
use crate::models::{argmax_rows, ClassifierNet, ModelBundle, Params};
use crate::{Error, Result};

/// Slack allowed on the L-inf budget check.
pub const BUDGET_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Uniform start inside the ball (PGD-style); off gives a zero start.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackBudget {
    /// `steps` iterations of size `eps / 4` from a random start.
    pub fn new(eps: f64, steps: usize) -> Self {
        Self {
            eps,
            steps,
            step_size: eps / 4.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) || self.step_size < 0.0 || self.step_size > self.eps + BUDGET_SLACK {
            return Err(Error::Config(format!(
                "attack budget needs eps >= 0 and 0 <= step_size <= eps (eps {}, step {})",
                self.eps, self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        Ok(())
    }
}

/// Largest absolute coordinate difference.
pub fn linf(a: &Tensor64, b: &Tensor64) -> f64 {
    a.max_abs_diff(b)
}

/// Checks `||x_adv - x||_inf <= eps` and `x_adv` in `[0, 1]`.
pub fn check_budget(x_adv: &Tensor64, x: &Tensor64, eps: f64) -> Result<()> {
    let d = linf(x_adv, x);
    if d > eps + BUDGET_SLACK || x_adv.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::BudgetViolation { linf: d, eps });
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Coordinate-wise projection onto the ball around `x0`, then onto `[0, 1]`.
pub fn project(x: &Tensor64, x0: &Tensor64, eps: f64) -> Tensor64 {
    x.zip_map(x0, |v, o| v.clamp(o - eps, o + eps).clamp(0.0, 1.0))
}

/// `proj(clamp(x + dir * a * sign(g)))`, with `dir = 1` ascending and `-1` descending.
fn sign_step(x: &Tensor64, x0: &Tensor64, g: &Tensor64, a: f64, dir: f64, eps: f64) -> Tensor64 {
    let moved = x.zip_map(g, |v, gv| (v + dir * a * sign(gv)).clamp(0.0, 1.0));
    project(&moved, x0, eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub x_adv: Tensor64,
    /// Per sample: the input gradient was zero at every step.
    pub null_gradient: Vec<bool>,
}

/// Gradient of the summed cross-entropy of `classifier` w.r.t. a batch.
pub fn classifier_loss_gradient(classifier: &ClassifierNet, x: &Tensor64, labels: &[usize]) -> Result<Tensor64> {
    loss_gradient(&|g: &mut Graph64, xv: Var| classifier.logits(g, xv), x, labels)
}

/// Gradient of the summed cross-entropy of any logits function w.r.t. a batch.
pub fn loss_gradient<F>(logits_fn: &F, x: &Tensor64, labels: &[usize]) -> Result<Tensor64>
where
    F: Fn(&mut Graph64, Var) -> Result<Var>,
{
    let mut g = Graph64::new();
    let xv = g.input("x", x.clone(), true);
    let logits = logits_fn(&mut g, xv)?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let loss = g.sum(ce)?;
    Ok(g.backward(loss)?.grad("x").clone())
}

fn zero_rows(g: &Tensor64) -> Vec<bool> {
    let n = g.shape()[0];
    let per = g.numel() / n;
    g.data().chunks(per).map(|r| r.iter().all(|&v| v == 0.0)).collect()
}

/// `clamp(x + eps * sign(grad_x CE(c(x), y)))` for a batch.
pub fn fgsm(x: &Tensor64, y: &[usize], classifier: &ClassifierNet, eps: f64) -> Result<AttackOutput> {
    let g = classifier_loss_gradient(classifier, x, y)?;
    let x_adv = sign_step(x, x, &g, eps, 1.0, eps);
    check_budget(&x_adv, x, eps)?;
    Ok(AttackOutput {
        x_adv,
        null_gradient: zero_rows(&g),
    })
}

fn random_start(x: &Tensor64, budget: &AttackBudget, rng: &mut impl Rng) -> Tensor64 {
    if !budget.random_start || budget.eps == 0.0 {
        return x.clone();
    }
    let e = budget.eps;
    let noise: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-e..=e)).collect();
    let noisy = Tensor64::new(x.shape().to_vec(), noise).expect("same shape");
    project(&x.zip_map(&noisy, |a, b| a + b), x, e)
}

/// Untargeted PGD on the classifier cross-entropy for a batch.
pub fn pgd(x: &Tensor64, y: &[usize], classifier: &ClassifierNet, budget: &AttackBudget) -> Result<AttackOutput> {
    pgd_on(&|g: &mut Graph64, xv: Var| classifier.logits(g, xv), x, y, budget)
}

/// Untargeted PGD against any differentiable logits function.
pub fn pgd_on<F>(logits_fn: &F, x: &Tensor64, y: &[usize], budget: &AttackBudget) -> Result<AttackOutput>
where
    F: Fn(&mut Graph64, Var) -> Result<Var>,
{
    budget.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut cur = random_start(x, budget, &mut rng);
    let mut null = vec![true; x.shape()[0]];
    for _ in 0..budget.steps {
        let g = loss_gradient(logits_fn, &cur, y)?;
        for (n, z) in null.iter_mut().zip(zero_rows(&g)) {
            *n &= z;
        }
        cur = sign_step(&cur, x, &g, budget.step_size, 1.0, budget.eps);
    }
    check_budget(&cur, x, budget.eps)?;
    Ok(AttackOutput {
        x_adv: cur,
        null_gradient: null,
    })
}

/// Least-likely class under the clean logits, skipping the true label.
pub fn least_likely_target(logits: &[f64], true_label: usize) -> usize {
    let mut best: Option<usize> = None;
    for (j, &v) in logits.iter().enumerate() {
        if j != true_label && best.is_none_or(|b| v < logits[b]) {
            best = Some(j);
        }
    }
    best.unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Weight of the representation-similarity term.
    pub alpha: f64,
    /// Augmentation draws per step.
    pub k_eot: usize,
    pub budget: AttackBudget,
    pub policy: Vec<AugmentationSpec>,
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.alpha < 0.0 || !self.alpha.is_finite() || self.k_eot == 0 {
            return Err(Error::Config("adaptive attack needs alpha >= 0 and k_eot >= 1".into()));
        }
        if self.policy.is_empty() {
            return Err(Error::EmptyPolicy);
        }
        if let Some(bad) = self.policy.iter().find(|s| !s.differentiable()) {
            return Err(Error::NonDifferentiable(bad.name().into()));
        }
        Ok(())
    }
}

/// Scalar terms of the adaptive objective on one tape.
pub struct ObjectiveTerms {
    pub x: Var,
    /// Classifier logits `[1, classes]`.
    pub logits: Var,
    /// `CE(c(x), y_t)`.
    pub classifier: Var,
    /// Mean over draws of `CE(g(f(clamp(W_i x))), y_t)`.
    pub sim_l: Var,
    /// Mean over draws of `cos(h(f(clamp(W_i x))), h(f(x)))`; absent when not requested.
    pub sim_r: Option<Var>,
}

/// Records the adaptive-attack terms for a single image `[1, c, h, w]`.
pub fn objective_terms(
    g: &mut Graph64,
    bundle: &ModelBundle,
    x: &Tensor64,
    target: usize,
    augs: &[Augmentation],
    with_sim_r: bool,
) -> Result<ObjectiveTerms> {
    let xv = g.input("x", x.clone(), true);
    objective_terms_on(g, bundle, xv, target, augs, with_sim_r)
}

/// [`objective_terms`] for an input already on the tape.
pub fn objective_terms_on(
    g: &mut Graph64,
    bundle: &ModelBundle,
    xv: Var,
    target: usize,
    augs: &[Augmentation],
    with_sim_r: bool,
) -> Result<ObjectiveTerms> {
    let logits = bundle.classifier.logits(g, xv)?;
    let ce = g.softmax_cross_entropy(logits, &[target])?;
    let classifier = g.sum(ce)?;
    let views = augment_in_graph(g, xv, augs)?;
    let f_views = bundle.encoder.features(g, views)?;
    let head = bundle.head.logits(g, f_views)?;
    let ce_l = g.softmax_cross_entropy(head, &vec![target; augs.len()])?;
    let sim_l = g.mean(ce_l)?;
    let sim_r = if with_sim_r {
        let z_views = bundle.encoder.projector.forward(g, f_views, Params::Frozen)?;
        let z_x = bundle.encoder.embed(g, xv)?;
        let z_rep = g.repeat_batch(z_x, augs.len())?;
        let cos = g.row_cosine(z_views, z_rep)?;
        Some(g.mean(cos)?)
    } else {
        None
    };
    Ok(ObjectiveTerms {
        x: xv,
        logits,
        classifier,
        sim_l,
        sim_r,
    })
}

fn draw_augs(policy: &[AugmentationSpec], shape: [usize; 3], k: usize, rng: &mut impl Rng) -> Result<Vec<Augmentation>> {
    (0..k).map(|_| sample_augmentation(policy, shape, rng)).collect()
}

fn image_shape(x: &Tensor64) -> [usize; 3] {
    let s = x.shape();
    [s[1], s[2], s[3]]
}

/// Gradient of `L_C + Sim_l - alpha Sim_r` at `x` for one set of draws.
pub fn adaptive_gradient(bundle: &ModelBundle, x: &Tensor64, target: usize, augs: &[Augmentation], alpha: f64) -> Result<Tensor64> {
    let mut g = Graph64::new();
    let t = objective_terms(&mut g, bundle, x, target, augs, alpha != 0.0)?;
    let mut obj = g.add(t.classifier, t.sim_l)?;
    if let Some(r) = t.sim_r {
        let w = g.scale(r, -alpha)?;
        obj = g.add(obj, w)?;
    }
    Ok(g.backward(obj)?.grad("x").clone())
}

/// EOT estimate of the label-consistency term's gradient from `k_eot` fresh draws.
pub fn sim_l_gradient(
    bundle: &ModelBundle,
    x: &Tensor64,
    target: usize,
    policy: &[AugmentationSpec],
    k_eot: usize,
    rng: &mut impl Rng,
) -> Result<Tensor64> {
    let augs = draw_augs(policy, image_shape(x), k_eot, rng)?;
    let mut g = Graph64::new();
    let t = objective_terms(&mut g, bundle, x, target, &augs, false)?;
    Ok(g.backward(t.sim_l)?.grad("x").clone())
}

fn check_target(target: usize, true_label: usize) -> Result<()> {
    if target == true_label {
        return Err(Error::TargetIsTrueLabel(true_label));
    }
    Ok(())
}

/// Targeted PGD descending `CE(c(x), y_t) + Sim_l - alpha Sim_r` with fresh
/// augmentation draws every step. `stream` separates the random streams of
/// different samples under one seed.
pub fn adaptive_attack(
    x: &Tensor64,
    true_label: usize,
    target: usize,
    bundle: &ModelBundle,
    cfg: &AdaptiveConfig,
    stream: u64,
) -> Result<Tensor64> {
    cfg.validate()?;
    check_target(target, true_label)?;
    let b = &cfg.budget;
    let mut rng = neighbor_rng(b.seed, stream as usize);
    let mut cur = random_start(x, b, &mut rng);
    for _ in 0..b.steps {
        let augs = draw_augs(&cfg.policy, image_shape(x), cfg.k_eot, &mut rng)?;
        let g = adaptive_gradient(bundle, &cur, target, &augs, cfg.alpha)?;
        cur = sign_step(&cur, x, &g, b.step_size, -1.0, b.eps);
    }
    check_budget(&cur, x, b.eps)?;
    Ok(cur)
}

/// Fraction of coordinates where both signs are nonzero and opposite.
pub fn conflict_rate(g1: &Tensor64, g2: &Tensor64) -> f64 {
    let n = g1.numel();
    let c = g1
        .data()
        .iter()
        .zip(g2.data())
        .filter(|(&a, &b)| {
            let (sa, sb) = (sign(a), sign(b));
            sa != 0.0 && sb != 0.0 && sa == -sb
        })
        .count();
    c as f64 / n as f64
}

/// Mean conflict rate between the gradients of the `Sim_l` term and the
/// `-alpha Sim_r` term along an adaptive-attack trajectory of the given
/// budget, step size and random start.
pub fn gradient_conflict_rate(
    x: &Tensor64,
    true_label: usize,
    target: usize,
    bundle: &ModelBundle,
    cfg: &AdaptiveConfig,
    stream: u64,
) -> Result<f64> {
    cfg.validate()?;
    check_target(target, true_label)?;
    let b = &cfg.budget;
    let mut rng = neighbor_rng(b.seed, stream as usize);
    let mut cur = random_start(x, b, &mut rng);
    let (mut total, mut used) = (0.0, 0);
    for _ in 0..b.steps {
        let augs = draw_augs(&cfg.policy, image_shape(x), cfg.k_eot, &mut rng)?;
        let mut g = Graph64::new();
        let t = objective_terms(&mut g, bundle, &cur, target, &augs, true)?;
        let gl = g.backward(t.sim_l)?.grad("x").clone();
        let r = t.sim_r.expect("requested");
        let wr = g.scale(r, -cfg.alpha)?;
        let gr = g.backward(wr)?.grad("x").clone();
        if gl.max_abs() > 0.0 && gr.max_abs() > 0.0 {
            total += conflict_rate(&gl, &gr);
            used += 1;
        }
        let mut obj = g.add(t.classifier, t.sim_l)?;
        obj = g.add(obj, wr)?;
        let step = g.backward(obj)?.grad("x").clone();
        cur = sign_step(&cur, x, &step, b.step_size, -1.0, b.eps);
    }
    if used == 0 {
        return Err(Error::DegeneratePoint);
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthogonalStrategy {
    Orthogonal,
    Selection,
}

impl std::str::FromStr for OrthogonalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "selection" => Ok(Self::Selection),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (orthogonal, selection)"))),
        }
    }
}

/// `a` with its component along `b` removed; `a` itself when `b` is zero.
pub fn orthogonal_direction(a: &Tensor64, b: &Tensor64) -> Tensor64 {
    let bb = b.dot(b);
    if bb == 0.0 {
        return a.clone();
    }
    let c = a.dot(b) / bb;
    a.zip_map(b, |u, v| u - c * v)
}

/// Gradients of the targeted classifier loss and of the differentiable
/// detector surrogate `Sim_l - Sim_r` at `x`, plus the current classifier label.
fn orthogonal_gradients(bundle: &ModelBundle, x: &Tensor64, target: usize, augs: &[Augmentation]) -> Result<(Tensor64, Tensor64, usize)> {
    let mut g = Graph64::new();
    let t = objective_terms(&mut g, bundle, x, target, augs, true)?;
    let gc = g.backward(t.classifier)?.grad("x").clone();
    let r = t.sim_r.expect("requested");
    let d = g.sub(t.sim_l, r)?;
    let gd = g.backward(d)?.grad("x").clone();
    Ok((gc, gd, argmax_rows(g.value(t.logits))[0]))
}

/// Detector-aware targeted attack. The orthogonal strategy steps on the
/// classifier gradient with its detector-gradient component removed while
/// the target is not reached, and on the detector gradient with its
/// classifier component removed afterwards. The selection strategy steps on
/// the classifier loss until the target is reached and on the detector
/// surrogate while the calibrated detector still rejects.
#[allow(clippy::too_many_arguments)]
pub fn orthogonal_pgd(
    x: &Tensor64,
    true_label: usize,
    target: usize,
    bundle: &ModelBundle,
    thresholds: &DetectorThresholds,
    detector_policy: &[AugmentationSpec],
    neighbor_seed: u64,
    cfg: &AdaptiveConfig,
    strategy: OrthogonalStrategy,
    stream: u64,
) -> Result<Tensor64> {
    cfg.validate()?;
    check_target(target, true_label)?;
    let b = &cfg.budget;
    let mut rng = neighbor_rng(b.seed, stream as usize);
    let mut cur = random_start(x, b, &mut rng);
    for _ in 0..b.steps {
        let augs = draw_augs(&cfg.policy, image_shape(x), cfg.k_eot, &mut rng)?;
        let (gc, gd, label) = orthogonal_gradients(bundle, &cur, target, &augs)?;
        let fooled = label == target;
        let dir = match strategy {
            OrthogonalStrategy::Orthogonal => {
                if fooled {
                    orthogonal_direction(&gd, &gc)
                } else {
                    orthogonal_direction(&gc, &gd)
                }
            }
            OrthogonalStrategy::Selection => {
                if !fooled {
                    gc
                } else if detect(&cur, bundle, thresholds, detector_policy, thresholds.k, neighbor_seed)?.verdict == Verdict::Reject {
                    gd
                } else {
                    break;
                }
            }
        };
        cur = sign_step(&cur, x, &dir, b.step_size, -1.0, b.eps);
    }
    check_budget(&cur, x, b.eps)?;
    Ok(cur)
}
