//! Acceptance suite: one PASS/FAIL line per criterion on the default toy
//! configuration. Contract criteria (gradients, metrics, budgets,
//! persistence, cost accounting) fail the run; measured criteria are
//! reported with their values.

use std::sync::Arc;
use std::time::Instant;

use augdetect::attacks::{gradient_conflict_rate, least_likely_target, objective_terms_on, AdaptiveConfig, AttackBudget};
use augdetect::augment::{neighbor_rng, sample_augmentation};
use augdetect::data::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_results, Curve, LabeledImages, ResultTable,
    RunConfig, RunOutput, WriteOptions,
};
use augdetect::detector::{calibrate_thresholds, features_for_set, NeighborFeatures};
use augdetect::evaluation::{
    cost_report, evaluate, roc_auc, run_attack, run_sweep, tpr_at_fpr, AttackEnv, AttackKind, AttackSettings, EvalContext,
    EvalRow, ScoredSample, SweepKind,
};
use augdetect::models::{LayerSpec, ModelBundle, Sequential, FEATURE_DIM};
use augdetect::pipeline::{attack_settings, train_bundle, CleanEvidence, Splits};
use augdetect::theory::feature_gap_check;
use ndt::{gradient_check, GradCheckConfig, Graph64, LinearOp, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const CALIB_FPR_RANGE: (f64, f64) = (0.02, 0.08);
const CALIB_SEEDS: u64 = 5;
const MIN_AUC: f64 = 0.85;
const NEIGHBOR_GRID: [usize; 4] = [5, 10, 25, 50];
const NEIGHBOR_BAND: f64 = 0.02;
const NEIGHBOR_PLATEAU: f64 = 0.05;
const ADAPTIVE_SAMPLES: usize = 150;
const ALPHA0_MIN_AUC: f64 = 0.6;
const BUDGET_BAND: f64 = 0.03;
const CONFLICT_SAMPLES: usize = 100;
const CONFLICT_BUDGETS: [f64; 2] = [2.0 / 255.0, 128.0 / 255.0];
const THEORY_SAMPLES: usize = 200;
const GAP_RATIO: f64 = 1.5;
const LOGIT_TOL: f64 = 1e-5;
const RUNTIME_LIMIT_S: f64 = 600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Fixture {
    cfg: RunConfig,
    bundle: ModelBundle,
    calib: LabeledImages,
    test: LabeledImages,
    ev: CleanEvidence,
    setup_s: f64,
}

impl Fixture {
    fn build() -> Self {
        let t = Instant::now();
        let cfg = RunConfig::default();
        let s = Splits::generate(&cfg).expect("data");
        let (train, calib, test) = (s.train.to_images(), s.calib.to_images(), s.test.to_images());
        let bundle = train_bundle(&cfg, &train, &test).expect("training");
        let ev = CleanEvidence::compute(&cfg, &bundle, &calib, &test, cfg.augment.neighbors).expect("evidence");
        Self {
            cfg,
            bundle,
            calib,
            test,
            ev,
            setup_s: t.elapsed().as_secs_f64(),
        }
    }

    fn context(&self, attack: AttackSettings) -> EvalContext<'_> {
        self.ev.context(&self.cfg, &self.bundle, self.cfg.augment.neighbors, attack)
    }

    /// The first `n` correctly classified test inputs and their evidence.
    fn subset(&self, n: usize) -> (LabeledImages, Vec<NeighborFeatures>) {
        let n = n.min(self.ev.test.len());
        (self.ev.test.take(n), self.ev.clean[..n].to_vec())
    }

    fn settings(&self, kind: AttackKind, eps: f64, alpha: f64) -> AttackSettings {
        AttackSettings {
            eps,
            alpha,
            ..attack_settings(&self.cfg, kind)
        }
    }
}

/// Cyclic shift used as a generic linear map in the primitive checks.
struct Shift(usize);

impl LinearOp<f64> for Shift {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.0 {
            y[(i + 1) % self.0] = x[i];
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        for i in 0..self.0 {
            x[i] += y[(i + 1) % self.0];
        }
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type ScalarFn = Box<dyn Fn(&mut Graph64, Var) -> ndt::Result<Var>>;

fn c1_gradients(fx: &Fixture) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let w = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let m = random(&[4, 3], -1.0, 1.0, &mut rng);
    let o = random(&[2, 4], -1.0, 1.0, &mut rng);
    let shift: Arc<dyn LinearOp<f64>> = Arc::new(Shift(8));
    let cases: Vec<(&str, Vec<usize>, ScalarFn)> = vec![
        ("add", vec![2, 4], Box::new({ let o = o.clone(); move |g, x| { let c = g.constant(o.clone()); let y = g.add(x, c)?; let y = g.mul(y, y)?; g.sum(y) } })),
        ("sub", vec![2, 4], Box::new({ let o = o.clone(); move |g, x| { let c = g.constant(o.clone()); let y = g.sub(c, x)?; let y = g.mul(y, y)?; g.mean(y) } })),
        ("mul", vec![2, 4], Box::new(|g, x| { let y = g.mul(x, x)?; let y = g.mul(y, x)?; g.sum(y) })),
        ("neg_scale", vec![5], Box::new(|g, x| { let y = g.neg(x)?; let y = g.scale(y, 1.5)?; let y = g.add_scalar(y, 0.2)?; let y = g.mul(y, y)?; g.sum(y) })),
        ("matmul", vec![2, 4], Box::new({ let m = m.clone(); move |g, x| { let c = g.constant(m.clone()); let y = g.matmul(x, c)?; let y = g.mul(y, y)?; g.sum(y) } })),
        ("add_bias", vec![3], Box::new(|g, x| { let a = g.constant(Tensor64::full(&[2, 3], 0.5)); let y = g.add_bias(a, x)?; let y = g.mul(y, y)?; g.sum(y) })),
        ("conv2d", vec![1, 2, 5, 5], Box::new({ let w = w.clone(); move |g, x| { let wv = g.constant(w.clone()); let y = g.conv2d(x, wv, None, 1, 1)?; let y = g.mul(y, y)?; g.mean(y) } })),
        ("avg_pool2d", vec![1, 2, 4, 4], Box::new(|g, x| { let y = g.avg_pool2d(x, 2)?; let y = g.mul(y, y)?; g.sum(y) })),
        ("relu", vec![6], Box::new(|g, x| { let y = g.relu(x)?; let y = g.mul(y, x)?; g.sum(y) })),
        ("reshape_flatten", vec![2, 3], Box::new(|g, x| { let y = g.reshape(x, &[3, 2])?; let y = g.flatten(y)?; let y = g.mul(y, y)?; g.sum(y) })),
        ("l2_norm", vec![5], Box::new(|g, x| g.l2_norm(x))),
        ("row_cosine", vec![2, 4], Box::new({ let o = o.clone(); move |g, x| { let c = g.constant(o.clone()); let y = g.row_cosine(x, c)?; g.sum(y) } })),
        ("softmax_cross_entropy", vec![3, 4], Box::new(|g, x| { let y = g.softmax_cross_entropy(x, &[0, 3, 1])?; g.mean(y) })),
        ("clamp", vec![6], Box::new(|g, x| { let y = g.clamp(x, -0.5, 0.5)?; let y = g.mul(y, x)?; g.sum(y) })),
        ("map_each", vec![2, 8], Box::new({ let s = shift.clone(); move |g, x| { let y = g.map_each(x, vec![s.clone()])?; let y = g.mul(y, x)?; g.sum(y) } })),
        ("repeat_batch", vec![1, 3], Box::new(|g, x| { let y = g.repeat_batch(x, 4)?; let y = g.mul(y, y)?; g.sum(y) })),
    ];
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (name, shape, f) in &cases {
        for _ in 0..5 {
            let x = random(shape, -1.0, 1.0, &mut rng);
            let rep = gradient_check(f, &x, GradCheckConfig::with_tolerance(GRAD_TOL)).unwrap();
            worst = worst.max(rep.max_rel_error);
            if !rep.pass {
                failures.push(name.to_string());
            }
        }
    }
    // Full adaptive objective and the detector surrogate on the trained bundle.
    let bundle = &fx.bundle;
    let shape = bundle.input_shape();
    for trial in 0..3u64 {
        let augs: Vec<_> = (0..4)
            .map(|i| sample_augmentation(&fx.cfg.augment.policy, shape, &mut neighbor_rng(trial, i)).unwrap())
            .collect();
        let x = random(&[1, shape[0], shape[1], shape[2]], 0.1, 0.9, &mut rng);
        let objective = |alpha: f64, with_classifier: bool| {
            let augs = augs.clone();
            move |g: &mut Graph64, xv: Var| -> ndt::Result<Var> {
                let t = objective_terms_on(g, bundle, xv, 1, &augs, true).map_err(|_| ndt::NdtError::ZeroNorm)?;
                let r = g.scale(t.sim_r.unwrap(), -alpha)?;
                let d = g.add(t.sim_l, r)?;
                if with_classifier {
                    g.add(d, t.classifier)
                } else {
                    Ok(d)
                }
            }
        };
        let cfg = GradCheckConfig {
            max_coords: Some(96),
            ..GradCheckConfig::with_tolerance(GRAD_TOL)
        };
        for (name, rep) in [
            ("adaptive objective", gradient_check(objective(1.0, true), &x, cfg).unwrap()),
            ("detector surrogate", gradient_check(objective(1.0, false), &x, cfg).unwrap()),
        ] {
            worst = worst.max(rep.max_rel_error);
            if !rep.pass {
                failures.push(format!("{name} trial {trial}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!("worst relative error {worst:.2e} (tol {GRAD_TOL:.0e}), {secs:.1}s, failures {failures:?}"),
    )
}

fn pair_count_auc(s: &[ScoredSample]) -> f64 {
    let (mut num, mut p, mut n) = (0u128, 0u128, 0u128);
    for a in s.iter().filter(|a| a.is_adversarial) {
        p += 1;
        for b in s.iter().filter(|b| !b.is_adversarial) {
            num += if a.score > b.score { 2 } else if a.score == b.score { 1 } else { 0 };
        }
    }
    n += s.iter().filter(|b| !b.is_adversarial).count() as u128;
    num as f64 / (2 * p * n) as f64
}

fn scan_tpr(s: &[ScoredSample], cap: f64) -> f64 {
    let p = s.iter().filter(|a| a.is_adversarial).count();
    let n = s.len() - p;
    let mut best = 0.0f64;
    let mut thresholds: Vec<f64> = s.iter().map(|a| a.score).collect();
    thresholds.push(f64::INFINITY);
    for t in thresholds {
        let tp = s.iter().filter(|a| a.is_adversarial && a.score >= t).count();
        let fp = s.iter().filter(|a| !a.is_adversarial && a.score >= t).count();
        if fp as f64 / n as f64 <= cap + 1e-12 {
            best = best.max(tp as f64 / p as f64);
        }
    }
    best
}

fn c2_metrics() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for set in 0..200 {
        let n = rng.gen_range(4..120);
        let tied = set % 2 == 0;
        let mut s: Vec<ScoredSample> = (0..n)
            .map(|i| {
                let score = if tied { rng.gen_range(0..6) as f64 / 5.0 } else { rng.gen::<f64>() };
                ScoredSample::new(score, i % 3 == 0)
            })
            .collect();
        s.push(ScoredSample::new(0.5, true));
        s.push(ScoredSample::new(0.5, false));
        let auc = roc_auc(&s).unwrap().auc;
        let cap = [0.0, 0.05, 0.2, 1.0][set % 4];
        if auc != pair_count_auc(&s) || tpr_at_fpr(&s, cap).unwrap() != scan_tpr(&s, cap) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(mismatches == 0 && secs < 60.0, format!("200 score sets, {mismatches} mismatches, {secs:.2}s"))
}

fn c3_calibration(fx: &Fixture) -> Outcome {
    let cfg = &fx.cfg;
    let k = cfg.augment.neighbors;
    let mut rates = Vec::new();
    for s in 0..CALIB_SEEDS {
        let mut c = cfg.clone();
        c.seed = 1000 + s;
        c.augment.neighbor_seed = cfg.augment.neighbor_seed.wrapping_add(s);
        let splits = Splits::generate(&c).unwrap();
        let policy = &c.augment.policy;
        let calib = features_for_set(&fx.bundle, &splits.calib.to_images(), policy, k, c.augment.neighbor_seed).unwrap();
        let held = features_for_set(&fx.bundle, &splits.test.to_images(), policy, k, c.augment.neighbor_seed).unwrap();
        let th = calibrate_thresholds(&calib, k, cfg.detector.target_fpr).unwrap();
        rates.push(held.iter().filter(|f| th.rejects(f)).count() as f64 / held.len() as f64);
    }
    let pass = rates.iter().all(|r| (CALIB_FPR_RANGE.0..=CALIB_FPR_RANGE.1).contains(r));
    outcome(pass, format!("held-out FPR per seed {:?} (band [{}, {}])", round(&rates), CALIB_FPR_RANGE.0, CALIB_FPR_RANGE.1))
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn c4_separation(fx: &Fixture, start: Instant) -> (Outcome, EvalRow) {
    let s = fx.settings(AttackKind::Pgd, fx.cfg.attacks.eps, 0.0);
    let (row, _) = evaluate(&fx.context(s), &fx.settings(AttackKind::Pgd, fx.cfg.attacks.eps, 0.0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = row.auc >= MIN_AUC && row.auc >= row.auc_label && row.auc >= row.auc_rep && secs < RUNTIME_LIMIT_S;
    let o = outcome(
        pass,
        format!(
            "PGD eps {:.4}: AUC combined {:.4}, label {:.4}, rep {:.4} (min {MIN_AUC}); success {:.3}, n_adv {}; {secs:.0}s since start",
            row.eps, row.auc, row.auc_label, row.auc_rep, row.attack_success, row.n_adv
        ),
    );
    (o, row)
}

fn c5_neighbors(fx: &Fixture) -> Outcome {
    let s = fx.settings(AttackKind::Pgd, fx.cfg.attacks.eps, 0.0);
    let grid: Vec<f64> = NEIGHBOR_GRID.iter().map(|&k| k as f64).collect();
    let rows = run_sweep(SweepKind::Neighbors, &grid, &fx.context(s)).unwrap();
    let aucs: Vec<f64> = rows.iter().map(|r| r.auc).collect();
    let monotone = aucs.windows(2).all(|w| w[1] >= w[0] - NEIGHBOR_BAND);
    let plateau = aucs[3] - aucs[2] < NEIGHBOR_PLATEAU;
    outcome(
        monotone && plateau,
        format!("AUC over k {:?}: {:?} (band {NEIGHBOR_BAND}, plateau < {NEIGHBOR_PLATEAU})", NEIGHBOR_GRID, round(&aucs)),
    )
}

fn subset_context<'a>(fx: &'a Fixture, test: &'a LabeledImages, clean: &'a [NeighborFeatures], attack: AttackSettings) -> EvalContext<'a> {
    EvalContext {
        test,
        clean,
        ..fx.context(attack)
    }
}

fn c6_c7_adaptive(fx: &Fixture) -> (Outcome, Outcome) {
    let (test, clean) = fx.subset(ADAPTIVE_SAMPLES);
    let eps = fx.cfg.attacks.eps;
    let run = |eps: f64, alpha: f64| {
        let s = fx.settings(AttackKind::Adaptive, eps, alpha);
        evaluate(&subset_context(fx, &test, &clean, s.clone()), &s).unwrap().0
    };
    let a0 = run(eps, 0.0);
    let a1 = run(eps, 1.0);
    let c6 = outcome(
        a1.auc <= a0.auc && a0.auc >= ALPHA0_MIN_AUC,
        format!(
            "eps {eps:.4}, {} inputs: AUC alpha=0 {:.4} (n_adv {}), alpha=1 {:.4} (n_adv {}) (alpha=0 min {ALPHA0_MIN_AUC})",
            test.len(),
            a0.auc,
            a0.n_adv,
            a1.auc,
            a1.n_adv
        ),
    );
    let grid = fx.cfg.eval.eps_grid.clone();
    let aucs: Vec<f64> = grid.iter().map(|&e| if e == eps { a1.auc } else { run(e, 1.0).auc }).collect();
    let pass = aucs.iter().all(|a| a.is_finite()) && aucs.windows(2).all(|w| w[1] <= w[0] + BUDGET_BAND);
    let labels: Vec<String> = grid.iter().map(|e| format!("{:.0}/255", e * 255.0)).collect();
    let c7 = outcome(
        pass,
        format!("adaptive alpha=1 AUC over eps {labels:?}: {:?} (band {BUDGET_BAND}; NaN = no successful AE)", round(&aucs)),
    );
    (c6, c7)
}

fn c8_conflict(fx: &Fixture) -> Outcome {
    let bundle = &fx.bundle;
    let (set, _) = fx.subset(CONFLICT_SAMPLES);
    let logits = bundle.classifier.predict_logits(&set.images).unwrap();
    let c = bundle.num_classes();
    let mut rates = Vec::new();
    for eps in CONFLICT_BUDGETS {
        let cfg = AdaptiveConfig {
            alpha: 1.0,
            k_eot: fx.cfg.attacks.k_eot,
            budget: AttackBudget {
                seed: fx.cfg.attacks.seed,
                step_size: eps * fx.cfg.attacks.step_fraction,
                ..AttackBudget::new(eps, fx.cfg.attacks.steps)
            },
            policy: fx.cfg.augment.policy.clone(),
        };
        let mut total = 0.0;
        for i in 0..set.len() {
            let y = set.labels[i];
            let t = least_likely_target(&logits.data()[i * c..(i + 1) * c], y);
            total += gradient_conflict_rate(&set.image(i), y, t, bundle, &cfg, i as u64).unwrap();
        }
        rates.push(total / set.len() as f64);
    }
    outcome(
        rates[0] > rates[1],
        format!("mean conflict rate at 2/255 {:.4}, at 128/255 {:.4} over {} inputs", rates[0], rates[1], set.len()),
    )
}

fn c9_theory(fx: &Fixture) -> Outcome {
    let a = &fx.cfg.attacks;
    let budget = AttackBudget {
        eps: a.eps,
        steps: a.steps,
        step_size: a.eps * a.step_fraction,
        random_start: true,
        seed: a.seed,
    };
    let set = fx.test.take(THEORY_SAMPLES);
    let r = feature_gap_check(&set, &fx.bundle, &fx.cfg.augment.policy, &budget, fx.cfg.augment.neighbor_seed).unwrap();
    let used = r.pairs.len() - r.skipped;
    outcome(
        r.mean_adv_gap > r.mean_clean_gap && r.ratio > GAP_RATIO,
        format!(
            "eps {:.4}, {} samples ({used} successful): mean gap clean {:.5}, adversarial {:.5}, ratio {:.3} (min {GAP_RATIO})",
            a.eps,
            set.len(),
            r.mean_clean_gap,
            r.mean_adv_gap,
            r.ratio
        ),
    )
}

fn c10_budgets(fx: &Fixture) -> Outcome {
    let (set, _) = fx.subset(20);
    let th = calibrate_thresholds(&fx.ev.calib, fx.cfg.augment.neighbors, fx.cfg.detector.target_fpr).unwrap();
    let env = AttackEnv {
        bundle: &fx.bundle,
        policy: &fx.cfg.augment.policy,
        thresholds: Some(&th),
        neighbor_seed: fx.cfg.augment.neighbor_seed,
    };
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut eps_list = fx.cfg.eval.eps_grid.clone();
    eps_list.push(0.0);
    for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Adaptive, AttackKind::Orthogonal, AttackKind::Selection] {
        for &eps in &eps_list {
            let detector_aware = matches!(kind, AttackKind::Orthogonal | AttackKind::Selection);
            if detector_aware && eps != fx.cfg.attacks.eps {
                continue;
            }
            if eps == 0.0 && kind != AttackKind::Fgsm {
                continue;
            }
            let out = run_attack(&set, &env, &fx.settings(kind, eps, 1.0)).unwrap();
            for (a, x) in out.images.images.data().iter().zip(set.images.data()) {
                checked += 1;
                if (a - x).abs() > eps + 1e-9 || !(0.0..=1.0).contains(a) {
                    violations += 1;
                }
            }
        }
    }
    outcome(violations == 0, format!("{checked} coordinates over fgsm/pgd/adaptive/orthogonal/selection, {violations} violations"))
}

fn c11_persistence(fx: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let splits = Splits::generate(&fx.cfg).unwrap();
    let p = dir.path().join("calib.bynd");
    save_dataset(&p, &splits.calib).unwrap();
    let bytes_ok = load_dataset(&p).unwrap() == splits.calib && std::fs::read(&p).unwrap() == splits.calib.to_bytes();
    notes.push(format!("dataset byte-exact {bytes_ok}"));

    let cp = dir.path().join("bundle.ckpt");
    save_checkpoint(&cp, &fx.bundle, fx.cfg.seed, serde_json::to_value(&fx.cfg).unwrap()).unwrap();
    let (back, _) = load_checkpoint::<ModelBundle>(&cp).unwrap();
    let probe = fx.test.take(32).images;
    let d1 = fx.bundle.classifier.predict_logits(&probe).unwrap().max_abs_diff(&back.classifier.predict_logits(&probe).unwrap());
    let ssl = |b: &ModelBundle| {
        let mut g = Graph64::new();
        let x = g.input("x", probe.clone(), false);
        let l = b.ssl_logits(&mut g, x).unwrap();
        g.value(l).clone()
    };
    let d2 = ssl(&fx.bundle).max_abs_diff(&ssl(&back));
    notes.push(format!("checkpoint max logit diff {:.2e}", d1.max(d2)));

    let runs = dir.path().join("runs");
    let mut table = ResultTable::new("t", &["a"]);
    table.push(vec!["1".into()]);
    let out = RunOutput {
        tables: vec![table.clone(), table],
        curves: vec![Curve {
            name: "c".into(),
            points: vec![(0.0, 0.0, f64::INFINITY), (1.0, 1.0, 0.0)],
        }],
        ..Default::default()
    };
    let crashed = write_results(&runs, "r", &out, WriteOptions { fail_after_files: Some(2), ..Default::default() }).is_err();
    let leftovers = std::fs::read_dir(&runs).map(|d| d.count()).unwrap_or(0);
    write_results(&runs, "r", &out, WriteOptions::default()).unwrap();
    let before = std::fs::read(runs.join("r").join("summary.json")).unwrap();
    let crashed_force = write_results(&runs, "r", &out, WriteOptions { force: true, fail_after_files: Some(1) }).is_err();
    let intact = std::fs::read(runs.join("r").join("summary.json")).unwrap() == before
        && std::fs::read_dir(&runs).unwrap().count() == 1;
    notes.push(format!("crash leaves {leftovers} entries, forced crash keeps previous run {intact}"));
    outcome(bytes_ok && d1.max(d2) < LOGIT_TOL && crashed && leftovers == 0 && crashed_force && intact, notes.join(", "))
}

/// Closed-form parameter count of a layer stack.
fn count_params(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => kernel * kernel * in_ch * out_ch + out_ch,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        })
        .sum()
}

/// FLOPs as twice the multiply-accumulates executed by a real forward pass.
fn executed_flops(net: &Sequential, input: &[usize]) -> u64 {
    let mut shape = vec![1];
    shape.extend_from_slice(input);
    let mut g = Graph64::new();
    let x = g.input("x", Tensor64::full(&shape, 0.5), false);
    net.forward(&mut g, x, augdetect::models::Params::Frozen).unwrap();
    2 * g.macs()
}

fn c12_cost(fx: &Fixture) -> Outcome {
    let b = &fx.bundle;
    let input = b.input_shape();
    let nets: [(&Sequential, Vec<usize>); 4] = [
        (&b.classifier.net, input.to_vec()),
        (&b.encoder.trunk, input.to_vec()),
        (&b.encoder.projector, vec![FEATURE_DIM]),
        (&b.head.layer, vec![FEATURE_DIM]),
    ];
    let params: usize = nets.iter().map(|(n, _)| count_params(&n.layers)).sum();
    let stored: usize = nets.iter().map(|(n, _)| n.params.iter().map(|p| p.data().len()).sum::<usize>()).sum();
    let flops: u64 = nets.iter().map(|(n, s)| executed_flops(n, s)).sum();
    let r = cost_report(b, &fx.test.take(4), &fx.cfg.augment.policy, 10, fx.cfg.augment.neighbor_seed).unwrap();
    outcome(
        r.params == params && r.params == stored && r.flops == flops,
        format!("params {} (oracle {params}, stored {stored}), flops {} (oracle {flops})", r.params, r.flops),
    )
}

fn main() {
    // Invoked by `cargo test` with harness flags; filters other than the
    // target name skip the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let start = Instant::now();
    let mut results: Vec<(u32, &str, bool, Outcome)> = Vec::new();
    let c2 = c2_metrics();
    results.push((2, "metric oracle equivalence", true, c2));
    let fx = Fixture::build();
    println!(
        "fixture: {:.0}s, classifier test acc {:.3}, head test acc {:.3}, {} correctly classified test inputs",
        fx.setup_s,
        fx.bundle.classifier.record.test_accuracy.unwrap_or(f64::NAN),
        fx.bundle.head.record.test_accuracy.unwrap_or(f64::NAN),
        fx.ev.test.len()
    );
    results.push((1, "gradient soundness", true, c1_gradients(&fx)));
    let (c4, _) = c4_separation(&fx, start);
    results.push((4, "detection separation", false, c4));
    results.push((3, "calibration contract", false, c3_calibration(&fx)));
    results.push((5, "neighbor sweep", false, c5_neighbors(&fx)));
    let (c6, c7) = c6_c7_adaptive(&fx);
    results.push((6, "adaptive ordering", false, c6));
    results.push((7, "budget ordering", false, c7));
    results.push((8, "gradient-conflict trend", false, c8_conflict(&fx)));
    results.push((9, "feature-gap check", false, c9_theory(&fx)));
    results.push((10, "attack invariants", true, c10_budgets(&fx)));
    results.push((11, "persistence", true, c11_persistence(&fx)));
    results.push((12, "cost accounting", true, c12_cost(&fx)));
    results.sort_by_key(|r| r.0);
    let _ = &fx.calib;
    println!("acceptance ({:.0}s)", start.elapsed().as_secs_f64());
    for (n, name, _, o) in &results {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let broken: Vec<u32> = results.iter().filter(|r| r.2 && !r.3.pass).map(|r| r.0).collect();
    if !broken.is_empty() {
        eprintln!("contract criteria failed: {broken:?}");
        std::process::exit(1);
    }
}
