use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use augdetect::attacks::AttackBudget;
use augdetect::data::{
    load_checkpoint, load_dataset, parse_eps, save_checkpoint, save_dataset, write_atomic, write_results, DatasetContainer,
    LabeledImages, ResultTable, RunConfig, RunOutput, WriteOptions,
};
use augdetect::detector::{calibrate_thresholds, detect, features_for_set, DetectorThresholds, Verdict};
use augdetect::evaluation::{
    cost_report, evaluate, roc_auc, rows_table, run_attack, run_sweep, AttackEnv, AttackKind, ScoredSample, SweepKind,
};
use augdetect::models::{train_class_head, train_classifier, train_ssl, ClassHead, ClassifierNet, ModelBundle, SslEncoder};
use augdetect::pipeline::{attack_settings, correctly_classified, CleanEvidence, Splits};
use augdetect::theory::{feature_gap_check, perturbation_ordering_check};
use augdetect::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{AttackArgs, Cli, Command, DetectArgs, TrainArgs};

/// Artifact locations under the output root.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.bynd"))
    }

    fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    fn thresholds(&self) -> PathBuf {
        self.root.join("thresholds.json")
    }

    fn adversarial(&self, kind: &str) -> PathBuf {
        self.root.join("adv").join(format!("{kind}.bynd"))
    }

    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

#[derive(Serialize, Deserialize)]
struct ThresholdsFile {
    thresholds: DetectorThresholds,
    config: RunConfig,
}

pub fn log_error(out: &Path, line: &str) {
    if fs::create_dir_all(out).is_ok() {
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(out.join("error.log")) {
            let _ = writeln!(f, "{line}");
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if cli.run_id.is_some() {
        cfg.run_id = cli.run_id.clone();
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut augdetect::models::TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
}

fn apply_detect(cfg: &mut RunConfig, a: &DetectArgs) {
    if let Some(k) = a.k {
        cfg.augment.neighbors = k;
    }
    if let Some(t) = a.target_fpr {
        cfg.detector.target_fpr = t;
    }
}

fn apply_attack(cfg: &mut RunConfig, a: &AttackArgs) -> Result<()> {
    if let Some(k) = &a.kind {
        cfg.attacks.kind = k.clone();
    }
    if let Some(e) = &a.eps {
        cfg.attacks.eps = parse_eps(e)?;
    }
    if let Some(s) = a.steps {
        cfg.attacks.steps = s;
    }
    if let Some(v) = a.alpha {
        cfg.attacks.alpha = v;
    }
    if let Some(v) = a.k_eot {
        cfg.attacks.k_eot = v;
    }
    apply_detect(cfg, &a.detect);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    write_atomic(path, &serde_json::to_vec_pretty(v)?)
}

/// `n/255` when the budget is a whole number of intensity levels.
fn eps_label(eps: f64) -> String {
    let n = eps * 255.0;
    if (n - n.round()).abs() < 1e-9 {
        format!("{}/255", n.round())
    } else {
        format!("{eps}")
    }
}

fn load_split(layout: &Layout, split: &str) -> Result<LabeledImages> {
    Ok(load_dataset(&layout.data(split))?.to_images())
}

fn load_bundle(layout: &Layout) -> Result<ModelBundle> {
    let (classifier, _) = load_checkpoint::<ClassifierNet>(&layout.model("classifier"))?;
    let (encoder, _) = load_checkpoint::<SslEncoder>(&layout.model("encoder"))?;
    let (head, _) = load_checkpoint::<ClassHead>(&layout.model("head"))?;
    Ok(ModelBundle { classifier, encoder, head })
}

fn load_thresholds(layout: &Layout) -> Result<DetectorThresholds> {
    let text = fs::read_to_string(layout.thresholds())?;
    let f: ThresholdsFile = serde_json::from_str(&text)?;
    Ok(f.thresholds)
}

fn save_run(cli: &Cli, layout: &Layout, cfg: &RunConfig, default_id: &str, mut out: RunOutput) -> Result<()> {
    let id = cfg.run_id.clone().unwrap_or_else(|| default_id.to_string());
    out.config = Some(to_json(cfg));
    let dir = write_results(&layout.runs(), &id, &out, WriteOptions { force: cli.force, ..Default::default() })?;
    println!("results: {}", dir.display());
    Ok(())
}

fn attack_inputs(bundle: &ModelBundle, test: &LabeledImages, limit: Option<usize>) -> Result<LabeledImages> {
    let correct = correctly_classified(bundle, test)?;
    Ok(match limit {
        Some(n) => correct.take(n),
        None => correct,
    })
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let layout = Layout { root: cli.out.clone() };
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.data;
            d.classes = a.classes.unwrap_or(d.classes);
            if let Some(s) = a.size {
                d.height = s;
                d.width = s;
            }
            d.train_per_class = a.train_per_class.unwrap_or(d.train_per_class);
            d.calib_per_class = a.calib_per_class.unwrap_or(d.calib_per_class);
            d.test_per_class = a.test_per_class.unwrap_or(d.test_per_class);
            cfg.validate()?;
            let s = Splits::generate(&cfg)?;
            for (name, c) in [("train", &s.train), ("calib", &s.calib), ("test", &s.test)] {
                let path = layout.data(name);
                fs::create_dir_all(path.parent().expect("has parent"))?;
                save_dataset(&path, c)?;
                println!("{name}: {} images -> {}", c.header.count, path.display());
            }
            write_json(&layout.root.join("data").join("config.json"), &cfg)
        }
        Command::TrainClf(a) => {
            apply_train(&mut cfg.models.classifier, a);
            cfg.validate()?;
            let (train, test) = (load_split(&layout, "train")?, load_split(&layout, "test")?);
            let net = train_classifier(&train, &test, &cfg.models.classifier)?;
            fs::create_dir_all(layout.root.join("models"))?;
            save_checkpoint(&layout.model("classifier"), &net, cfg.seed, to_json(&cfg))?;
            println!(
                "classifier: train accuracy {:.4}, test accuracy {:.4}",
                net.record.train_accuracy.unwrap_or(f64::NAN),
                net.record.test_accuracy.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::TrainSsl(a) => {
            apply_train(&mut cfg.models.ssl, a);
            cfg.validate()?;
            let train = load_split(&layout, "train")?;
            let enc = train_ssl(&train, &cfg.ssl())?;
            fs::create_dir_all(layout.root.join("models"))?;
            save_checkpoint(&layout.model("encoder"), &enc, cfg.seed, to_json(&cfg))?;
            println!(
                "encoder: loss {:.4} -> {:.4}",
                enc.record.initial_loss.unwrap_or(f64::NAN),
                enc.record.losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Probe(a) => {
            apply_train(&mut cfg.models.head, a);
            cfg.validate()?;
            let (train, test) = (load_split(&layout, "train")?, load_split(&layout, "test")?);
            let (enc, _) = load_checkpoint::<SslEncoder>(&layout.model("encoder"))?;
            let head = train_class_head(&enc, &train, &test, &cfg.models.head)?;
            save_checkpoint(&layout.model("head"), &head, cfg.seed, to_json(&cfg))?;
            println!(
                "head: train accuracy {:.4}, test accuracy {:.4}",
                head.record.train_accuracy.unwrap_or(f64::NAN),
                head.record.test_accuracy.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Calibrate(a) => {
            apply_detect(&mut cfg, a);
            cfg.validate()?;
            let bundle = load_bundle(&layout)?;
            let calib = load_split(&layout, "calib")?;
            let k = cfg.augment.neighbors;
            let feats = features_for_set(&bundle, &calib, &cfg.augment.policy, k, cfg.augment.neighbor_seed)?;
            let th = calibrate_thresholds(&feats, k, cfg.detector.target_fpr)?;
            println!(
                "thresholds: tau_cos {:.4}, T_label {}, T_rep {}, calibration FPR {:.4}",
                th.tau_cos, th.t_label, th.t_rep, th.calibrated_fpr
            );
            write_json(&layout.thresholds(), &ThresholdsFile { thresholds: th, config: cfg })
        }
        Command::Attack(a) => {
            apply_attack(&mut cfg, a)?;
            cfg.validate()?;
            let kind: AttackKind = cfg.attacks.kind.parse()?;
            let bundle = load_bundle(&layout)?;
            let inputs = attack_inputs(&bundle, &load_split(&layout, "test")?, a.limit)?;
            let th = match kind {
                AttackKind::Orthogonal | AttackKind::Selection => Some(load_thresholds(&layout)?),
                _ => None,
            };
            let env = AttackEnv {
                bundle: &bundle,
                policy: &cfg.augment.policy,
                thresholds: th.as_ref(),
                neighbor_seed: cfg.augment.neighbor_seed,
            };
            let settings = attack_settings(&cfg, kind);
            let attacked = run_attack(&inputs, &env, &settings)?;
            let provenance = format!("{}/eps={}", kind.name(), eps_label(settings.eps));
            let container = DatasetContainer::from_adversarial(&attacked.images, &inputs, settings.eps, &provenance);
            let path = layout.adversarial(kind.name());
            fs::create_dir_all(path.parent().expect("has parent"))?;
            save_dataset(&path, &container)?;
            write_json(&path.with_extension("config.json"), &cfg)?;
            let rate = attacked.success.iter().filter(|&&s| s).count() as f64 / attacked.success.len().max(1) as f64;
            println!("{provenance}: {} inputs, success rate {rate:.4} -> {}", inputs.len(), path.display());
            Ok(())
        }
        Command::Detect(a) => {
            let th = load_thresholds(&layout)?;
            cfg.augment.neighbors = th.k;
            cfg.validate()?;
            let bundle = load_bundle(&layout)?;
            let container = load_dataset(&a.input)?;
            let set = container.to_images();
            let mut records = Vec::with_capacity(set.len());
            let mut robust = 0usize;
            for i in 0..set.len() {
                let r = detect(&set.image(i), &bundle, &th, &cfg.augment.policy, th.k, cfg.augment.neighbor_seed)?;
                if r.verdict == Verdict::Reject || r.classifier_label == set.labels[i] {
                    robust += 1;
                }
                records.push(r);
            }
            let n = records.len().max(1) as f64;
            let rejected = records.iter().filter(|r| r.verdict == Verdict::Reject).count() as f64 / n;
            let clean = container.header.provenance.starts_with("synthetic");
            let mut summary = BTreeMap::new();
            summary.insert("n".into(), json!(records.len()));
            summary.insert("reject_rate".into(), num(rejected));
            summary.insert("target_fpr".into(), num(th.target_fpr));
            summary.insert("provenance".into(), json!(container.header.provenance));
            if clean {
                summary.insert("fpr".into(), num(rejected));
            } else {
                summary.insert("tpr".into(), num(rejected));
                summary.insert("robust_accuracy".into(), num(robust as f64 / n));
            }
            println!("{}: reject rate {rejected:.4} over {} inputs", container.header.provenance, records.len());
            let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
            let out = RunOutput {
                summary,
                verdicts: Some(to_json(&records)),
                ..Default::default()
            };
            save_run(cli, &layout, &cfg, &format!("detect-{stem}"), out)
        }
        Command::Eval(a) => {
            apply_attack(&mut cfg, a)?;
            cfg.validate()?;
            let kind: AttackKind = cfg.attacks.kind.parse()?;
            let bundle = load_bundle(&layout)?;
            let inputs = attack_inputs(&bundle, &load_split(&layout, "test")?, a.limit)?;
            let k = cfg.augment.neighbors;
            let ev = CleanEvidence::compute(&cfg, &bundle, &load_split(&layout, "calib")?, &inputs, k)?;
            let settings = attack_settings(&cfg, kind);
            let ctx = ev.context(&cfg, &bundle, k, settings.clone());
            let (row, sets) = evaluate(&ctx, &settings)?;
            let mut out = RunOutput::default();
            out.tables.push(rows_table("metrics", std::slice::from_ref(&row)));
            out.tables.push(scores_table(&sets.combined, &sets.label, &sets.rep));
            for (name, s) in [("combined", &sets.combined), ("label", &sets.label), ("rep", &sets.rep)] {
                if let Ok(r) = roc_auc(s) {
                    out.curves.push(r.to_curve(name));
                }
            }
            for (key, v) in [
                ("auc", row.auc),
                ("auc_label", row.auc_label),
                ("auc_rep", row.auc_rep),
                ("tpr_at_fpr_5", row.tpr_at_fpr_5),
                ("robust_accuracy", row.robust_accuracy),
                ("attack_success", row.attack_success),
                ("clean_fpr", row.clean_fpr),
                ("eps", row.eps),
            ] {
                out.summary.insert(key.into(), num(v));
            }
            out.summary.insert("n_adv".into(), json!(row.n_adv));
            out.summary.insert("n_clean".into(), json!(row.n_clean));
            println!(
                "{}/eps={}: AUC {:.4} (label {:.4}, rep {:.4}), TPR@FPR5% {:.4}, RA {:.4}, success {:.4}",
                kind.name(),
                eps_label(row.eps),
                row.auc,
                row.auc_label,
                row.auc_rep,
                row.tpr_at_fpr_5,
                row.robust_accuracy,
                row.attack_success
            );
            save_run(cli, &layout, &cfg, &format!("eval-{}", kind.name()), out)
        }
        Command::Sweep(a) => {
            let sweep: SweepKind = a.sweep.parse()?;
            if a.attack.kind.is_none() {
                cfg.attacks.kind = match sweep {
                    SweepKind::Alpha | SweepKind::Epsilon => "adaptive".into(),
                    SweepKind::Neighbors | SweepKind::Ablation => cfg.attacks.kind.clone(),
                };
            }
            apply_attack(&mut cfg, &a.attack)?;
            let grid: Vec<f64> = match &a.grid {
                Some(g) => g.split(',').map(parse_eps).collect::<Result<_>>()?,
                None => match sweep {
                    SweepKind::Neighbors => cfg.eval.neighbors_grid.iter().map(|&k| k as f64).collect(),
                    SweepKind::Alpha => cfg.eval.alpha_grid.clone(),
                    SweepKind::Epsilon | SweepKind::Ablation => cfg.eval.eps_grid.clone(),
                },
            };
            if sweep == SweepKind::Neighbors {
                let k_max = grid.iter().fold(0.0f64, |m, &v| m.max(v)) as usize;
                cfg.augment.neighbors = cfg.augment.neighbors.max(k_max);
            }
            cfg.validate()?;
            let kind: AttackKind = cfg.attacks.kind.parse()?;
            let bundle = load_bundle(&layout)?;
            let inputs = attack_inputs(&bundle, &load_split(&layout, "test")?, a.attack.limit)?;
            let k = cfg.augment.neighbors;
            let ev = CleanEvidence::compute(&cfg, &bundle, &load_split(&layout, "calib")?, &inputs, k)?;
            let ctx = ev.context(&cfg, &bundle, k, attack_settings(&cfg, kind));
            let rows = run_sweep(sweep, &grid, &ctx)?;
            let mut out = RunOutput::default();
            for r in &rows {
                println!(
                    "{}={}: AUC {:.4} (label {:.4}, rep {:.4}), RA {:.4}, success {:.4}",
                    a.sweep, r.grid, r.auc, r.auc_label, r.auc_rep, r.robust_accuracy, r.attack_success
                );
                out.summary.insert(format!("auc[{}]", r.grid), num(r.auc));
            }
            out.tables.push(rows_table(&format!("sweep_{}", a.sweep), &rows));
            save_run(cli, &layout, &cfg, &format!("sweep-{}", a.sweep), out)
        }
        Command::Theory(a) => {
            if let Some(e) = &a.eps {
                cfg.attacks.eps = parse_eps(e)?;
            }
            if let Some(n) = a.samples {
                cfg.eval.theory_samples = n;
            }
            cfg.validate()?;
            let bundle = load_bundle(&layout)?;
            let set = load_split(&layout, "test")?.take(cfg.eval.theory_samples);
            let at = &cfg.attacks;
            let budget = AttackBudget {
                eps: at.eps,
                steps: at.steps,
                step_size: at.eps * at.step_fraction,
                random_start: true,
                seed: at.seed,
            };
            let seed = cfg.augment.neighbor_seed;
            let gap = feature_gap_check(&set, &bundle, &cfg.augment.policy, &budget, seed)?;
            let ord = perturbation_ordering_check(&set, &bundle, &cfg.augment.policy, &budget, seed)?;
            println!(
                "feature gap: clean {:.6}, adversarial {:.6}, ratio {:.4}, dominance {:.4}, skipped {}",
                gap.mean_clean_gap, gap.mean_adv_gap, gap.ratio, gap.dominance, gap.skipped
            );
            println!(
                "perturbation ordering: chain {:.4}, first {:.4}, second {:.4}, skipped {}",
                ord.fraction_holding, ord.fraction_first, ord.fraction_second, ord.skipped
            );
            let mut out = RunOutput {
                tables: vec![gap.table(), ord.table()],
                ..Default::default()
            };
            for (key, v) in [
                ("mean_clean_gap", gap.mean_clean_gap),
                ("mean_adv_gap", gap.mean_adv_gap),
                ("gap_ratio", gap.ratio),
                ("gap_dominance", gap.dominance),
                ("ordering_chain", ord.fraction_holding),
                ("ordering_first", ord.fraction_first),
                ("ordering_second", ord.fraction_second),
            ] {
                out.summary.insert(key.into(), num(v));
            }
            out.summary.insert("gap_skipped".into(), json!(gap.skipped));
            out.summary.insert("ordering_skipped".into(), json!(ord.skipped));
            save_run(cli, &layout, &cfg, "theory", out)
        }
        Command::Cost(a) => {
            if let Some(k) = a.k {
                cfg.augment.neighbors = k;
            }
            cfg.validate()?;
            let bundle = load_bundle(&layout)?;
            let batch = load_split(&layout, "test")?.take(a.samples);
            let c = cost_report(&bundle, &batch, &cfg.augment.policy, cfg.augment.neighbors, cfg.augment.neighbor_seed)?;
            println!(
                "cost: params {}, flops {}, detection flops {}, wall time {:.4}s, overall {:.4e}",
                c.params, c.flops, c.detection_flops, c.wall_time, c.overall
            );
            let mut out = RunOutput::default();
            out.summary.insert("params".into(), json!(c.params));
            out.summary.insert("flops".into(), json!(c.flops));
            out.summary.insert("detection_flops".into(), json!(c.detection_flops));
            out.summary.insert("wall_time".into(), num(c.wall_time));
            out.summary.insert("overall".into(), num(c.overall));
            save_run(cli, &layout, &cfg, "cost", out)
        }
        Command::Report => {
            let mut table = ResultTable::new("report", &["run", "auc", "tpr_at_fpr_5", "robust_accuracy", "metrics"]);
            let mut dirs: Vec<PathBuf> = match fs::read_dir(layout.runs()) {
                Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect(),
                Err(_) => Vec::new(),
            };
            dirs.sort();
            let id = cfg.run_id.clone().unwrap_or_else(|| "report".into());
            for d in dirs {
                let name = d.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                if name == id || name.starts_with('.') {
                    continue;
                }
                let Ok(text) = fs::read_to_string(d.join("summary.json")) else { continue };
                let mut s: BTreeMap<String, Value> = serde_json::from_str(&text)?;
                let cell = |s: &mut BTreeMap<String, Value>, k: &str| s.remove(k).filter(|v| !v.is_null()).map_or(String::new(), |v| v.to_string());
                let auc = cell(&mut s, "auc");
                let tpr = cell(&mut s, "tpr_at_fpr_5");
                let ra = cell(&mut s, "robust_accuracy");
                println!("{name}: auc {auc} tpr@5 {tpr} ra {ra}");
                table.push(vec![name, auc, tpr, ra, serde_json::to_string(&s)?]);
            }
            if table.rows.is_empty() {
                return Err(Error::Empty("run directory"));
            }
            let out = RunOutput {
                tables: vec![table],
                ..Default::default()
            };
            save_run(cli, &layout, &cfg, "report", out)
        }
    }
}

fn scores_table(combined: &[ScoredSample], label: &[ScoredSample], rep: &[ScoredSample]) -> ResultTable {
    let mut t = ResultTable::new("scores", &["provenance", "is_adversarial", "combined", "label", "rep"]);
    for ((c, l), r) in combined.iter().zip(label).zip(rep) {
        t.push(vec![
            c.provenance.clone(),
            c.is_adversarial.to_string(),
            format!("{:.9}", c.score),
            format!("{:.9}", l.score),
            format!("{:.9}", r.score),
        ]);
    }
    t
}
