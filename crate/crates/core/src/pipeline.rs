//! End-to-end helpers shared by the command-line front end and the tests:
//! dataset splits, bundle training and evaluation contexts from a run config.

use crate::data::{generate_synthetic_dataset, DatasetContainer, LabeledImages, RunConfig, SyntheticConfig};
use crate::detector::{features_for_set, NeighborFeatures};
use crate::evaluation::{AttackKind, AttackSettings, EvalContext};
use crate::models::{classify, train_class_head, train_classifier, train_ssl, ModelBundle};
use crate::Result;

/// Train, calibration and test containers, each generated from its own seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: DatasetContainer,
    pub calib: DatasetContainer,
    pub test: DatasetContainer,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let make = |per_class: usize, offset: u64| {
            generate_synthetic_dataset(&SyntheticConfig {
                classes: d.classes,
                per_class,
                height: d.height,
                width: d.width,
                seed: cfg.seed.wrapping_mul(3).wrapping_add(offset),
            })
        };
        Ok(Self {
            train: make(d.train_per_class, 0)?,
            calib: make(d.calib_per_class, 1)?,
            test: make(d.test_per_class, 2)?,
        })
    }
}

pub fn train_bundle(cfg: &RunConfig, train: &LabeledImages, test: &LabeledImages) -> Result<ModelBundle> {
    let classifier = train_classifier(train, test, &cfg.models.classifier)?;
    let encoder = train_ssl(train, &cfg.ssl())?;
    let head = train_class_head(&encoder, train, test, &cfg.models.head)?;
    Ok(ModelBundle { classifier, encoder, head })
}

/// The inputs of `set` that the classifier labels correctly.
pub fn correctly_classified(bundle: &ModelBundle, set: &LabeledImages) -> Result<LabeledImages> {
    let pred = classify(&bundle.classifier, &set.images)?.labels;
    let idx: Vec<usize> = (0..set.len()).filter(|&i| pred[i] == set.labels[i]).collect();
    Ok(set.subset(&idx))
}

pub fn attack_settings(cfg: &RunConfig, kind: AttackKind) -> AttackSettings {
    let a = &cfg.attacks;
    AttackSettings {
        kind,
        eps: a.eps,
        steps: a.steps,
        step_fraction: a.step_fraction,
        alpha: a.alpha,
        k_eot: a.k_eot,
        seed: a.seed,
    }
}

/// Clean evidence for an evaluation context: calibration set and the
/// correctly classified test inputs, both at `k` neighbors.
pub struct CleanEvidence {
    pub calib: Vec<NeighborFeatures>,
    pub test: LabeledImages,
    pub clean: Vec<NeighborFeatures>,
}

impl CleanEvidence {
    pub fn compute(cfg: &RunConfig, bundle: &ModelBundle, calib: &LabeledImages, test: &LabeledImages, k: usize) -> Result<Self> {
        let policy = &cfg.augment.policy;
        let seed = cfg.augment.neighbor_seed;
        let test = correctly_classified(bundle, test)?;
        Ok(Self {
            calib: features_for_set(bundle, calib, policy, k, seed)?,
            clean: features_for_set(bundle, &test, policy, k, seed)?,
            test,
        })
    }

    pub fn context<'a>(&'a self, cfg: &'a RunConfig, bundle: &'a ModelBundle, k: usize, attack: AttackSettings) -> EvalContext<'a> {
        EvalContext {
            bundle,
            policy: &cfg.augment.policy,
            neighbor_seed: cfg.augment.neighbor_seed,
            k,
            target_fpr: cfg.detector.target_fpr,
            calib: &self.calib,
            test: &self.test,
            clean: &self.clean,
            attack,
        }
    }
}
