use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::augment::{default_policy, AugmentationSpec};
use crate::models::{SslConfig, TrainConfig};
use crate::{Error, Result};

/// Parses a budget written as a decimal (`0.03`) or a fraction (`8/255`).
pub fn parse_eps(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let num: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad budget `{s}`")))?;
            let den: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad budget `{s}`")))?;
            if den == 0.0 {
                return Err(Error::Config(format!("bad budget `{s}`: zero denominator")));
            }
            num / den
        }
        None => s.parse().map_err(|_| Error::Config(format!("bad budget `{s}`")))?,
    };
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Config(format!("budget must be finite and non-negative, got `{s}`")));
    }
    Ok(v)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EpsRepr {
    Num(f64),
    Text(String),
}

fn de_eps<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    match EpsRepr::deserialize(d)? {
        EpsRepr::Num(v) => Ok(v),
        EpsRepr::Text(s) => parse_eps(&s).map_err(serde::de::Error::custom),
    }
}

fn de_eps_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<EpsRepr>::deserialize(d)?
        .into_iter()
        .map(|e| match e {
            EpsRepr::Num(v) => Ok(v),
            EpsRepr::Text(s) => parse_eps(&s).map_err(serde::de::Error::custom),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub calib_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            classes: 4,
            height: 16,
            width: 16,
            train_per_class: 250,
            calib_per_class: 75,
            test_per_class: 75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelsSection {
    pub classifier: TrainConfig,
    pub ssl: TrainConfig,
    pub ssl_predictor_lr_scale: f64,
    /// Views for SSL training; the detection policy when absent.
    pub ssl_policy: Option<Vec<AugmentationSpec>>,
    pub head: TrainConfig,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            classifier: TrainConfig { epochs: 8, ..TrainConfig::default() },
            ssl: SslConfig::default().train,
            ssl_predictor_lr_scale: SslConfig::default().predictor_lr_scale,
            ssl_policy: None,
            head: TrainConfig { epochs: 100, lr: 0.3, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub policy: Vec<AugmentationSpec>,
    pub neighbors: usize,
    pub neighbor_seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            policy: default_policy(),
            neighbors: 50,
            neighbor_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    pub target_fpr: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { target_fpr: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    /// `fgsm`, `pgd`, `adaptive` or `orthogonal`.
    pub kind: String,
    #[serde(deserialize_with = "de_eps")]
    pub eps: f64,
    pub steps: usize,
    /// Step size as a fraction of `eps`.
    pub step_fraction: f64,
    pub alpha: f64,
    pub k_eot: usize,
    /// `orthogonal` or `selection`.
    pub strategy: String,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: "pgd".into(),
            eps: 16.0 / 255.0,
            steps: 20,
            step_fraction: 0.25,
            alpha: 1.0,
            k_eot: 8,
            strategy: "orthogonal".into(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub neighbors_grid: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    #[serde(deserialize_with = "de_eps_list")]
    pub eps_grid: Vec<f64>,
    pub fpr_cap: f64,
    /// Samples used by the theory checks and the validity score.
    pub theory_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            neighbors_grid: vec![5, 10, 25, 50],
            alpha_grid: vec![0.0, 1.0, 10.0, 20.0, 50.0, 100.0],
            eps_grid: vec![4.0 / 255.0, 16.0 / 255.0, 64.0 / 255.0],
            fpr_cap: 0.05,
            theory_samples: 200,
        }
    }
}

/// Run configuration as a JSON document with one section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_id: Option<String>,
    pub data: DataSection,
    pub models: ModelsSection,
    pub augment: AugmentSection,
    pub detector: DetectorSection,
    pub attacks: AttackSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_id: None,
            data: DataSection::default(),
            models: ModelsSection::default(),
            augment: AugmentSection::default(),
            detector: DetectorSection::default(),
            attacks: AttackSection::default(),
            eval: EvalSection::default(),
        }
        .with_seed(0)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the top-level seed into every section seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.models.classifier.seed = seed;
        self.models.ssl.seed = seed.wrapping_add(1);
        self.models.head.seed = seed.wrapping_add(2);
        self.augment.neighbor_seed = seed.wrapping_add(1234);
        self.attacks.seed = seed.wrapping_add(7);
        self
    }

    pub fn ssl(&self) -> SslConfig {
        SslConfig {
            train: self.models.ssl.clone(),
            policy: self.models.ssl_policy.clone().unwrap_or_else(|| self.augment.policy.clone()),
            predictor_lr_scale: self.models.ssl_predictor_lr_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.detector.target_fpr) {
            return Err(Error::BadTarget(self.detector.target_fpr));
        }
        if self.augment.neighbors == 0 {
            return bad("augment.neighbors must be at least 1".into());
        }
        if self.attacks.k_eot == 0 || self.attacks.alpha < 0.0 {
            return bad("attacks.k_eot must be >= 1 and attacks.alpha >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.attacks.step_fraction) || self.attacks.step_fraction == 0.0 {
            return bad("attacks.step_fraction must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_fractions_and_decimals() {
        assert!((parse_eps("8/255").unwrap() - 0.031372549).abs() < 1e-9);
        assert_eq!(parse_eps("0.05").unwrap(), 0.05);
        assert!(parse_eps("1/0").is_err());
        assert!(parse_eps("-1").is_err());
        assert!(parse_eps("abc").is_err());
    }

    #[test]
    fn config_accepts_fraction_strings_and_stores_decimals() {
        let c: RunConfig = serde_json::from_str(r#"{"attacks": {"eps": "16/255"}, "eval": {"eps_grid": ["2/255", 0.5]}}"#).unwrap();
        assert!((c.attacks.eps - 16.0 / 255.0).abs() < 1e-15);
        assert_eq!(c.eval.eps_grid[1], 0.5);
        let v = serde_json::to_value(&c).unwrap();
        assert!(v["attacks"]["eps"].is_f64());
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }
}
