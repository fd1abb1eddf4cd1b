use std::path::PathBuf;

use ndt::NdtError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] NdtError),

    // models
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("collapse: embedding coordinate std {std:.3e} below 1e-4")]
    Collapse { std: f64 },
    #[error("frozen trunk parameters changed during head training")]
    TrunkMutated,
    #[error("zero-norm embedding")]
    ZeroEmbedding,
    #[error("dataset needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("input shape {got:?} does not match model input {want:?}")]
    InputShape { want: Vec<usize>, got: Vec<usize> },

    // augment
    #[error("augmentation policy is empty")]
    EmptyPolicy,
    #[error("{kind} parameter {value} outside declared range [{lo}, {hi}]")]
    ParamOutOfRange {
        kind: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("augmentation {0} is not differentiable")]
    NonDifferentiable(String),

    // detector
    #[error("FPR target unreachable: achieved {achieved:.4}")]
    Unreachable { achieved: f64 },
    #[error("neighbor count mismatch: thresholds calibrated for k={calibrated}, got k={got}")]
    KMismatch { calibrated: usize, got: usize },
    #[error("target FPR {0} outside [0, 1)")]
    BadTarget(f64),

    // attacks
    #[error("adversarial output violates budget: linf {linf} > eps {eps} or pixel out of range")]
    BudgetViolation { linf: f64, eps: f64 },
    #[error("degenerate point: both gradients are zero")]
    DegeneratePoint,
    #[error("target label equals the true label {0}")]
    TargetIsTrueLabel(usize),

    // evaluation
    #[error("metric needs both adversarial and clean samples")]
    SingleClass,
    #[error("{0} is empty")]
    Empty(&'static str),

    // data-io
    #[error("unsupported class count {0} (expected 2..=16)")]
    UnsupportedClasses(usize),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated or over-long payload: {0}")]
    Truncated(String),
    #[error("label {label} >= num_classes {num_classes}")]
    LabelOutOfRange { label: u8, num_classes: u8 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("run directory {0} exists (use --force)")]
    RunExists(PathBuf),
    #[error("injected failure after {0} files")]
    InjectedFailure(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Owning module, used in the CLI's `error:<module>:<kind>` prefix.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            Tensor(_) => "ndt-core",
            Divergence { .. } | Collapse { .. } | TrunkMutated | ZeroEmbedding | TooFewClasses(_) | InputShape { .. } => "models",
            EmptyPolicy | ParamOutOfRange { .. } | NonDifferentiable(_) => "augment",
            Unreachable { .. } | KMismatch { .. } | BadTarget(_) => "detector",
            BudgetViolation { .. } | DegeneratePoint | TargetIsTrueLabel(_) => "attacks",
            SingleClass | Empty(_) => "evaluation",
            _ => "data-io",
        }
    }

    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            Tensor(NdtError::ShapeMismatch { .. }) => "shape",
            Tensor(NdtError::ZeroNorm) => "zero-norm",
            Tensor(_) => "tensor",
            Divergence { .. } => "divergence",
            Collapse { .. } => "collapse",
            TrunkMutated => "trunk-mutated",
            ZeroEmbedding => "zero-embedding",
            TooFewClasses(_) => "too-few-classes",
            InputShape { .. } => "shape",
            EmptyPolicy => "empty-policy",
            ParamOutOfRange { .. } => "param-range",
            NonDifferentiable(_) => "non-differentiable",
            Unreachable { .. } => "unreachable",
            KMismatch { .. } => "k-mismatch",
            BadTarget(_) => "bad-target",
            BudgetViolation { .. } => "budget",
            DegeneratePoint => "degenerate-point",
            TargetIsTrueLabel(_) => "target",
            SingleClass => "single-class",
            Empty(_) => "empty",
            UnsupportedClasses(_) => "classes",
            BadMagic => "bad-magic",
            VersionMismatch { .. } => "version",
            Truncated(_) => "truncated",
            LabelOutOfRange { .. } => "label",
            Checksum => "checksum",
            TopologyMismatch(_) => "topology",
            RunExists(_) => "exists",
            InjectedFailure(_) => "injected",
            Config(_) => "config",
            Io(_) => "io",
            Json(_) => "json",
            Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
