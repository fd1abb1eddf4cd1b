//! Image augmentations as explicit linear maps, neighbor generation, and the
//! spectral validity score of an augmentation against a classifier.
//!
//! Every augmentation here is linear in the pixel values (`x_aug = W x`)
//! followed by a clamp to `[0, 1]`, so gradients and Jacobian products pass
//! through it exactly.

use std::collections::HashMap;
use std::sync::Arc;

use ndt::{Graph64, LinearOp, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentationSpec {
    /// Rotation about the image center by an angle drawn from `degrees`.
    Rotation { degrees: [f64; 2] },
    /// Brightness then contrast (around the image mean) factors.
    ColorJitter { brightness: [f64; 2], contrast: [f64; 2] },
    /// Integer shift in both axes within `[-max_shift, max_shift]`, zero fill.
    Translation { max_shift: i64 },
    HorizontalFlip { probability: f64 },
}

impl AugmentationSpec {
    pub fn rotation(max_degrees: f64) -> Self {
        Self::Rotation {
            degrees: [-max_degrees, max_degrees],
        }
    }

    pub fn color_jitter(lo: f64, hi: f64) -> Self {
        Self::ColorJitter {
            brightness: [lo, hi],
            contrast: [lo, hi],
        }
    }

    /// Rotation by exactly zero degrees.
    pub fn identity() -> Self {
        Self::Rotation { degrees: [0.0, 0.0] }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rotation { .. } => "rotation",
            Self::ColorJitter { .. } => "color-jitter",
            Self::Translation { .. } => "translation",
            Self::HorizontalFlip { .. } => "horizontal-flip",
        }
    }

    /// Rotation and color jitter are the differentiable kinds.
    pub fn differentiable(&self) -> bool {
        matches!(self, Self::Rotation { .. } | Self::ColorJitter { .. })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AugParams {
        let draw = |rng: &mut dyn rand::RngCore, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        match *self {
            Self::Rotation { degrees } => AugParams::Rotation {
                degrees: draw(rng, degrees),
            },
            Self::ColorJitter { brightness, contrast } => {
                let b = draw(rng, brightness);
                AugParams::ColorJitter {
                    brightness: b,
                    contrast: draw(rng, contrast),
                }
            }
            Self::Translation { max_shift } => AugParams::Translation {
                dx: rng.gen_range(-max_shift..=max_shift),
                dy: rng.gen_range(-max_shift..=max_shift),
            },
            Self::HorizontalFlip { probability } => AugParams::HorizontalFlip {
                flip: rng.gen_bool(probability.clamp(0.0, 1.0)),
            },
        }
    }

    /// Checks that `params` belong to this spec and lie within its ranges.
    pub fn validate(&self, params: &AugParams) -> Result<()> {
        let check = |kind, v: f64, r: [f64; 2]| {
            if v < r[0] || v > r[1] || !v.is_finite() {
                Err(Error::ParamOutOfRange {
                    kind,
                    value: v,
                    lo: r[0],
                    hi: r[1],
                })
            } else {
                Ok(())
            }
        };
        match (self, params) {
            (Self::Rotation { degrees }, AugParams::Rotation { degrees: d }) => check("rotation", *d, *degrees),
            (Self::ColorJitter { brightness, contrast }, AugParams::ColorJitter { brightness: b, contrast: c }) => {
                check("brightness", *b, *brightness)?;
                check("contrast", *c, *contrast)
            }
            (Self::Translation { max_shift }, AugParams::Translation { dx, dy }) => {
                let r = [-(*max_shift as f64), *max_shift as f64];
                check("translation", *dx as f64, r)?;
                check("translation", *dy as f64, r)
            }
            (Self::HorizontalFlip { .. }, AugParams::HorizontalFlip { .. }) => Ok(()),
            _ => Err(Error::Config(format!("parameters {params:?} do not belong to a {} spec", self.name()))),
        }
    }
}

/// Rotation of at most 15 degrees and brightness/contrast jitter in `[0.8, 1.2]`.
pub fn default_policy() -> Vec<AugmentationSpec> {
    vec![AugmentationSpec::rotation(15.0), AugmentationSpec::color_jitter(0.8, 1.2)]
}

/// Concrete parameters drawn from an [`AugmentationSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugParams {
    Rotation { degrees: f64 },
    ColorJitter { brightness: f64, contrast: f64 },
    Translation { dx: i64, dy: i64 },
    HorizontalFlip { flip: bool },
}

impl AugParams {
    /// The linear map for images of per-sample shape `[c, h, w]`.
    pub fn linear_op(&self, shape: [usize; 3]) -> Arc<dyn LinearOp<f64>> {
        let [c, h, w] = shape;
        match *self {
            AugParams::Rotation { degrees } => Arc::new(Resample::rotation(c, h, w, degrees)),
            AugParams::ColorJitter { brightness, contrast } => Arc::new(ColorJitter {
                n: c * h * w,
                brightness,
                contrast,
            }),
            AugParams::Translation { dx, dy } => Arc::new(Resample::shift(c, h, w, dx, dy)),
            AugParams::HorizontalFlip { flip } => Arc::new(if flip {
                Resample::hflip(c, h, w)
            } else {
                Resample::shift(c, h, w, 0, 0)
            }),
        }
    }
}

/// Each output pixel is a weighted sum of at most four input pixels of the
/// same channel.
#[derive(Debug, Clone)]
pub struct Resample {
    channels: usize,
    plane: usize,
    taps: Vec<[(u32, f64); 4]>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl Resample {
    fn from_source(c: usize, h: usize, w: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y as f64, x as f64);
                let (sy, sx) = (snap(sy), snap(sx));
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let mut t = [(0u32, 0.0); 4];
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (slot, (cy, cx, wt)) in t.iter_mut().zip(corners) {
                    if wt != 0.0 && cy >= 0.0 && cx >= 0.0 && cy < h as f64 && cx < w as f64 {
                        *slot = ((cy as usize * w + cx as usize) as u32, wt);
                    }
                }
                taps.push(t);
            }
        }
        Self {
            channels: c,
            plane: h * w,
            taps,
        }
    }

    /// Bilinear rotation about the center, zero outside the source image.
    pub fn rotation(c: usize, h: usize, w: usize, degrees: f64) -> Self {
        let th = degrees.to_radians();
        let (s, co) = th.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        // Output p samples the input at R(-theta)(p - center) + center.
        Self::from_source(c, h, w, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy + co * dy - s * dx, cx + s * dy + co * dx)
        })
    }

    pub fn shift(c: usize, h: usize, w: usize, dx: i64, dy: i64) -> Self {
        Self::from_source(c, h, w, |y, x| (y - dy as f64, x - dx as f64))
    }

    pub fn hflip(c: usize, h: usize, w: usize) -> Self {
        Self::from_source(c, h, w, |y, x| (y, w as f64 - 1.0 - x))
    }
}

impl LinearOp<f64> for Resample {
    fn dim(&self) -> usize {
        self.channels * self.plane
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for ch in 0..self.channels {
            let (xs, ys) = (&x[ch * self.plane..(ch + 1) * self.plane], &mut y[ch * self.plane..(ch + 1) * self.plane]);
            for (out, taps) in ys.iter_mut().zip(&self.taps) {
                *out = taps.iter().map(|&(i, wt)| wt * xs[i as usize]).sum();
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        for ch in 0..self.channels {
            let base = ch * self.plane;
            for (p, taps) in self.taps.iter().enumerate() {
                let g = y[base + p];
                for &(i, wt) in taps {
                    x[base + i as usize] += wt * g;
                }
            }
        }
    }

    fn name(&self) -> &str {
        "resample"
    }
}

/// `y = c*b*x + (1-c)*b*mean(x)`; the matrix is symmetric.
#[derive(Debug, Clone)]
pub struct ColorJitter {
    n: usize,
    brightness: f64,
    contrast: f64,
}

impl LinearOp<f64> for ColorJitter {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mean = x.iter().sum::<f64>() / self.n as f64;
        let (a, b) = (self.contrast * self.brightness, (1.0 - self.contrast) * self.brightness * mean);
        for (o, &v) in y.iter_mut().zip(x) {
            *o = a * v + b;
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let mean = y.iter().sum::<f64>() / self.n as f64;
        let (a, b) = (self.contrast * self.brightness, (1.0 - self.contrast) * self.brightness * mean);
        for (o, &v) in x.iter_mut().zip(y) {
            *o += a * v + b;
        }
    }

    fn name(&self) -> &str {
        "color-jitter"
    }
}

/// Sequential composition; the transpose runs in reverse order.
pub struct Composed {
    ops: Vec<Arc<dyn LinearOp<f64>>>,
    n: usize,
}

impl LinearOp<f64> for Composed {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut cur = x.to_vec();
        let mut next = vec![0.0; self.n];
        for op in &self.ops {
            op.apply(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        y.copy_from_slice(&cur);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let mut cur = y.to_vec();
        for op in self.ops.iter().rev() {
            let mut prev = vec![0.0; self.n];
            op.apply_transpose(&cur, &mut prev);
            cur = prev;
        }
        for (o, v) in x.iter_mut().zip(cur) {
            *o += v;
        }
    }

    fn name(&self) -> &str {
        "composed"
    }
}

/// One drawn augmentation: its parameters and the composed linear map.
#[derive(Clone)]
pub struct Augmentation {
    pub params: Vec<AugParams>,
    pub op: Arc<dyn LinearOp<f64>>,
}

impl std::fmt::Debug for Augmentation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Augmentation").field("params", &self.params).finish()
    }
}

impl Augmentation {
    pub fn from_params(params: Vec<AugParams>, shape: [usize; 3]) -> Self {
        let ops: Vec<_> = params.iter().map(|p| p.linear_op(shape)).collect();
        let op: Arc<dyn LinearOp<f64>> = if ops.len() == 1 {
            ops[0].clone()
        } else {
            Arc::new(Composed {
                ops,
                n: shape.iter().product(),
            })
        };
        Self { params, op }
    }

    /// `clamp(W x)` for a single image of any leading shape.
    pub fn apply(&self, x: &Tensor64) -> Tensor64 {
        let mut out = Tensor64::zeros(x.shape());
        self.op.apply(x.data(), out.data_mut());
        out.map(|v| v.clamp(0.0, 1.0))
    }

    /// `W x` without the clamp, for tangent vectors.
    pub fn apply_linear(&self, x: &Tensor64) -> Tensor64 {
        let mut out = Tensor64::zeros(x.shape());
        self.op.apply(x.data(), out.data_mut());
        out
    }
}

/// Draws one parameter set per spec, in policy order.
pub fn sample_augmentation(policy: &[AugmentationSpec], shape: [usize; 3], rng: &mut impl Rng) -> Result<Augmentation> {
    if policy.is_empty() {
        return Err(Error::EmptyPolicy);
    }
    let params = policy.iter().map(|s| s.sample(rng)).collect();
    Ok(Augmentation::from_params(params, shape))
}

fn shape_of(x: &Tensor64) -> [usize; 3] {
    let s = x.shape();
    let s = &s[s.len() - 3..];
    [s[0], s[1], s[2]]
}

/// Samples parameters from `spec` and applies them to `x`.
pub fn augment_one(x: &Tensor64, spec: &AugmentationSpec, rng: &mut impl Rng) -> Tensor64 {
    Augmentation::from_params(vec![spec.sample(rng)], shape_of(x)).apply(x)
}

/// Applies explicit parameters after checking them against `spec`.
pub fn apply_params(x: &Tensor64, spec: &AugmentationSpec, params: &AugParams) -> Result<Tensor64> {
    spec.validate(params)?;
    Ok(Augmentation::from_params(vec![params.clone()], shape_of(x)).apply(x))
}

/// Random stream for neighbor `index`; streams are independent of draw order.
pub fn neighbor_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The `k` augmentations that [`generate_neighbors`] would draw under `seed`.
pub fn neighbor_augmentations(
    policy: &[AugmentationSpec],
    shape: [usize; 3],
    k: usize,
    seed: u64,
) -> Result<Vec<Augmentation>> {
    if policy.is_empty() {
        return Err(Error::EmptyPolicy);
    }
    (0..k)
        .map(|i| sample_augmentation(policy, shape, &mut neighbor_rng(seed, i)))
        .collect()
}

/// The `k` augmented variants of one input.
#[derive(Debug, Clone)]
pub struct NeighborSet {
    pub source: Tensor64,
    /// `[k, c, h, w]`.
    pub neighbors: Tensor64,
    pub params: Vec<Vec<AugParams>>,
    pub seed: u64,
}

impl NeighborSet {
    pub fn k(&self) -> usize {
        self.params.len()
    }
}

/// Default neighbor count.
pub const DEFAULT_NEIGHBORS: usize = 50;

pub fn generate_neighbors(x: &Tensor64, k: usize, policy: &[AugmentationSpec], seed: u64) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::Config("neighbor count must be at least 1".into()));
    }
    let shape = shape_of(x);
    let augs = neighbor_augmentations(policy, shape, k, seed)?;
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(k * per);
    for a in &augs {
        data.extend_from_slice(a.apply(x).data());
    }
    Ok(NeighborSet {
        source: x.clone(),
        neighbors: Tensor64::new(vec![k, shape[0], shape[1], shape[2]], data)?,
        params: augs.into_iter().map(|a| a.params).collect(),
        seed,
    })
}

/// In-graph `clamp(W_i x)` for a batch of one image `x` and `augs.len()` maps.
pub fn augment_in_graph(g: &mut Graph64, x: Var, augs: &[Augmentation]) -> Result<Var> {
    let rep = g.repeat_batch(x, augs.len())?;
    let mapped = g.map_each(rep, augs.iter().map(|a| a.op.clone()).collect())?;
    Ok(g.clamp(mapped, 0.0, 1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validity {
    Valid,
    Invalid,
    /// Power iteration did not settle within its step budget.
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleValidity {
    pub spectral_norm: f64,
    pub converged: bool,
    pub validity: Validity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Mean over samples of the estimated `||d C(W x) / dx||_2`.
    pub spectral_norm_estimate: f64,
    /// `sqrt(2) / (2 eps)`.
    pub bound: f64,
    pub validity: Validity,
    pub per_sample: Vec<SampleValidity>,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    pub steps: usize,
    /// Maximum relative change of the estimate over the last step.
    pub tolerance: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            steps: 20,
            tolerance: 1e-2,
        }
    }
}

pub fn validity_bound(eps: f64) -> f64 {
    2f64.sqrt() / (2.0 * eps)
}

/// Largest singular value of the Jacobian of `x -> f(x)` at `x`, by power
/// iteration on `J^T J` using tangent (J v) and cotangent (J^T u) sweeps
/// over one recorded tape. Returns `(estimate, converged)`.
pub fn spectral_norm<F>(f: F, x: &Tensor64, iters: PowerIteration, rng: &mut impl Rng) -> Result<(f64, bool)>
where
    F: Fn(&mut Graph64, Var) -> Result<Var>,
{
    let mut g = Graph64::new();
    let xv = g.input("x", x.clone(), true);
    let y = f(&mut g, xv)?;
    let mut v = Tensor64::new(x.shape().to_vec(), (0..x.numel()).map(|_| rng.sample(StandardNormal)).collect())?;
    let n = v.norm();
    v = v.scale(1.0 / n);
    let mut sigma = 0.0;
    let mut prev = f64::NAN;
    for _ in 0..iters.steps.max(1) {
        let u = g.jvp(y, &HashMap::from([("x".to_string(), v.clone())]))?;
        prev = sigma;
        sigma = u.norm();
        if sigma == 0.0 {
            return Ok((0.0, true));
        }
        let w = g.backward_with(y, u)?.grad("x").clone();
        let wn = w.norm();
        if wn == 0.0 {
            return Ok((sigma, true));
        }
        v = w.scale(1.0 / wn);
    }
    let converged = (sigma - prev).abs() <= iters.tolerance * sigma;
    Ok((sigma, converged))
}

/// Scores one differentiable augmentation against `classifier` (image ->
/// logits) at budget `eps`: the augmentation is valid when the averaged
/// spectral norm of `d classifier(W x) / dx` stays within `sqrt(2)/(2 eps)`.
pub fn augmentation_validity<F>(
    spec: &AugmentationSpec,
    classifier: F,
    samples: &[Tensor64],
    eps: f64,
    iters: PowerIteration,
    seed: u64,
) -> Result<ValidityReport>
where
    F: Fn(&mut Graph64, Var) -> Result<Var>,
{
    if !spec.differentiable() {
        return Err(Error::NonDifferentiable(spec.name().into()));
    }
    if samples.is_empty() {
        return Err(Error::Empty("validity sample set"));
    }
    let bound = validity_bound(eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_sample = Vec::with_capacity(samples.len());
    for x in samples {
        let aug = Augmentation::from_params(vec![spec.sample(&mut rng)], shape_of(x));
        let f = |g: &mut Graph64, xv: Var| {
            let w = g.map_each(xv, vec![aug.op.clone()])?;
            classifier(g, w)
        };
        let (sigma, converged) = spectral_norm(f, x, iters, &mut rng)?;
        let validity = match (converged, sigma <= bound) {
            (false, _) => Validity::Indeterminate,
            (true, true) => Validity::Valid,
            (true, false) => Validity::Invalid,
        };
        per_sample.push(SampleValidity {
            spectral_norm: sigma,
            converged,
            validity,
        });
    }
    let estimate = per_sample.iter().map(|s| s.spectral_norm).sum::<f64>() / per_sample.len() as f64;
    let validity = if per_sample.iter().any(|s| !s.converged) {
        Validity::Indeterminate
    } else if estimate <= bound {
        Validity::Valid
    } else {
        Validity::Invalid
    };
    Ok(ValidityReport {
        spectral_norm_estimate: estimate,
        bound,
        validity,
        per_sample,
    })
}
