use crate::{Graph, NdtError, Result, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates (all when `None`).
    pub max_coords: Option<usize>,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

fn scalar_at<T: Scalar, F>(f: &F, point: &Tensor<T>) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input("x", point.clone(), false);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(NdtError::NonScalarOutput(v.shape().to_vec()));
    }
    if !v.item().is_finite() {
        return Err(NdtError::NonFinite { op: "gradient_check" });
    }
    Ok(v.item())
}

/// Compares [`Graph::backward`] against central differences, coordinate-wise.
///
/// `f` receives a fresh graph and the input variable (registered as `"x"`)
/// and returns a scalar.
pub fn gradient_check<T: Scalar, F>(f: F, point: &Tensor<T>, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input("x", point.clone(), true);
    let y = f(&mut g, x)?;
    if !g.value(y).is_finite() {
        return Err(NdtError::NonFinite { op: "gradient_check" });
    }
    let analytic = g.backward(y)?.grad("x").clone();
    if !analytic.is_finite() {
        return Err(NdtError::NonFinite { op: "gradient_check" });
    }

    let n = point.numel();
    let count = cfg.max_coords.map_or(n, |m| m.min(n)).max(1);
    let h = T::of(cfg.step);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        pass: true,
    };
    for j in 0..count {
        let i = j * n / count;
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (scalar_at(&f, &plus)? - scalar_at(&f, &minus)?).as_f64() / (2.0 * cfg.step);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.pass = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

/// Dense Jacobian `[outputs, inputs]` of a vector-valued `f`, assembled row
/// by row from reverse-mode pullbacks of unit cotangents.
pub fn dense_jacobian<T: Scalar, F>(f: F, point: &Tensor<T>) -> Result<Tensor<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input("x", point.clone(), true);
    let y = f(&mut g, x)?;
    let out_shape = g.value(y).shape().to_vec();
    let m = g.value(y).numel();
    let n = point.numel();
    let mut jac = Vec::with_capacity(m * n);
    for r in 0..m {
        let mut e = Tensor::zeros(&out_shape);
        e.data_mut()[r] = T::one();
        let grads = g.backward_with(y, e)?;
        jac.extend_from_slice(grads.grad("x").data());
    }
    Tensor::new(vec![m, n], jac)
}
