use std::collections::{BTreeMap, HashMap};

use crate::graph::{conv_geom, cosine_parts, softmax_row, Op};
use crate::kernels;
use crate::{Graph, NdtError, Result, Scalar, Tensor, Var};

/// Gradient of one named input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry<T> {
    pub grad: Tensor<T>,
    /// Set when the input was registered without `requires_grad`; `grad` is then zero.
    pub detached: bool,
}

/// Result of [`Graph::backward`], keyed by input name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    entries: BTreeMap<String, GradEntry<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, name: &str) -> Option<&GradEntry<T>> {
        self.entries.get(name)
    }

    /// Gradient tensor for `name`; panics on an unknown name.
    pub fn grad(&self, name: &str) -> &Tensor<T> {
        &self.entries[name].grad
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name).map(|e| e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl<T: Scalar> Graph<T> {
    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let shape = &self.nodes[output.0].shape;
        if self.nodes[output.0].value.numel() != 1 {
            return Err(NdtError::NonScalarOutput(shape.clone()));
        }
        let seed = Tensor::full(shape, T::one());
        self.backward_with(output, seed)
    }

    /// Vector-Jacobian product: pulls `cotangent` (shaped like `output`) back
    /// to every named input.
    pub fn backward_with(&self, output: Var, cotangent: Tensor<T>) -> Result<Gradients<T>> {
        let out_shape = &self.nodes[output.0].shape;
        if cotangent.numel() != self.nodes[output.0].value.numel() {
            return Err(NdtError::ShapeMismatch {
                op: "backward",
                lhs: out_shape.clone(),
                rhs: cotangent.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent.reshape(out_shape)?);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.pull_back(idx, &g, &mut grads)?;
        }
        let mut entries = BTreeMap::new();
        for (name, &v) in &self.names {
            let node = &self.nodes[v.0];
            let detached = !node.needs_grad;
            let grad = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(&node.shape));
            entries.insert(name.clone(), GradEntry { grad, detached });
        }
        Ok(Gradients { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn pull_back(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    kernels::matmul_bt(m, n, k, g.data(), tb.data(), da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    kernels::matmul_at(m, k, n, ta.data(), g.data(), db.data_mut());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*b) {
                    let n = val(*b).numel();
                    let mut db = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let geom = conv_geom(tx.shape(), tw.shape(), *stride, *pad)?;
                let mut dx = needs(*x).then(|| Tensor::zeros(tx.shape()));
                let mut dw = needs(*w).then(|| Tensor::zeros(tw.shape()));
                let mut db = b.filter(|b| needs(*b)).map(|b| Tensor::zeros(val(b).shape()));
                kernels::conv2d_backward(
                    &geom,
                    tx.data(),
                    tw.data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AvgPool(x, size) => {
                let s = val(*x).shape();
                let mut dx = Tensor::zeros(s);
                kernels::avg_pool_backward(s[0] * s[1], s[2], s[3], *size, g.data(), dx.data_mut());
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.reshape(val(*x).shape())?),
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let t = val(*x);
                let gv = g.item() / T::of(t.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(t.shape(), gv));
            }
            Op::L2Norm(x) => {
                let t = val(*x);
                let n = self.nodes[idx].value.item();
                let dx = if n > T::zero() {
                    t.scale(g.item() / n)
                } else {
                    Tensor::zeros(t.shape())
                };
                self.accumulate(grads, *x, dx);
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.shape()[1];
                let mut da = Tensor::zeros(ta.shape());
                let mut db = Tensor::zeros(tb.shape());
                for (i, (ra, rb)) in ta.data().chunks(d).zip(tb.data().chunks(d)).enumerate() {
                    let (c, na, nb) = cosine_parts(ra, rb)?;
                    let gi = g.data()[i];
                    let inv = T::one() / (na * nb);
                    for j in 0..d {
                        da.data_mut()[i * d + j] = gi * (rb[j] * inv - c * ra[j] / (na * na));
                        db.data_mut()[i * d + j] = gi * (ra[j] * inv - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SoftmaxCe(logits, targets) => {
                let t = val(*logits);
                let c = t.shape()[1];
                let mut dl = Tensor::zeros(t.shape());
                for (i, row) in t.data().chunks(c).enumerate() {
                    let p = softmax_row(row);
                    let gi = g.data()[i];
                    for j in 0..c {
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        dl.data_mut()[i * c + j] = gi * (p[j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Clamp(x, lo, hi) => {
                let dx = g.zip_map(val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { T::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::MapEach(x, ops) => {
                let t = val(*x);
                let n = t.shape()[0];
                let per = t.numel() / n;
                let mut dx = Tensor::zeros(t.shape());
                for i in 0..n {
                    let m = &ops[if ops.len() == 1 { 0 } else { i }];
                    m.apply_transpose(&g.data()[i * per..(i + 1) * per], &mut dx.data_mut()[i * per..(i + 1) * per]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatBatch(x, _) => {
                let t = val(*x);
                let per = t.numel();
                let mut dx = Tensor::zeros(t.shape());
                for chunk in g.data().chunks(per) {
                    for (d, &v) in dx.data_mut().iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    /// Jacobian-vector product by a forward tangent sweep over the recorded
    /// tape. `tangents` maps input names to directions; inputs not listed
    /// have zero tangent. Returns the tangent of `output`.
    pub fn jvp(&self, output: Var, tangents: &HashMap<String, Tensor<T>>) -> Result<Tensor<T>> {
        let mut tan: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        for (name, t) in tangents {
            let v = self.lookup(name).ok_or_else(|| NdtError::UnknownInput(name.clone()))?;
            if v.0 > output.0 {
                continue;
            }
            if t.numel() != self.nodes[v.0].value.numel() {
                return Err(NdtError::ShapeMismatch {
                    op: "jvp",
                    lhs: self.nodes[v.0].shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            tan[v.0] = Some(t.reshape(&self.nodes[v.0].shape)?);
        }
        for idx in 0..=output.0 {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            tan[idx] = self.push_forward(idx, &tan)?;
        }
        Ok(tan[output.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[output.0].shape)))
    }

    fn push_forward(&self, idx: usize, tan: &[Option<Tensor<T>>]) -> Result<Option<Tensor<T>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let t = |v: Var| tan[v.0].as_ref();
        let zero_like = |v: Var| Tensor::zeros(&self.nodes[v.0].shape);
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf | Op::StopGrad(_) => None,
            Op::Add(a, b) | Op::Sub(a, b) => match (t(*a), t(*b)) {
                (None, None) => None,
                (ta, tb) => {
                    let ta = ta.cloned().unwrap_or_else(|| zero_like(*a));
                    let tb = tb.cloned().unwrap_or_else(|| zero_like(*b));
                    Some(if matches!(node.op, Op::Add(..)) {
                        ta.zip_map(&tb, |x, y| x + y)
                    } else {
                        ta.zip_map(&tb, |x, y| x - y)
                    })
                }
            },
            Op::Mul(a, b) => {
                let mut acc: Option<Tensor<T>> = None;
                if let Some(ta) = t(*a) {
                    acc = Some(ta.zip_map(val(*b), |x, y| x * y));
                }
                if let Some(tb) = t(*b) {
                    let term = tb.zip_map(val(*a), |x, y| x * y);
                    acc = Some(match acc {
                        Some(mut s) => {
                            s.add_assign(&term);
                            s
                        }
                        None => term,
                    });
                }
                acc
            }
            Op::Scale(a, s) => t(*a).map(|ta| ta.scale(*s)),
            Op::AddScalar(a, _) | Op::Reshape(a) => t(*a).map(|ta| ta.reshape(&node.shape)).transpose()?,
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if t(*a).is_none() && t(*b).is_none() {
                    return Ok(None);
                }
                let mut out = Tensor::zeros(&[m, n]);
                if let Some(ta) = t(*a) {
                    kernels::matmul(m, k, n, ta.data(), vb.data(), out.data_mut());
                }
                if let Some(tb) = t(*b) {
                    kernels::matmul(m, k, n, va.data(), tb.data(), out.data_mut());
                }
                Some(out)
            }
            Op::AddBias(a, b) => match (t(*a), t(*b)) {
                (None, None) => None,
                (ta, tb) => {
                    let mut out = ta.cloned().unwrap_or_else(|| zero_like(*a));
                    if let Some(tb) = tb {
                        let n = tb.numel();
                        for row in out.data_mut().chunks_mut(n) {
                            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                                *o += bv;
                            }
                        }
                    }
                    Some(out)
                }
            },
            Op::Conv2d { x, w, b, stride, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                let geom = conv_geom(vx.shape(), vw.shape(), *stride, *pad)?;
                let (tx, tw, tb) = (t(*x), t(*w), b.and_then(&t));
                if tx.is_none() && tw.is_none() && tb.is_none() {
                    return Ok(None);
                }
                let mut out = Tensor::zeros(&node.shape);
                let mut tmp = Tensor::zeros(&node.shape);
                if let Some(tx) = tx {
                    kernels::conv2d_forward(&geom, tx.data(), vw.data(), tb.map(|t| t.data()), out.data_mut());
                } else if let Some(tb) = tb {
                    let zeros = vec![T::zero(); vx.numel()];
                    kernels::conv2d_forward(&geom, &zeros, vw.data(), Some(tb.data()), out.data_mut());
                }
                if let Some(tw) = tw {
                    kernels::conv2d_forward(&geom, vx.data(), tw.data(), None, tmp.data_mut());
                    out.add_assign(&tmp);
                }
                Some(out)
            }
            Op::AvgPool(x, size) => t(*x).map(|tx| {
                let s = tx.shape();
                let mut out = Tensor::zeros(&node.shape);
                kernels::avg_pool_forward(s[0] * s[1], s[2], s[3], *size, tx.data(), out.data_mut());
                out
            }),
            Op::Relu(x) => t(*x).map(|tx| tx.zip_map(val(*x), |d, v| if v > T::zero() { d } else { T::zero() })),
            Op::Sum(x) => t(*x).map(|tx| Tensor::scalar(tx.data().iter().copied().sum())),
            Op::Mean(x) => t(*x).map(|tx| Tensor::scalar(tx.data().iter().copied().sum::<T>() / T::of(tx.numel() as f64))),
            Op::L2Norm(x) => t(*x).map(|tx| {
                let n = node.value.item();
                if n > T::zero() {
                    Tensor::scalar(val(*x).dot(tx) / n)
                } else {
                    Tensor::scalar(T::zero())
                }
            }),
            Op::RowCosine(a, b) => {
                let (ta, tb) = (t(*a), t(*b));
                if ta.is_none() && tb.is_none() {
                    return Ok(None);
                }
                let (va, vb) = (val(*a), val(*b));
                let d = va.shape()[1];
                let mut out = Vec::with_capacity(va.shape()[0]);
                for (i, (ra, rb)) in va.data().chunks(d).zip(vb.data().chunks(d)).enumerate() {
                    let (c, na, nb) = cosine_parts(ra, rb)?;
                    let inv = T::one() / (na * nb);
                    let mut s = T::zero();
                    for j in 0..d {
                        if let Some(ta) = ta {
                            s += (rb[j] * inv - c * ra[j] / (na * na)) * ta.data()[i * d + j];
                        }
                        if let Some(tb) = tb {
                            s += (ra[j] * inv - c * rb[j] / (nb * nb)) * tb.data()[i * d + j];
                        }
                    }
                    out.push(s);
                }
                Some(Tensor::vector(out))
            }
            Op::SoftmaxCe(logits, targets) => t(*logits).map(|tl| {
                let v = val(*logits);
                let c = v.shape()[1];
                let out = v
                    .data()
                    .chunks(c)
                    .zip(tl.data().chunks(c))
                    .zip(targets)
                    .map(|((row, trow), &y)| {
                        let p = softmax_row(row);
                        (0..c)
                            .map(|j| (p[j] - if j == y { T::one() } else { T::zero() }) * trow[j])
                            .sum()
                    })
                    .collect();
                Tensor::vector(out)
            }),
            Op::Clamp(x, lo, hi) => t(*x).map(|tx| tx.zip_map(val(*x), |d, v| if v >= *lo && v <= *hi { d } else { T::zero() })),
            Op::MapEach(x, ops) => t(*x).map(|tx| {
                let n = tx.shape()[0];
                let per = tx.numel() / n;
                let mut out = Tensor::zeros(tx.shape());
                for i in 0..n {
                    let m = &ops[if ops.len() == 1 { 0 } else { i }];
                    m.apply(&tx.data()[i * per..(i + 1) * per], &mut out.data_mut()[i * per..(i + 1) * per]);
                }
                out
            }),
            Op::RepeatBatch(x, n) => t(*x).map(|tx| {
                let mut shape = tx.shape().to_vec();
                shape[0] = *n;
                Tensor::new(shape, tx.data().repeat(*n)).expect("tiled length matches")
            }),
        };
        Ok(out)
    }
}
