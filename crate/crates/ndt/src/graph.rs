use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::{LinearOp, NdtError, Result, Scalar, Tensor};

/// Handle to a recorded value on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool(Var, usize),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    RowCosine(Var, Var),
    SoftmaxCe(Var, Vec<usize>),
    StopGrad(Var),
    Clamp(Var, T, T),
    MapEach(Var, Vec<Arc<dyn LinearOp<T>>>),
    RepeatBatch(Var, usize),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool(..) => "avg_pool2d",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2Norm(..) => "l2_norm",
            Op::RowCosine(..) => "cosine_similarity",
            Op::SoftmaxCe(..) => "softmax_cross_entropy",
            Op::StopGrad(..) => "stop_gradient",
            Op::Clamp(..) => "clamp",
            Op::MapEach(..) => "linear_map",
            Op::RepeatBatch(..) => "repeat_batch",
        }
    }

    pub(crate) fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::RowCosine(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::AvgPool(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Norm(a)
            | Op::SoftmaxCe(a, _)
            | Op::StopGrad(a)
            | Op::Clamp(a, ..)
            | Op::MapEach(a, _)
            | Op::RepeatBatch(a, _) => vec![*a],
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) shape: Vec<usize>,
    /// True when some requires-grad leaf reaches this node without a stop-gradient.
    pub(crate) needs_grad: bool,
}

/// Eagerly evaluated computation with a recorded tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the computation.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) names: HashMap<String, Var>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("inputs", &self.names.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NdtError {
    NdtError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every matmul and convolution evaluated so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    /// Named leaf. Gradients are reported for it by name.
    pub fn input(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push_leaf(value, requires_grad);
        self.names.insert(name.to_string(), v);
        v
    }

    /// Anonymous leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            shape,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = self.compute(&op, |v| &self.nodes[v.0].value)?;
        if !value.is_finite() {
            return Err(NdtError::NonFinite { op: op.name() });
        }
        self.macs += self.op_macs(&op);
        let needs_grad = match op {
            Op::StopGrad(_) | Op::Leaf => false,
            _ => op.operands().iter().any(|o| self.nodes[o.0].needs_grad),
        };
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            value,
            op,
            shape,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_macs(&self, op: &Op<T>) -> u64 {
        match op {
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                (sa[0] * sa[1] * sb[1]) as u64
            }
            Op::Conv2d { x, w, stride, pad, .. } => self
                .conv_geom(*x, *w, *stride, *pad)
                .map_or(0, |g| g.macs()),
            _ => 0,
        }
    }

    pub(crate) fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        conv_geom(sx, sw, stride, pad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Scale(a, -T::one()))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a length-`n` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::AddBias(a, b))
    }

    /// `x W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.push(Op::AvgPool(x, size))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.numel() {
            return Err(mismatch("reshape", &self.nodes[x.0].shape, shape));
        }
        let v = self.push(Op::Reshape(x))?;
        // compute() keeps the operand shape; record the requested one.
        let node = &mut self.nodes[v.0];
        node.value = node.value.reshape(shape)?;
        node.shape = shape.to_vec();
        Ok(v)
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.push(Op::L2Norm(x))
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::RowCosine(a, b))
    }

    /// Cosine similarity of two vectors of equal length, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.nodes[a.0].value.numel(), self.nodes[b.0].value.numel());
        if na != nb {
            return Err(mismatch("cosine_similarity", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let a2 = self.reshape(a, &[1, na])?;
        let b2 = self.reshape(b, &[1, nb])?;
        self.row_cosine(a2, b2)
    }

    /// Per-row softmax cross-entropy of `[n, classes]` logits, giving `[n]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::SoftmaxCe(logits, targets.to_vec()))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.push(Op::StopGrad(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.push(Op::Clamp(x, lo, hi))
    }

    /// Applies `ops[i]` to sample `i` of a batch; a single op is shared by all samples.
    pub fn map_each(&mut self, x: Var, ops: Vec<Arc<dyn LinearOp<T>>>) -> Result<Var> {
        self.push(Op::MapEach(x, ops))
    }

    /// Tiles a batch-of-one tensor `n` times along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        self.push(Op::RepeatBatch(x, n))
    }

    /// Forward rule of every primitive. `val` resolves operands, which lets
    /// [`Graph::replay`] re-run the tape against recomputed values.
    pub(crate) fn compute<'a>(&'a self, op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
        let name = op.name();
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() != tb.shape() {
                    return Err(mismatch(name, ta.shape(), tb.shape()));
                }
                match op {
                    Op::Add(..) => ta.zip_map(tb, |x, y| x + y),
                    Op::Sub(..) => ta.zip_map(tb, |x, y| x - y),
                    _ => ta.zip_map(tb, |x, y| x * y),
                }
            }
            Op::Scale(a, s) => val(*a).scale(*s),
            Op::AddScalar(a, s) => val(*a).map(|v| v + *s),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(mismatch(name, sa, sb));
                }
                let mut out = Tensor::zeros(&[sa[0], sb[1]]);
                kernels::matmul(sa[0], sa[1], sb[1], ta.data(), tb.data(), out.data_mut());
                out
            }
            Op::AddBias(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = *ta.shape().last().unwrap_or(&0);
                if tb.shape() != [n] {
                    return Err(mismatch(name, ta.shape(), tb.shape()));
                }
                let mut out = ta.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, &bv) in row.iter_mut().zip(tb.data()) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let g = conv_geom(tx.shape(), tw.shape(), *stride, *pad)?;
                let bias = match b {
                    Some(b) => {
                        let tb = val(*b);
                        if tb.shape() != [g.o] {
                            return Err(mismatch(name, tw.shape(), tb.shape()));
                        }
                        Some(tb.data())
                    }
                    None => None,
                };
                let mut out = Tensor::zeros(&[g.n, g.o, g.ho, g.wo]);
                kernels::conv2d_forward(&g, tx.data(), tw.data(), bias, out.data_mut());
                out
            }
            Op::AvgPool(x, size) => {
                let tx = val(*x);
                let s = tx.shape();
                if s.len() != 4 || *size == 0 || !s[2].is_multiple_of(*size) || !s[3].is_multiple_of(*size) {
                    return Err(NdtError::Invalid {
                        op: name,
                        msg: format!("shape {s:?} not divisible into {size}x{size} windows"),
                    });
                }
                let mut out = Tensor::zeros(&[s[0], s[1], s[2] / size, s[3] / size]);
                kernels::avg_pool_forward(s[0] * s[1], s[2], s[3], *size, tx.data(), out.data_mut());
                out
            }
            Op::Relu(x) => val(*x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Op::Reshape(x) | Op::StopGrad(x) => val(*x).clone(),
            Op::Sum(x) => Tensor::scalar(val(*x).data().iter().copied().sum()),
            Op::Mean(x) => {
                let t = val(*x);
                Tensor::scalar(t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64))
            }
            Op::L2Norm(x) => Tensor::scalar(val(*x).norm()),
            Op::RowCosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() != tb.shape() || ta.shape().len() != 2 {
                    return Err(mismatch(name, ta.shape(), tb.shape()));
                }
                let d = ta.shape()[1];
                let mut out = Vec::with_capacity(ta.shape()[0]);
                for (ra, rb) in ta.data().chunks(d).zip(tb.data().chunks(d)) {
                    let (c, ..) = cosine_parts(ra, rb)?;
                    out.push(c);
                }
                Tensor::vector(out)
            }
            Op::SoftmaxCe(logits, targets) => {
                let t = val(*logits);
                let s = t.shape();
                if s.len() != 2 || s[0] != targets.len() {
                    return Err(mismatch(name, s, &[targets.len()]));
                }
                if let Some(&bad) = targets.iter().find(|&&c| c >= s[1]) {
                    return Err(NdtError::Invalid {
                        op: name,
                        msg: format!("target class {bad} out of range for {} classes", s[1]),
                    });
                }
                let out = t
                    .data()
                    .chunks(s[1])
                    .zip(targets)
                    .map(|(row, &c)| log_sum_exp(row) - row[c])
                    .collect();
                Tensor::vector(out)
            }
            Op::Clamp(x, lo, hi) => val(*x).map(|v| v.max(*lo).min(*hi)),
            Op::MapEach(x, ops) => {
                let tx = val(*x);
                let n = tx.shape()[0];
                let per = tx.numel() / n;
                if ops.len() != n && ops.len() != 1 {
                    return Err(NdtError::Invalid {
                        op: name,
                        msg: format!("{} maps for a batch of {n}", ops.len()),
                    });
                }
                let mut out = Tensor::zeros(tx.shape());
                for i in 0..n {
                    let m = &ops[if ops.len() == 1 { 0 } else { i }];
                    if m.dim() != per {
                        return Err(mismatch(name, tx.shape(), &[m.dim()]));
                    }
                    m.apply(&tx.data()[i * per..(i + 1) * per], &mut out.data_mut()[i * per..(i + 1) * per]);
                }
                out
            }
            Op::RepeatBatch(x, n) => {
                let tx = val(*x);
                if tx.shape()[0] != 1 || *n == 0 {
                    return Err(mismatch(name, tx.shape(), &[*n]));
                }
                let mut shape = tx.shape().to_vec();
                shape[0] = *n;
                let data = tx.data().repeat(*n);
                Tensor::new(shape, data)?
            }
        })
    }

    /// Re-evaluates every non-leaf node from the stored leaves and checks that
    /// each recomputed value matches the recorded one bit for bit.
    pub fn replay(&self) -> Result<bool> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let t = self.compute(op, |v| &values[v.0])?;
                    t.reshape(&node.shape)?
                }
            };
            values.push(v);
        }
        Ok(values
            .iter()
            .zip(&self.nodes)
            .all(|(v, n)| v.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits_eq(b))))
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // Same value and same sign of zero.
        self == other && self.is_sign_negative() == other.is_sign_negative()
    }
}

pub(crate) fn conv_geom(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(mismatch("conv2d", sx, sw));
    }
    let ho = kernels::conv2d_output_dim(sx[2], sw[2], stride, pad);
    let wo = kernels::conv2d_output_dim(sx[3], sw[3], stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho,
            wo,
        }),
        _ => Err(mismatch("conv2d", sx, sw)),
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// (cos, |a|, |b|) of two rows.
pub(crate) fn cosine_parts<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, T, T)> {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let floor = T::of(1e-12);
    if na <= floor || nb <= floor {
        return Err(NdtError::ZeroNorm);
    }
    Ok((dot / (na * nb), na, nb))
}
