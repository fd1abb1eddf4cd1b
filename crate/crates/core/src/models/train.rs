use ndt::{Graph64, NdtError, Tensor64};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Params, Sequential};
use super::nets::{argmax_rows, classify, ClassHead, ClassifierNet, SslEncoder, TrainRecord};
use crate::augment::{default_policy, sample_augmentation, AugmentationSpec};
use crate::data::LabeledImages;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub train: TrainConfig,
    pub policy: Vec<AugmentationSpec>,
    /// Predictor learning rate as a multiple of `train.lr`.
    pub predictor_lr_scale: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 20,
                lr: 0.02,
                weight_decay: 2e-3,
                ..TrainConfig::default()
            },
            policy: default_policy(),
            // Without normalization layers the encoder collapses unless the
            // predictor adapts much faster than the encoder.
            predictor_lr_scale: 40.0,
        }
    }
}

/// SGD with heavy-ball momentum and optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v = mu v + g + wd p; p -= lr v` over parameter tensors in a fixed order.
    pub fn step(&mut self, params: &mut [&mut Tensor64], grads: &[&Tensor64]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

fn diverged(step: usize, loss: f64) -> Error {
    Error::Divergence { step, loss }
}

/// Maps non-finite tape values during a training step to a divergence error.
fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    match r {
        Err(Error::Tensor(NdtError::NonFinite { .. } | NdtError::NonFiniteInput { .. })) => Err(diverged(step, f64::NAN)),
        other => other,
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Classifier accuracy over a labeled set, evaluated in chunks.
pub fn classifier_accuracy(net: &ClassifierNet, set: &LabeledImages) -> Result<f64> {
    let mut pred = Vec::with_capacity(set.len());
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(256) {
        pred.extend(classify(net, &set.batch(chunk))?.labels);
    }
    Ok(accuracy(&pred, &set.labels))
}

fn check_classes(set: &LabeledImages) -> Result<()> {
    let mut seen = vec![false; set.num_classes.max(1)];
    for &l in &set.labels {
        seen[l] = true;
    }
    let present = seen.iter().filter(|&&s| s).count();
    if set.num_classes < 2 || present < 2 {
        return Err(Error::TooFewClasses(present));
    }
    Ok(())
}

fn cross_entropy_step(
    net: &Sequential,
    x: Tensor64,
    labels: &[usize],
    step: usize,
) -> Result<(f64, Vec<Tensor64>)> {
    let mut g = Graph64::new();
    let xv = g.constant(x);
    let logits = at_step(step, net.forward(&mut g, xv, Params::Trainable("p")))?;
    let ce = at_step(step, g.softmax_cross_entropy(logits, labels).map_err(Error::from))?;
    let loss = at_step(step, g.mean(ce).map_err(Error::from))?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(diverged(step, value));
    }
    let mut grads = g.backward(loss)?;
    let grads = net.param_names("p").iter().map(|n| grads.take(n).expect("trainable")).collect();
    Ok((value, grads))
}

fn mean_ce(net: &Sequential, set: &LabeledImages) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let mut g = Graph64::new();
        let xv = g.constant(set.batch(chunk));
        let logits = net.forward(&mut g, xv, Params::Frozen)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let ce = g.softmax_cross_entropy(logits, &labels)?;
        let s = g.sum(ce)?;
        total += g.value(s).item();
    }
    Ok(total / set.len().max(1) as f64)
}

/// Mini-batch SGD on softmax cross-entropy over `net`, in place.
fn fit_cross_entropy(net: &mut Sequential, train: &LabeledImages, cfg: &TrainConfig, record: &mut TrainRecord) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut opt = Sgd::new(cfg);
    record.initial_loss = Some(mean_ce(net, train)?);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let order = batches(train.len(), cfg.batch, &mut rng);
        for b in &order {
            let labels: Vec<usize> = b.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = cross_entropy_step(net, train.batch(b), &labels, step)?;
            let mut ps: Vec<&mut Tensor64> = net.params.iter_mut().collect();
            opt.step(&mut ps, &grads.iter().collect::<Vec<_>>());
            if net.params.iter().any(|p| !p.is_finite()) {
                return Err(diverged(step, loss));
            }
            sum += loss * b.len() as f64;
            step += 1;
        }
        record.losses.push(sum / train.len() as f64);
    }
    record.epochs = cfg.epochs;
    Ok(())
}

/// Trains the target classifier; accuracies are recorded on `train` and `test`.
pub fn train_classifier(train: &LabeledImages, test: &LabeledImages, cfg: &TrainConfig) -> Result<ClassifierNet> {
    check_classes(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ClassifierNet::init(train.image_shape(), train.num_classes, &mut rng)?;
    let mut record = TrainRecord::default();
    fit_cross_entropy(&mut net.net, train, cfg, &mut record)?;
    record.train_accuracy = Some(classifier_accuracy(&net, train)?);
    if !test.is_empty() {
        record.test_accuracy = Some(classifier_accuracy(&net, test)?);
    }
    net.record = record;
    Ok(net)
}

/// Mean per-coordinate standard deviation of L2-normalized embeddings.
pub fn embedding_spread(z: &Tensor64) -> f64 {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let rows: Vec<Vec<f64>> = z
        .data()
        .chunks(d)
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Collapse threshold on [`embedding_spread`].
pub const COLLAPSE_STD: f64 = 1e-4;

fn two_views(set: &LabeledImages, idx: &[usize], policy: &[AugmentationSpec], rng: &mut ChaCha8Rng) -> Result<(Tensor64, Tensor64)> {
    let shape = set.image_shape();
    let mut views = (Vec::new(), Vec::new());
    for &i in idx {
        let x = set.image(i);
        views.0.push(sample_augmentation(policy, shape, rng)?.apply(&x));
        views.1.push(sample_augmentation(policy, shape, rng)?.apply(&x));
    }
    let stack = |v: Vec<Tensor64>| -> Result<Tensor64> {
        let t = Tensor64::stack(&v)?;
        Ok(t.reshape(&[idx.len(), shape[0], shape[1], shape[2]])?)
    };
    Ok((stack(views.0)?, stack(views.1)?))
}

/// SimSiam loss `-1/2 [cos(p1, sg(z2)) + cos(p2, sg(z1))]` and its gradients
/// for trunk, projector and predictor parameters, in that order.
fn simsiam_step(enc: &SslEncoder, v1: Tensor64, v2: Tensor64, step: usize) -> Result<(f64, Vec<Tensor64>)> {
    let run = |g: &mut Graph64| -> Result<ndt::Var> {
        let pt = enc.trunk.bind(g, Params::Trainable("f"));
        let pj = enc.projector.bind(g, Params::Trainable("h"));
        let pp = enc.predictor.bind(g, Params::Trainable("q"));
        let branch = |x: Tensor64, g: &mut Graph64| -> Result<(ndt::Var, ndt::Var)> {
            let xv = g.constant(x);
            let f = enc.trunk.forward_with(g, xv, &pt)?;
            let z = enc.projector.forward_with(g, f, &pj)?;
            let p = enc.predictor.forward_with(g, z, &pp)?;
            Ok((z, p))
        };
        let (z1, p1) = branch(v1.clone(), g)?;
        let (z2, p2) = branch(v2.clone(), g)?;
        let s1 = g.stop_gradient(z1)?;
        let s2 = g.stop_gradient(z2)?;
        let c1 = g.row_cosine(p1, s2)?;
        let c2 = g.row_cosine(p2, s1)?;
        let m1 = g.mean(c1)?;
        let m2 = g.mean(c2)?;
        let s = g.add(m1, m2)?;
        Ok(g.scale(s, -0.5)?)
    };
    let mut g = Graph64::new();
    let loss = at_step(step, run(&mut g))?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let mut out = Vec::new();
    for (net, prefix) in [(&enc.trunk, "f"), (&enc.projector, "h"), (&enc.predictor, "q")] {
        for n in net.param_names(prefix) {
            out.push(grads.take(&n).expect("trainable"));
        }
    }
    Ok((value, out))
}

fn ssl_loss_on(enc: &SslEncoder, set: &LabeledImages, policy: &[AugmentationSpec], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..set.len().min(256)).collect();
    let (v1, v2) = two_views(set, &idx, policy, &mut rng)?;
    Ok(simsiam_step(enc, v1, v2, 0)?.0)
}

/// Trains the encoder with the SimSiam objective on two augmented views.
pub fn train_ssl(train: &LabeledImages, cfg: &SslConfig) -> Result<SslEncoder> {
    if cfg.policy.is_empty() {
        return Err(Error::EmptyPolicy);
    }
    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut enc = SslEncoder::init(train.image_shape(), &mut rng)?;
    let mut opt = Sgd::new(tc);
    let mut opt_pred = Sgd::new(&TrainConfig {
        lr: tc.lr * cfg.predictor_lr_scale,
        ..tc.clone()
    });
    let n_enc = enc.trunk.params.len() + enc.projector.params.len();
    let mut record = TrainRecord {
        initial_loss: Some(ssl_loss_on(&enc, train, &cfg.policy, tc.seed ^ 0xe7a1)?),
        ..TrainRecord::default()
    };
    let mut step = 0;
    for _ in 0..tc.epochs {
        let mut sum = 0.0;
        for b in batches(train.len(), tc.batch, &mut rng) {
            let (v1, v2) = two_views(train, &b, &cfg.policy, &mut rng)?;
            let (loss, grads) = simsiam_step(&enc, v1, v2, step)?;
            if !loss.is_finite() {
                return Err(diverged(step, loss));
            }
            let grads: Vec<&Tensor64> = grads.iter().collect();
            let mut ps: Vec<&mut Tensor64> = enc.trunk.params.iter_mut().chain(enc.projector.params.iter_mut()).collect();
            opt.step(&mut ps, &grads[..n_enc]);
            let mut ps: Vec<&mut Tensor64> = enc.predictor.params.iter_mut().collect();
            opt_pred.step(&mut ps, &grads[n_enc..]);
            sum += loss * b.len() as f64;
            step += 1;
        }
        record.losses.push(sum / train.len() as f64);
        let probe = train.take(256);
        let z = super::nets::represent(&enc, &probe.images).map_err(|e| match e {
            Error::ZeroEmbedding => Error::Collapse { std: 0.0 },
            e => e,
        })?;
        let spread = embedding_spread(&z);
        if spread < COLLAPSE_STD {
            return Err(Error::Collapse { std: spread });
        }
    }
    record.epochs = tc.epochs;
    enc.record = record;
    Ok(enc)
}

/// Final-epoch SimSiam loss on a fixed probe (same views as the initial loss).
pub fn ssl_probe_loss(enc: &SslEncoder, set: &LabeledImages, cfg: &SslConfig) -> Result<f64> {
    ssl_loss_on(enc, set, &cfg.policy, cfg.train.seed ^ 0xe7a1)
}

fn feature_set(enc: &SslEncoder, set: &LabeledImages) -> Result<LabeledImages> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(256) {
        parts.push(enc.predict_features(&set.batch(chunk))?);
    }
    let feats = Tensor64::stack(&parts)?;
    let d = feats.shape()[1];
    Ok(LabeledImages {
        images: feats.reshape(&[set.len(), d, 1, 1])?,
        labels: set.labels.clone(),
        num_classes: set.num_classes,
    })
}

fn head_accuracy(head: &ClassHead, feats: &LabeledImages) -> Result<f64> {
    let mut g = Graph64::new();
    let n = feats.len();
    let x = g.constant(feats.images.reshape(&[n, feats.images.numel() / n])?);
    let y = head.logits(&mut g, x)?;
    Ok(accuracy(&argmax_rows(g.value(y)), &feats.labels))
}

/// Trains a linear head on frozen trunk features. The trunk is verified
/// unchanged by fingerprint afterwards.
pub fn train_class_head(
    encoder: &SslEncoder,
    train: &LabeledImages,
    test: &LabeledImages,
    cfg: &TrainConfig,
) -> Result<ClassHead> {
    check_classes(train)?;
    let before = encoder.trunk.fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ClassHead::init(train.num_classes, &mut rng)?;
    let flat = |s: LabeledImages| -> Result<LabeledImages> {
        let n = s.len();
        let d = s.images.numel() / n.max(1);
        Ok(LabeledImages {
            images: s.images.reshape(&[n, d])?,
            ..s
        })
    };
    let train_f = feature_set(encoder, train)?;
    let mut record = TrainRecord::default();
    fit_cross_entropy(&mut head.layer, &flat(train_f.clone())?, cfg, &mut record)?;
    if encoder.trunk.fingerprint() != before {
        return Err(Error::TrunkMutated);
    }
    record.train_accuracy = Some(head_accuracy(&head, &train_f)?);
    if !test.is_empty() {
        record.test_accuracy = Some(head_accuracy(&head, &feature_set(encoder, test)?)?);
    }
    head.record = record;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let cfg = TrainConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0, ..Default::default() };
        let mut opt = Sgd::new(&cfg);
        let mut p = Tensor64::vector(vec![1.0]);
        let g = Tensor64::vector(vec![2.0]);
        opt.step(&mut [&mut p], &[&g]);
        assert!((p.data()[0] - 0.8).abs() < 1e-12);
        opt.step(&mut [&mut p], &[&g]);
        // v = 0.9*2 + 2 = 3.8
        assert!((p.data()[0] - (0.8 - 0.38)).abs() < 1e-12);
    }

    #[test]
    fn spread_of_identical_rows_is_zero() {
        let z = Tensor64::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(embedding_spread(&z) < 1e-12);
    }
}
