use ndt::{Graph64, Tensor64, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerSpec, Params, Sequential};
use crate::{Error, Result};

/// Trunk feature dimension.
pub const FEATURE_DIM: usize = 64;
/// Projector (embedding) dimension.
pub const EMBED_DIM: usize = 32;
const PREDICTOR_HIDDEN: usize = 16;

/// Training history kept alongside a trained network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Loss before the first update.
    pub initial_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

fn conv_stack(input: [usize; 3]) -> Vec<LayerSpec> {
    let [c, h, w] = input;
    vec![
        LayerSpec::Conv { in_ch: c, out_ch: 8, kernel: 3, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::AvgPool { size: 2 },
        LayerSpec::Conv { in_ch: 8, out_ch: 16, kernel: 3, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::AvgPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 16 * (h / 4) * (w / 4), outputs: FEATURE_DIM },
        LayerSpec::Relu,
    ]
}

fn check_input(input: [usize; 3]) -> Result<()> {
    if input[1] < 4 || input[2] < 4 || !input[1].is_multiple_of(4) || !input[2].is_multiple_of(4) {
        return Err(Error::Config(format!("image side must be a positive multiple of 4, got {input:?}")));
    }
    Ok(())
}

fn check_batch(x: &Tensor64, input: [usize; 3]) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != input {
        return Err(Error::InputShape {
            want: input.to_vec(),
            got: s.to_vec(),
        });
    }
    Ok(())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor64) -> Vec<usize> {
    let cols = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Target classifier: two conv blocks and two dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet {
    pub net: Sequential,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub record: TrainRecord,
}

impl ClassifierNet {
    pub fn layers(input: [usize; 3], num_classes: usize) -> Vec<LayerSpec> {
        let mut layers = conv_stack(input);
        layers.push(LayerSpec::Dense { inputs: FEATURE_DIM, outputs: num_classes });
        layers
    }

    pub fn init(input: [usize; 3], num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        check_input(input)?;
        if num_classes < 2 {
            return Err(Error::TooFewClasses(num_classes));
        }
        Ok(Self {
            net: Sequential::init(Self::layers(input, num_classes), rng),
            input_shape: input,
            num_classes,
            record: TrainRecord::default(),
        })
    }

    pub fn logits(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        self.net.forward(g, x, Params::Frozen)
    }

    /// Logits for a batch `[n, c, h, w]`.
    pub fn predict_logits(&self, x: &Tensor64) -> Result<Tensor64> {
        check_batch(x, self.input_shape)?;
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let y = self.logits(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<usize>,
    /// `[n, num_classes]`.
    pub logits: Tensor64,
}

/// Labels and logits for a batch; `label = argmax(logits)`, lowest index on ties.
pub fn classify(net: &ClassifierNet, x: &Tensor64) -> Result<Classification> {
    let logits = net.predict_logits(x)?;
    Ok(Classification {
        labels: argmax_rows(&logits),
        logits,
    })
}

/// Self-supervised encoder: trunk `f`, projector `h`, and the training-only predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct SslEncoder {
    pub trunk: Sequential,
    pub projector: Sequential,
    pub predictor: Sequential,
    pub input_shape: [usize; 3],
    pub record: TrainRecord,
}

impl SslEncoder {
    pub fn trunk_layers(input: [usize; 3]) -> Vec<LayerSpec> {
        conv_stack(input)
    }

    pub fn projector_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { inputs: FEATURE_DIM, outputs: FEATURE_DIM },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: FEATURE_DIM, outputs: FEATURE_DIM },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: FEATURE_DIM, outputs: EMBED_DIM },
        ]
    }

    pub fn predictor_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { inputs: EMBED_DIM, outputs: PREDICTOR_HIDDEN },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: PREDICTOR_HIDDEN, outputs: EMBED_DIM },
        ]
    }

    pub fn init(input: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        check_input(input)?;
        Ok(Self {
            trunk: Sequential::init(Self::trunk_layers(input), rng),
            projector: Sequential::init(Self::projector_layers(), rng),
            predictor: Sequential::init(Self::predictor_layers(), rng),
            input_shape: input,
            record: TrainRecord::default(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.output_shape(&[FEATURE_DIM])[0]
    }

    pub fn features(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        self.trunk.forward(g, x, Params::Frozen)
    }

    /// `h(f(x))` on the tape.
    pub fn embed(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let f = self.features(g, x)?;
        self.projector.forward(g, f, Params::Frozen)
    }

    /// Trunk features for a batch.
    pub fn predict_features(&self, x: &Tensor64) -> Result<Tensor64> {
        check_batch(x, self.input_shape)?;
        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let y = self.features(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// `h(f(x))` for a batch, one embedding per row; zero-norm embeddings are an error.
pub fn represent(encoder: &SslEncoder, x: &Tensor64) -> Result<Tensor64> {
    check_batch(x, encoder.input_shape)?;
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let z = encoder.embed(&mut g, xv)?;
    let z = g.value(z).clone();
    let d = z.shape()[1];
    if z.data().chunks(d).any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12) {
        return Err(Error::ZeroEmbedding);
    }
    Ok(z)
}

/// Linear classification head on trunk features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    pub layer: Sequential,
    pub num_classes: usize,
    pub record: TrainRecord,
}

impl ClassHead {
    pub fn layers(num_classes: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::Dense { inputs: FEATURE_DIM, outputs: num_classes }]
    }

    pub fn init(num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::TooFewClasses(num_classes));
        }
        Ok(Self {
            layer: Sequential::init(Self::layers(num_classes), rng),
            num_classes,
            record: TrainRecord::default(),
        })
    }

    pub fn logits(&self, g: &mut Graph64, features: Var) -> Result<Var> {
        self.layer.forward(g, features, Params::Frozen)
    }
}

/// `argmax(g(f(x)))` for a batch, lowest index on ties.
pub fn ssl_predict(encoder: &SslEncoder, head: &ClassHead, x: &Tensor64) -> Result<Vec<usize>> {
    check_batch(x, encoder.input_shape)?;
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let f = encoder.features(&mut g, xv)?;
    let y = head.logits(&mut g, f)?;
    Ok(argmax_rows(g.value(y)))
}

/// The four trained networks used by detection and attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub classifier: ClassifierNet,
    pub encoder: SslEncoder,
    pub head: ClassHead,
}

impl ModelBundle {
    pub fn input_shape(&self) -> [usize; 3] {
        self.classifier.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    /// `g(f(x))` on the tape.
    pub fn ssl_logits(&self, g: &mut Graph64, x: Var) -> Result<Var> {
        let f = self.encoder.features(g, x)?;
        self.head.logits(g, f)
    }

    /// Parameter count of every network used at detection time (the
    /// predictor is training-only and excluded).
    pub fn param_count(&self) -> usize {
        self.classifier.net.param_count()
            + self.encoder.trunk.param_count()
            + self.encoder.projector.param_count()
            + self.head.layer.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_ties_take_lowest_index() {
        let t = Tensor64::new(vec![3, 2], vec![0.1, 0.9, 0.5, 0.5, 2.0, -1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0, 0]);
    }

    #[test]
    fn batch_labels_match_per_sample_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ClassifierNet::init([3, 8, 8], 3, &mut rng).unwrap();
        let x = Tensor64::new(vec![5, 3, 8, 8], (0..5 * 192).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let all = classify(&net, &x).unwrap();
        for i in 0..5 {
            assert_eq!(classify(&net, &x.row(i)).unwrap().labels[0], all.labels[i]);
        }
        let bad = Tensor64::zeros(&[1, 3, 4, 4]);
        assert!(matches!(classify(&net, &bad), Err(Error::InputShape { .. })));
    }

    #[test]
    fn embedding_has_projector_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = SslEncoder::init([3, 8, 8], &mut rng).unwrap();
        let x = Tensor64::full(&[2, 3, 8, 8], 0.3);
        let z = represent(&enc, &x).unwrap();
        assert_eq!(z.shape(), &[2, EMBED_DIM]);
        assert_eq!(z, represent(&enc, &x).unwrap());
    }
}
