use ndt::{Graph64, Tensor64, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::Result;

/// One layer of a [`Sequential`] network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, stride 1.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        pad: usize,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    /// Shapes of this layer's parameter tensors (weight, bias).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]]
            }
            LayerSpec::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            _ => vec![],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match *self {
            LayerSpec::Conv { out_ch, kernel, pad, .. } => {
                vec![out_ch, input[1] + 2 * pad + 1 - kernel, input[2] + 2 * pad + 1 - kernel]
            }
            LayerSpec::AvgPool { size } => vec![input[0], input[1] / size, input[2] / size],
            LayerSpec::Flatten => vec![input.iter().product()],
            LayerSpec::Dense { outputs, .. } => vec![outputs],
            LayerSpec::Relu => input.to_vec(),
        }
    }

    /// Analytic per-sample FLOPs: dense `2*in*out`, conv `2*k*k*c_in*c_out*h_out*w_out`.
    pub fn flops(&self, input: &[usize]) -> u64 {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                let out = self.output_shape(input);
                2 * (kernel * kernel * in_ch * out_ch * out[1] * out[2]) as u64
            }
            LayerSpec::Dense { inputs, outputs } => 2 * (inputs * outputs) as u64,
            _ => 0,
        }
    }
}

/// Whether forward passes register parameters as gradient-carrying inputs.
#[derive(Debug, Clone, Copy)]
pub enum Params<'a> {
    Frozen,
    /// Trainable under the given name prefix; parameter `j` is named `"{prefix}.{j}"`.
    Trainable(&'a str),
}

/// Layer stack with its parameters, stored in layer order as (weight, bias) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Tensor64>,
}

impl Sequential {
    /// He-uniform weights, zero biases.
    pub fn init(layers: Vec<LayerSpec>, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for layer in &layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let fan_in: usize = shapes[0].iter().product::<usize>() / match layer {
                LayerSpec::Conv { out_ch, .. } => *out_ch,
                LayerSpec::Dense { outputs, .. } => *outputs,
                _ => 1,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shapes[0].iter().product();
            let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor64::new(shapes[0].clone(), w).expect("shape from spec"));
            params.push(Tensor64::zeros(&shapes[1]));
        }
        Self { layers, params }
    }

    /// Rebuilds a network from stored parameters, checking their shapes.
    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<Tensor64>) -> std::result::Result<Self, String> {
        let want: Vec<Vec<usize>> = layers.iter().flat_map(LayerSpec::param_shapes).collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if want != got {
            return Err(format!("expected parameter shapes {want:?}, got {got:?}"));
        }
        Ok(Self { layers, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor64::numel).sum()
    }

    pub fn param_count_of(layers: &[LayerSpec]) -> usize {
        layers
            .iter()
            .flat_map(LayerSpec::param_shapes)
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        self.layers.iter().fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    pub fn flops(&self, input: &[usize]) -> u64 {
        let mut shape = input.to_vec();
        let mut total = 0;
        for l in &self.layers {
            total += l.flops(&shape);
            shape = l.output_shape(&shape);
        }
        total
    }

    pub fn forward(&self, g: &mut Graph64, x: Var, mode: Params<'_>) -> Result<Var> {
        let params = self.bind(g, mode);
        self.forward_with(g, x, &params)
    }

    /// Registers every parameter on the tape, in storage order.
    pub fn bind(&self, g: &mut Graph64, mode: Params<'_>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(j, p)| match mode {
                Params::Frozen => g.constant(p.clone()),
                Params::Trainable(prefix) => g.input(&format!("{prefix}.{j}"), p.clone(), true),
            })
            .collect()
    }

    /// Forward pass with parameters already bound by [`Sequential::bind`].
    pub fn forward_with(&self, g: &mut Graph64, x: Var, params: &[Var]) -> Result<Var> {
        let mut h = x;
        let mut p = 0;
        for layer in &self.layers {
            h = match *layer {
                LayerSpec::Conv { pad, .. } => {
                    p += 2;
                    g.conv2d(h, params[p - 2], Some(params[p - 1]), 1, pad)?
                }
                LayerSpec::Dense { .. } => {
                    p += 2;
                    g.linear(h, params[p - 2], params[p - 1])?
                }
                LayerSpec::Relu => g.relu(h)?,
                LayerSpec::AvgPool { size } => g.avg_pool2d(h, size)?,
                LayerSpec::Flatten => g.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Gradient names matching [`Params::Trainable`] registration.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.params.len()).map(|j| format!("{prefix}.{j}")).collect()
    }

    /// FNV-1a over the parameter bit patterns; detects any change to any value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::data::Fnv1a::new();
        for p in &self.params {
            for v in p.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Multiplies every weight and bias by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.scale(factor)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_layer_counts() {
        let l = LayerSpec::Dense { inputs: 4, outputs: 3 };
        assert_eq!(Sequential::param_count_of(std::slice::from_ref(&l)), 15);
        assert_eq!(l.flops(&[4]), 24);
    }

    #[test]
    fn forward_shapes_follow_specs() {
        let layers = vec![
            LayerSpec::Conv { in_ch: 3, out_ch: 4, kernel: 3, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 4 * 4 * 4, outputs: 5 },
        ];
        let net = Sequential::init(layers, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(net.output_shape(&[3, 8, 8]), vec![5]);
        let mut g = Graph64::new();
        let x = g.constant(Tensor64::full(&[2, 3, 8, 8], 0.5));
        let y = net.forward(&mut g, x, Params::Frozen).unwrap();
        assert_eq!(g.shape(y), &[2, 5]);
        // Measured multiply-accumulates equal half the analytic FLOPs per sample.
        assert_eq!(2 * g.macs(), 2 * net.flops(&[3, 8, 8]));
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let layers = vec![LayerSpec::Dense { inputs: 2, outputs: 2 }];
        assert!(Sequential::from_parts(layers.clone(), vec![Tensor64::zeros(&[2, 2]), Tensor64::zeros(&[2])]).is_ok());
        assert!(Sequential::from_parts(layers, vec![Tensor64::zeros(&[2, 3]), Tensor64::zeros(&[3])]).is_err());
    }
}
