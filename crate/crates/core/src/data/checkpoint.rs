use std::path::Path;

use ndt::Tensor64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{fnv1a, write_atomic};
use crate::models::{ClassHead, ClassifierNet, LayerSpec, ModelBundle, Sequential, SslEncoder, TrainRecord};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCK";

/// JSON document at the head of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub topology: Value,
    pub seed: u64,
    /// Training configuration that produced the parameters.
    pub config: Value,
    /// Creation metadata (tool version, training records). No timestamps, so
    /// identical runs write identical bytes.
    pub metadata: Value,
}

/// A model that can be written as a header plus a flat parameter blob.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    fn topology(&self) -> Value;
    /// Parameters in blob order.
    fn parameters(&self) -> Vec<&Tensor64>;
    fn records(&self) -> Value;
    fn rebuild(topology: &Value, records: &Value, flat: &[f64]) -> Result<Self>;
}

/// Header and 32-bit parameter blob.
///
/// ```text
/// "ADCK" | header_len u32 | header json | blob [f32 LE] | fnv1a64(blob) u64
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blob: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model<M: Checkpointable>(model: &M, seed: u64, config: Value) -> Self {
        let blob = model
            .parameters()
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v as f32))
            .collect();
        Self {
            header: CheckpointHeader {
                kind: M::KIND.to_string(),
                topology: model.topology(),
                seed,
                config,
                metadata: json!({
                    "created_by": concat!("augdetect ", env!("CARGO_PKG_VERSION")),
                    "records": model.records(),
                }),
            },
            blob,
        }
    }

    pub fn into_model<M: Checkpointable>(&self) -> Result<M> {
        if self.header.kind != M::KIND {
            return Err(Error::TopologyMismatch(format!("expected a {} checkpoint, found {}", M::KIND, self.header.kind)));
        }
        let flat: Vec<f64> = self.blob.iter().map(|&v| v as f64).collect();
        M::rebuild(&self.header.topology, &self.header.metadata["records"], &flat)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let start = out.len();
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = fnv1a(&out[start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = 8 + hlen;
        if bytes.len() < body + 8 {
            return Err(Error::Truncated(format!("checkpoint of {} bytes is shorter than its header", bytes.len())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body])?;
        let blob_bytes = &bytes[body..bytes.len() - 8];
        if !blob_bytes.len().is_multiple_of(4) {
            return Err(Error::Truncated("blob length is not a multiple of 4".into()));
        }
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(blob_bytes) != stored {
            return Err(Error::Checksum);
        }
        let blob = blob_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { header, blob })
    }
}

pub fn save_checkpoint<M: Checkpointable>(path: &Path, model: &M, seed: u64, config: Value) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model, seed, config).to_bytes()?)
}

pub fn load_checkpoint<M: Checkpointable>(path: &Path) -> Result<(M, CheckpointHeader)> {
    let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
    let model = ck.into_model()?;
    Ok((model, ck.header))
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    serde_json::from_value(v.get(key).cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::TopologyMismatch(format!("field `{key}`: {e}")))
}

fn record(v: &Value, key: &str) -> TrainRecord {
    v.get(key).and_then(|r| serde_json::from_value(r.clone()).ok()).unwrap_or_default()
}

/// Consumes the next block of parameters for `layers` from `flat`.
fn take_seq(layers: Vec<LayerSpec>, flat: &mut &[f64]) -> Result<Sequential> {
    let mut params = Vec::new();
    for shape in layers.iter().flat_map(LayerSpec::param_shapes) {
        let n: usize = shape.iter().product();
        if flat.len() < n {
            return Err(Error::TopologyMismatch("topology needs more parameters than the blob holds".into()));
        }
        params.push(Tensor64::new(shape, flat[..n].to_vec())?);
        *flat = &flat[n..];
    }
    Sequential::from_parts(layers, params).map_err(Error::TopologyMismatch)
}

fn finish<T>(value: T, rest: &[f64]) -> Result<T> {
    if rest.is_empty() {
        Ok(value)
    } else {
        Err(Error::TopologyMismatch(format!("{} blob values left over after the declared topology", rest.len())))
    }
}

fn classifier_parts(t: &Value, rec: TrainRecord, flat: &mut &[f64]) -> Result<ClassifierNet> {
    let input_shape: [usize; 3] = field(t, "input_shape")?;
    let num_classes: usize = field(t, "num_classes")?;
    let net = take_seq(field(t, "layers")?, flat)?;
    if net.output_shape(&input_shape) != [num_classes] {
        return Err(Error::TopologyMismatch("classifier output does not match num_classes".into()));
    }
    Ok(ClassifierNet { net, input_shape, num_classes, record: rec })
}

fn encoder_parts(t: &Value, rec: TrainRecord, flat: &mut &[f64]) -> Result<SslEncoder> {
    Ok(SslEncoder {
        input_shape: field(t, "input_shape")?,
        trunk: take_seq(field(t, "trunk")?, flat)?,
        projector: take_seq(field(t, "projector")?, flat)?,
        predictor: take_seq(field(t, "predictor")?, flat)?,
        record: rec,
    })
}

fn head_parts(t: &Value, rec: TrainRecord, flat: &mut &[f64]) -> Result<ClassHead> {
    Ok(ClassHead {
        num_classes: field(t, "num_classes")?,
        layer: take_seq(field(t, "layers")?, flat)?,
        record: rec,
    })
}

impl Checkpointable for ClassifierNet {
    const KIND: &'static str = "classifier";

    fn topology(&self) -> Value {
        json!({"input_shape": self.input_shape, "num_classes": self.num_classes, "layers": self.net.layers})
    }

    fn parameters(&self) -> Vec<&Tensor64> {
        self.net.params.iter().collect()
    }

    fn records(&self) -> Value {
        json!({"classifier": self.record})
    }

    fn rebuild(topology: &Value, records: &Value, mut flat: &[f64]) -> Result<Self> {
        let m = classifier_parts(topology, record(records, "classifier"), &mut flat)?;
        finish(m, flat)
    }
}

impl Checkpointable for SslEncoder {
    const KIND: &'static str = "encoder";

    fn topology(&self) -> Value {
        json!({
            "input_shape": self.input_shape,
            "trunk": self.trunk.layers,
            "projector": self.projector.layers,
            "predictor": self.predictor.layers,
        })
    }

    fn parameters(&self) -> Vec<&Tensor64> {
        self.trunk.params.iter().chain(&self.projector.params).chain(&self.predictor.params).collect()
    }

    fn records(&self) -> Value {
        json!({"encoder": self.record})
    }

    fn rebuild(topology: &Value, records: &Value, mut flat: &[f64]) -> Result<Self> {
        let m = encoder_parts(topology, record(records, "encoder"), &mut flat)?;
        finish(m, flat)
    }
}

impl Checkpointable for ClassHead {
    const KIND: &'static str = "head";

    fn topology(&self) -> Value {
        json!({"num_classes": self.num_classes, "layers": self.layer.layers})
    }

    fn parameters(&self) -> Vec<&Tensor64> {
        self.layer.params.iter().collect()
    }

    fn records(&self) -> Value {
        json!({"head": self.record})
    }

    fn rebuild(topology: &Value, records: &Value, mut flat: &[f64]) -> Result<Self> {
        let m = head_parts(topology, record(records, "head"), &mut flat)?;
        finish(m, flat)
    }
}

impl Checkpointable for ModelBundle {
    const KIND: &'static str = "bundle";

    fn topology(&self) -> Value {
        json!({
            "classifier": self.classifier.topology(),
            "encoder": self.encoder.topology(),
            "head": self.head.topology(),
        })
    }

    fn parameters(&self) -> Vec<&Tensor64> {
        let mut p = self.classifier.parameters();
        p.extend(self.encoder.parameters());
        p.extend(self.head.parameters());
        p
    }

    fn records(&self) -> Value {
        json!({"classifier": self.classifier.record, "encoder": self.encoder.record, "head": self.head.record})
    }

    fn rebuild(topology: &Value, records: &Value, mut flat: &[f64]) -> Result<Self> {
        let part = |k: &str| topology.get(k).cloned().unwrap_or(Value::Null);
        let classifier = classifier_parts(&part("classifier"), record(records, "classifier"), &mut flat)?;
        let encoder = encoder_parts(&part("encoder"), record(records, "encoder"), &mut flat)?;
        let head = head_parts(&part("head"), record(records, "head"), &mut flat)?;
        finish(ModelBundle { classifier, encoder, head }, flat)
    }
}
