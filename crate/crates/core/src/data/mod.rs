//! Datasets, checkpoints, run configuration and results persistence.

mod checkpoint;
mod config;
mod dataset;
mod results;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, Checkpointable};
pub use config::{parse_eps, RunConfig};
pub use dataset::{
    load_dataset, quantize, save_dataset, write_atomic, ContainerHeader, DatasetContainer, LabeledImages,
};
pub use results::{roc_svg, write_results, Curve, ResultTable, RunOutput, WriteOptions};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig, MOTIFS};

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(super::fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(super::fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
