use ndt::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetContainer, LabeledImages};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 500,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

/// Shape drawn for each class, in order.
pub const MOTIFS: [&str; 16] = [
    "disk", "hbar", "cross", "ring", "square", "triangle", "vbar", "xcross", "frame", "diamond", "dots", "lshape",
    "tshape", "halfdisk", "checker", "diagonal",
];

/// Membership of point `(u, v)` (unit-scaled, centered) in a motif.
fn inside(motif: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match motif {
        0 => u * u + v * v <= 1.0,
        1 => au <= 1.0 && av <= 0.3,
        2 => (au <= 1.0 && av <= 0.25) || (av <= 1.0 && au <= 0.25),
        3 => {
            let r = (u * u + v * v).sqrt();
            (0.6..=1.0).contains(&r)
        }
        4 => au <= 0.8 && av <= 0.8,
        5 => (-0.9..=0.8).contains(&v) && au <= (0.8 - v) * 0.55,
        6 => av <= 1.0 && au <= 0.3,
        7 => ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35) && au <= 0.9 && av <= 0.9,
        8 => au <= 0.9 && av <= 0.9 && (au >= 0.55 || av >= 0.55),
        9 => au + av <= 1.0,
        10 => ((u - 0.5).powi(2) + v * v <= 0.16) || ((u + 0.5).powi(2) + v * v <= 0.16),
        11 => ((-0.8..=-0.35).contains(&u) && av <= 0.9) || ((0.45..=0.9).contains(&v) && (-0.8..=0.8).contains(&u)),
        12 => ((-0.9..=-0.45).contains(&v) && au <= 0.9) || (au <= 0.22 && (-0.9..=0.9).contains(&v)),
        13 => u * u + v * v <= 1.0 && v >= 0.0,
        14 => au <= 0.9 && av <= 0.9 && ((u >= 0.0) == (v >= 0.0)),
        _ => (u - v).abs() <= 0.3 && au <= 0.95 && av <= 0.95,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders one `[3, h, w]` image of `motif` with randomized placement and color.
fn render(motif: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = h.min(w) as f64;
    let radius = size * rng.gen_range(0.28..0.38);
    let cy = h as f64 / 2.0 + rng.gen_range(-0.12..0.12) * size;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.12..0.12) * size;
    let fg = hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.6..0.9), rng.gen_range(0.75..1.0));
    let bg_level = rng.gen_range(0.05..0.2);
    let mut img = vec![0.0; 3 * h * w];
    // 2x2 supersampling for soft edges.
    const OFFS: [f64; 2] = [0.25, 0.75];
    for y in 0..h {
        for x in 0..w {
            let mut cover = 0.0;
            for oy in OFFS {
                for ox in OFFS {
                    let u = (x as f64 + ox - cx) / radius;
                    let v = (y as f64 + oy - cy) / radius;
                    if inside(motif, u, v) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                let val = bg_level * (1.0 - cover) + fg[c] * cover + noise;
                img[(c * h + y) * w + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Class-balanced images; sample `i` has label `i % classes`.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<DatasetContainer> {
    if !(2..=MOTIFS.len()).contains(&cfg.classes) {
        return Err(Error::UnsupportedClasses(cfg.classes));
    }
    if cfg.height < 4 || cfg.width < 4 || cfg.per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs images of at least 4x4 and per_class >= 1, got {}x{} x{}",
            cfg.height, cfg.width, cfg.per_class
        )));
    }
    let n = cfg.classes * cfg.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(n * 3 * cfg.height * cfg.width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % cfg.classes;
        data.extend(render(label, cfg.height, cfg.width, &mut rng));
        labels.push(label);
    }
    let set = LabeledImages {
        images: Tensor64::new(vec![n, 3, cfg.height, cfg.width], data)?,
        labels,
        num_classes: cfg.classes,
    };
    Ok(DatasetContainer::from_images(&set, &format!("synthetic/seed={}", cfg.seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motifs_cover_something_and_differ() {
        let grid: Vec<(f64, f64)> = (0..40)
            .flat_map(|i| (0..40).map(move |j| (i as f64 / 20.0 - 1.0, j as f64 / 20.0 - 1.0)))
            .collect();
        let masks: Vec<Vec<bool>> = (0..16).map(|m| grid.iter().map(|&(u, v)| inside(m, u, v)).collect()).collect();
        for (i, m) in masks.iter().enumerate() {
            assert!(m.iter().any(|&b| b), "motif {i} empty");
            for (j, o) in masks.iter().enumerate().skip(i + 1) {
                assert_ne!(m, o, "motifs {i} and {j} identical");
            }
        }
    }

    #[test]
    fn rejects_unsupported_class_counts() {
        for classes in [0, 1, 17] {
            let cfg = SyntheticConfig { classes, per_class: 1, ..Default::default() };
            assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::UnsupportedClasses(_))));
        }
    }
}
