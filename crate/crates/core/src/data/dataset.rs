use std::io::Write;
use std::path::Path;

use ndt::Tensor64;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BYND";
pub const VERSION: u16 = 1;

/// Images with integer labels, held as `[n, c, h, w]` reals in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor64,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor64 {
        self.images.row(i)
    }

    /// Rows `idx` stacked along the leading axis; works for any rank.
    pub fn batch(&self, idx: &[usize]) -> Tensor64 {
        let shape = self.images.shape();
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        Tensor64::new(out_shape, data).expect("batch shape")
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHeader {
    pub count: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub num_classes: u8,
    /// Free-form origin tag, e.g. `synthetic/seed=7` or `pgd/eps=8/255`.
    pub provenance: String,
}

/// On-disk dataset: little-endian header, `count` CHW byte images, then `count` labels.
///
/// ```text
/// "BYND" | version u16 | count u32 | height u16 | width u16 | channels u8
///        | num_classes u8 | provenance_len u16 | provenance utf-8
///        | pixels [count*h*w*c] u8 | labels [count] u8
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetContainer {
    pub header: ContainerHeader,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DatasetContainer {
    pub fn image_len(&self) -> usize {
        let h = &self.header;
        h.height as usize * h.width as usize * h.channels as usize
    }

    pub fn to_images(&self) -> LabeledImages {
        let h = &self.header;
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        LabeledImages {
            images: Tensor64::new(
                vec![h.count as usize, h.channels as usize, h.height as usize, h.width as usize],
                data,
            )
            .expect("validated container"),
            labels: self.labels.iter().map(|&l| l as usize).collect(),
            num_classes: h.num_classes as usize,
        }
    }

    /// Quantizes images to bytes with round-to-nearest.
    pub fn from_images(set: &LabeledImages, provenance: &str) -> Self {
        let pixels = set.images.data().iter().map(|&v| quantize(v)).collect();
        Self::assemble(set, pixels, provenance)
    }

    /// Quantizes adversarial images so every byte stays within `eps` of the
    /// (already byte-valued) source image, preserving the L-inf budget.
    pub fn from_adversarial(adv: &LabeledImages, source: &LabeledImages, eps: f64, provenance: &str) -> Self {
        let limit = (eps * 255.0 + 1e-9).floor();
        let pixels = adv
            .images
            .data()
            .iter()
            .zip(source.images.data())
            .map(|(&a, &s)| {
                let q = (a * 255.0).round();
                let s = (s * 255.0).round();
                q.clamp(s - limit, s + limit).clamp(0.0, 255.0) as u8
            })
            .collect();
        Self::assemble(adv, pixels, provenance)
    }

    fn assemble(set: &LabeledImages, pixels: Vec<u8>, provenance: &str) -> Self {
        let [c, h, w] = set.image_shape();
        Self {
            header: ContainerHeader {
                count: set.len() as u32,
                height: h as u16,
                width: w as u16,
                channels: c as u8,
                num_classes: set.num_classes as u8,
                provenance: provenance.to_string(),
            },
            pixels,
            labels: set.labels.iter().map(|&l| l as u8).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(20 + h.provenance.len() + self.pixels.len() + self.labels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.count.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.push(h.channels);
        out.push(h.num_classes);
        out.extend_from_slice(&(h.provenance.len() as u16).to_le_bytes());
        out.extend_from_slice(h.provenance.as_bytes());
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = u32::from_le_bytes(r.array("count")?);
        let height = u16::from_le_bytes(r.array("height")?);
        let width = u16::from_le_bytes(r.array("width")?);
        let [channels] = r.array("channels")?;
        let [num_classes] = r.array("num_classes")?;
        let plen = u16::from_le_bytes(r.array("provenance length")?) as usize;
        let provenance = String::from_utf8(r.take(plen, "provenance")?.to_vec())
            .map_err(|_| Error::Truncated("provenance is not utf-8".into()))?;
        let header = ContainerHeader {
            count,
            height,
            width,
            channels,
            num_classes,
            provenance,
        };
        let n_pix = count as usize * height as usize * width as usize * channels as usize;
        let pixels = r.take(n_pix, "pixels")?.to_vec();
        let labels = r.take(count as usize, "labels")?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { header, pixels, labels })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn save_dataset(path: &Path, data: &DatasetContainer) -> Result<()> {
    write_atomic(path, &data.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<DatasetContainer> {
    DatasetContainer::from_bytes(&std::fs::read(path)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetContainer {
        DatasetContainer {
            header: ContainerHeader {
                count: 2,
                height: 2,
                width: 2,
                channels: 1,
                num_classes: 3,
                provenance: "unit".into(),
            },
            pixels: vec![0, 1, 2, 3, 250, 251, 252, 255],
            labels: vec![0, 2],
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[0..4], b"BYND");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        assert_eq!(&b[10..12], &[2, 0]);
        assert_eq!(b[14], 1);
        assert_eq!(b[15], 3);
        assert_eq!(&b[16..18], &[4, 0]);
        assert_eq!(b.len(), 18 + 4 + 8 + 2);
    }

    #[test]
    fn distinct_errors() {
        let good = sample().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(DatasetContainer::from_bytes(&good[..good.len() - 3]), Err(Error::Truncated(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(DatasetContainer::from_bytes(&long), Err(Error::Truncated(_))));
        let mut bad = good;
        let n = bad.len();
        bad[n - 1] = 7;
        assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::LabelOutOfRange { label: 7, .. })));
    }

    #[test]
    fn adversarial_quantization_stays_in_budget() {
        let src = LabeledImages {
            images: Tensor64::vector(vec![10.0 / 255.0, 200.0 / 255.0]).reshape(&[1, 1, 1, 2]).unwrap(),
            labels: vec![0],
            num_classes: 2,
        };
        let eps = 2.0 / 255.0;
        let adv = LabeledImages {
            images: Tensor64::vector(vec![(10.0 + 2.0) / 255.0 + 1e-12, (200.0 - 1.6) / 255.0])
                .reshape(&[1, 1, 1, 2])
                .unwrap(),
            ..src.clone()
        };
        let c = DatasetContainer::from_adversarial(&adv, &src, eps, "t");
        assert_eq!(c.pixels, vec![12, 198]);
    }
}
