//! Labelled image sets: MNIST IDX ingestion, a plain CSV format, and
//! synthetic 2-D generators.

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Flat row-major pixels, `len() * sample_len()` values in `[0, 1]`.
    images: Vec<f64>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || images.len() != d * labels.len() {
            return Err(Error::Format(format!(
                "{} pixel values for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!("pixel {i} outside [0, 1]: {}", images[i])));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(Self {
            images,
            sample_shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.sample_shape.clone(), self.image(i).to_vec())
    }

    /// Same pixels viewed with a different per-sample shape.
    pub fn reshaped(mut self, sample_shape: Vec<usize>) -> Result<Self> {
        if sample_shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::Shape {
                expected: self.sample_shape,
                actual: sample_shape,
            });
        }
        self.sample_shape = sample_shape;
        Ok(self)
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Loads `<prefix>-images-idx3-ubyte[.gz]` and `<prefix>-labels-idx1-ubyte[.gz]`
    /// from `dir`, with `prefix` = `train` or `t10k`.
    pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let dir = dir.as_ref();
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        let find = |stem: String| {
            let plain = dir.join(&stem);
            let gz = dir.join(format!("{stem}.gz"));
            if plain.exists() {
                plain
            } else {
                gz
            }
        };
        let images = find(format!("{prefix}-images-idx3-ubyte"));
        let labels = find(format!("{prefix}-labels-idx1-ubyte"));
        Self::load_idx(&images, &labels, split)
    }

    pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
        let image_bytes = read_maybe_gz(images)?;
        let label_raw = read_maybe_gz(labels)?;
        let (dims, pixels) = parse_idx(&image_bytes, IDX_IMAGES)?;
        let (ldims, label_bytes) = parse_idx(&label_raw, IDX_LABELS)?;
        if dims.len() != 3 || ldims.len() != 1 || dims[0] != ldims[0] {
            return Err(Error::Format(format!(
                "image dims {dims:?} do not match label dims {ldims:?}"
            )));
        }
        let images = pixels.iter().map(|&b| b as f64 / 255.0).collect();
        let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
        Dataset::new(images, vec![dims[1], dims[2]], labels, classes, split)
    }

    /// CSV rows of `label,v0,v1,...`; an optional header row is skipped.
    pub fn from_csv(text: &str, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let first = fields.next().unwrap_or_default();
            let Ok(label) = first.parse::<usize>() else {
                if line_no == 0 {
                    continue;
                }
                return Err(Error::Format(format!("line {}: bad label `{first}`", line_no + 1)));
            };
            let row = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", line_no + 1)))?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Format(format!(
                        "line {}: {} values, expected {w}",
                        line_no + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            labels.push(label);
            images.extend(row);
        }
        let width = width.ok_or_else(|| Error::Format("empty CSV".into()))?;
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| m + 1).max(2));
        Dataset::new(images, vec![width], labels, classes, split)
    }

    pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, num_classes, split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for k in 0..self.sample_len() {
            let _ = write!(out, ",x{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for v in self.image(i) {
                // `{}` on f64 is shortest round-trip
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX (ubyte) payload: big-endian magic, then one big-endian
/// `u32` per dimension, then the bytes.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let word = |k: usize| -> Result<u32> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim)
        .map(|k| word(k).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 * (ndim + 1)..];
    let expected: usize = dims.iter().product();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, header says {expected}",
            body.len()
        )));
    }
    Ok((dims, body))
}

/// `k` isotropic Gaussian blobs with centers on a circle inside the unit square.
pub fn gaussian_blobs<R: Rng>(n: usize, k: usize, std: f64, rng: &mut R) -> Dataset {
    let noise = Normal::new(0.0, std).expect("finite std");
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        let center = [0.5 + 0.3 * angle.cos(), 0.5 + 0.3 * angle.sin()];
        for d in center {
            images.push((d + noise.sample(rng)).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(images, vec![2], labels, k.max(2), Split::Train).expect("generator respects invariants")
}

/// Two interleaved half circles, rescaled into the unit square.
pub fn two_moons<R: Rng>(n: usize, noise_std: f64, rng: &mut R) -> Dataset {
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (x, y) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        // raw range is x in [-1, 2], y in [-0.5, 1]
        let px = (x + 1.0) / 3.0 + noise.sample(rng);
        let py = (y + 0.5) / 1.5 * 0.5 + 0.25 + noise.sample(rng);
        images.push(px.clamp(0.0, 1.0));
        images.push(py.clamp(0.0, 1.0));
        labels.push(c);
    }
    Dataset::new(images, vec![2], labels, 2, Split::Train).expect("generator respects invariants")
}
