//! Labeled image datasets: IDX loading, synthetic fixtures, memorization sets.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Images in `[0, 1]` stored back to back, each of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub shape: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(shape: Vec<usize>, images: Vec<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} values for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            images,
            labels,
            classes,
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
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledDataset {
            shape: self.shape.clone(),
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` samples regrouped by class (classes ascending, original
    /// order within a class), the order in which the spatial index enumerates them.
    pub fn memorization_set(&self, n: usize) -> Result<LabeledDataset> {
        if n > self.len() {
            return Err(Error::Parameter(format!(
                "cannot memorize {n} samples from a set of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by_key(|&i| self.labels[i]);
        Ok(self.subset(&idx))
    }

    /// Element-wise mean image.
    pub fn mean_image(&self) -> Result<Vec<f32>> {
        if self.is_empty() {
            return Err(Error::Parameter("mean of an empty dataset".into()));
        }
        let n = self.sample_len();
        let mut acc = vec![0.0f64; n];
        for i in 0..self.len() {
            acc.iter_mut().zip(self.image(i)).for_each(|(a, &v)| *a += v as f64);
        }
        Ok(acc.iter().map(|a| (a / self.len() as f64) as f32).collect())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
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

fn be_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            msg: format!("file ends inside the {what} field ({} bytes)", buf.len()),
        })
}

/// Parses an IDX image file (`.gz` accepted) into `(rows, cols, pixels)`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} for images"),
        });
    }
    let count = be_u32(buf, 4, "count")? as usize;
    let rows = be_u32(buf, 8, "rows")? as usize;
    let cols = be_u32(buf, 12, "cols")? as usize;
    let want = 16 + count * rows * cols;
    if buf.len() < want {
        return Err(Error::Format {
            offset: buf.len(),
            msg: format!("truncated image data: expected {want} bytes, found {}", buf.len()),
        });
    }
    Ok((rows, cols, buf[16..want].to_vec()))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} for labels"),
        });
    }
    let count = be_u32(buf, 4, "count")? as usize;
    let want = 8 + count;
    if buf.len() < want {
        return Err(Error::Format {
            offset: buf.len(),
            msg: format!("truncated label data: expected {want} bytes, found {}", buf.len()),
        });
    }
    Ok(buf[8..want].to_vec())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let (rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let raw_labels = parse_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    let n = raw_labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Format {
            offset: 4,
            msg: format!(
                "image file holds {} images but label file {n} labels",
                pixels.len() / (rows * cols).max(1)
            ),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    LabeledDataset::new(vec![1, rows, cols], images, labels, classes, split)
}

/// Loads `<dir>/train-*` or `<dir>/t10k-*` MNIST files (plain or `.gz`).
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |kind: &str| {
        let plain = dir.join(format!("{stem}-{kind}"));
        let gz = dir.join(format!("{stem}-{kind}.gz"));
        if plain.exists() {
            plain
        } else {
            gz
        }
    };
    load_idx(pick("images-idx3-ubyte"), pick("labels-idx1-ubyte"), split)
}

/// Seeded class-conditional Gaussian blobs: every class owns a random blob
/// centre and width; samples jitter the centre and add pixel noise.
pub fn synth_dataset(classes: usize, per_class: usize, shape: &[usize], seed: u64) -> Result<LabeledDataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::Parameter("synthetic dataset needs classes and samples".into()));
    }
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Parameter(format!("image shape must be [h, w] or [c, h, w], got {shape:?}"))),
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Parameter(format!("empty image shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<(f64, f64, f64, Vec<f64>)> = (0..classes)
        .map(|_| {
            let cy = rng.random_range(0.2..0.8) * h as f64;
            let cx = rng.random_range(0.2..0.8) * w as f64;
            let width = rng.random_range(0.12..0.25) * h.max(w) as f64;
            let gains = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
            (cy, cx, width, gains)
        })
        .collect();
    let jitter = Normal::new(0.0, 0.04 * h.max(w) as f64).expect("positive std");
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let mut images = Vec::with_capacity(classes * per_class * c * h * w);
    let mut labels = Vec::with_capacity(classes * per_class);
    // interleave classes so that any prefix is balanced
    for _ in 0..per_class {
        for (label, (cy, cx, width, gains)) in centres.iter().enumerate() {
            let (y0, x0) = (cy + jitter.sample(&mut rng), cx + jitter.sample(&mut rng));
            for gain in gains {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - y0).powi(2) + (x as f64 - x0).powi(2);
                        let v = gain * (-d2 / (2.0 * width * width)).exp() + noise.sample(&mut rng);
                        images.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(label);
        }
    }
    let shape = if shape.len() == 2 { vec![1, h, w] } else { shape.to_vec() };
    LabeledDataset::new(shape, images, labels, classes, Split::Train)
}

/// The dataset reordered by a fixed-seed permutation.
pub fn shuffled(ds: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    ds.subset(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_tiny_idx() {
        let b = idx_images(2, 1, 2, &[0, 255, 51, 102]);
        let (r, c, px) = parse_idx_images(&b).unwrap();
        assert_eq!((r, c), (1, 2));
        assert_eq!(px, [0, 255, 51, 102]);
    }

    #[test]
    fn swapped_files_report_bad_magic() {
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(3);
        let err = parse_idx_images(&labels).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncation_names_lengths() {
        let b = idx_images(2, 2, 2, &[1, 2, 3]);
        let err = parse_idx_images(&b).unwrap_err().to_string();
        assert!(err.contains("expected 24 bytes, found 19"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_dataset(2, 8, &[8, 8], 7).unwrap();
        let b = synth_dataset(2, 8, &[8, 8], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_eq!(a.shape, [1, 8, 8]);
        assert!(synth_dataset(2, 0, &[8, 8], 7).is_err());
    }

    #[test]
    fn memorization_set_groups_by_class() {
        let ds = synth_dataset(3, 4, &[4, 4], 1).unwrap();
        let m = ds.memorization_set(7).unwrap();
        assert_eq!(m.labels, [0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(m.image(3), ds.image(1));
    }

    #[test]
    fn mean_of_zeros_and_ones() {
        let ds = LabeledDataset::new(vec![1, 1, 2], vec![0.0, 0.0, 1.0, 1.0], vec![0, 1], 2, Split::Train).unwrap();
        assert_eq!(ds.mean_image().unwrap(), [0.5, 0.5]);
        assert_eq!(ds.take(1).mean_image().unwrap(), [0.0, 0.0]);
    }
}
