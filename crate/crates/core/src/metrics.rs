//! Retrieval of memorized samples and image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::index::SpatialIndexer;
use crate::layers::LayerSpec;
use crate::model::{Direction, Model};
use crate::train::{accuracy, train_primary_only, TrainConfig};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-pixel mean squared error.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!("mse of {} and {} values", a.len(), b.len())));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        // whole-image statistics when no full window fits
        let n = (h * w) as f64;
        let mx = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - mx, y as f64 - my);
            vx += dx * dx;
            vy += dy * dy;
            cov += dx * dy;
        }
        return ssim_from_stats(mx, my, vx / n, vy / n, cov / n);
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ky, gy) in g.iter().enumerate() {
                let row = (oy + ky) * w + ox;
                for (kx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let (x, y) = (a[row + kx] as f64, b[row + kx] as f64);
                    mx += wgt * x;
                    my += wgt * y;
                    xx += wgt * x * x;
                    yy += wgt * y * y;
                    xy += wgt * x * y;
                }
            }
            total += ssim_from_stats(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
        }
    }
    total / (oh * ow) as f64
}

/// Structural similarity of two `[c, h, w]` images (channel mean), with an
/// 11×11 Gaussian window (σ = 1.5) over valid positions and dynamic range 1.
/// Images smaller than the window use whole-image statistics.
pub fn ssim(a: &[f32], b: &[f32], shape: &[usize]) -> Result<f64> {
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Dimension(format!("ssim needs [c, h, w] images, got {shape:?}"))),
    };
    let n = c * h * w;
    if a.len() != n || b.len() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "ssim of {} and {} values for shape {shape:?}",
            a.len(),
            b.len()
        )));
    }
    let plane = h * w;
    let s: f64 = (0..c)
        .map(|ch| ssim_plane(&a[ch * plane..][..plane], &b[ch * plane..][..plane], h, w))
        .sum();
    Ok(s / c as f64)
}

/// Samples read back from a transposed model, in index enumeration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedDataset {
    pub shape: Vec<usize>,
    pub classes: Vec<usize>,
    pub indices: Vec<usize>,
    /// clamped to `[0, 1]`, back to back
    pub images: Vec<f32>,
    #[serde(default)]
    pub source_hash: String,
}

impl ExtractedDataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.shape.iter().product();
        &self.images[i * n..(i + 1) * n]
    }

    /// The extracted images labeled with the class they were indexed under.
    pub fn to_labeled(&self, num_classes: usize) -> Result<LabeledDataset> {
        LabeledDataset::new(self.shape.clone(), self.images.clone(), self.classes.clone(), num_classes, Split::Train)
    }
}

/// `clamp(f'(I(i, c)), 0, 1)` for every `(i, c)` of `counts`.
pub fn extract_all(model: &Model, indexer: &SpatialIndexer, counts: &[usize]) -> Result<ExtractedDataset> {
    let entries = indexer.enumerate(counts)?;
    let shape = model.input_shape().to_vec();
    if entries.is_empty() {
        return Ok(ExtractedDataset {
            shape,
            classes: Vec::new(),
            indices: Vec::new(),
            images: Vec::new(),
            source_hash: String::new(),
        });
    }
    let mut codes = Vec::with_capacity(entries.len() * indexer.code_length());
    for e in &entries {
        codes.extend_from_slice(&e.vector);
    }
    let out = model.infer(&codes, Direction::Transposed)?;
    Ok(ExtractedDataset {
        shape,
        classes: entries.iter().map(|e| e.class).collect(),
        indices: entries.iter().map(|e| e.index).collect(),
        images: out.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        source_hash: String::new(),
    })
}

/// Fraction of `images` that `aux` assigns `labels`.
pub fn feature_accuracy(aux: &Model, images: &[f32], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Parameter("feature accuracy of no images".into()));
    }
    if images.len() != labels.len() * aux.input_len() {
        return Err(Error::Data(format!(
            "{} labels for {} image values",
            labels.len(),
            images.len()
        )));
    }
    let pred = aux.predict(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Trains a fresh classifier of architecture `arch` on `train_set` and
/// returns its accuracy on `test_set`.
pub fn retrain_utility(
    train_set: &LabeledDataset,
    arch: &[LayerSpec],
    cfg: &TrainConfig,
    test_set: &LabeledDataset,
) -> Result<f64> {
    if train_set.is_empty() {
        return Err(Error::Parameter("retraining needs at least one sample".into()));
    }
    let mut model = Model::build(arch, &train_set.shape, cfg.seed)?;
    train_primary_only(&mut model, train_set, None, cfg)?;
    accuracy(&model, test_set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub class: usize,
    pub count: usize,
    pub mse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub count: usize,
    pub mean_mse: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_accuracy: Option<f64>,
    pub per_class: Vec<ClassQuality>,
}

/// Compares extracted images with the originals they index, pairwise in order.
pub fn quality_report(extracted: &ExtractedDataset, reference: &LabeledDataset, aux: Option<&Model>) -> Result<QualityReport> {
    if extracted.len() != reference.len() {
        return Err(Error::Data(format!(
            "{} extracted images for {} references",
            extracted.len(),
            reference.len()
        )));
    }
    if extracted.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let mut per_class: Vec<ClassQuality> = Vec::new();
    let (mut mse_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..extracted.len() {
        let m = mse(extracted.image(i), reference.image(i))?;
        let s = ssim(extracted.image(i), reference.image(i), &reference.shape)?;
        mse_sum += m;
        ssim_sum += s;
        let class = extracted.classes[i];
        match per_class.iter_mut().find(|q| q.class == class) {
            Some(q) => {
                q.count += 1;
                q.mse += m;
                q.ssim += s;
            }
            None => per_class.push(ClassQuality { class, count: 1, mse: m, ssim: s }),
        }
    }
    for q in &mut per_class {
        q.mse /= q.count as f64;
        q.ssim /= q.count as f64;
    }
    let n = extracted.len() as f64;
    let feature_accuracy = aux
        .map(|a| feature_accuracy(a, &extracted.images, &reference.labels))
        .transpose()?;
    Ok(QualityReport {
        count: extracted.len(),
        mean_mse: mse_sum / n,
        mean_ssim: ssim_sum / n,
        feature_accuracy,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        let a: Vec<f32> = (0..10).map(|i| i as f32 / 10.0).collect();
        let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-7);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let img: Vec<f32> = (0..256).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        assert!((ssim(&img, &img, &[1, 16, 16]).unwrap() - 1.0).abs() < 1e-9);
        let s = ssim(&[0.0; 256], &[1.0; 256], &[1, 16, 16]).unwrap();
        assert!(s < 0.01, "{s}");
        let small = ssim(&[0.0; 64], &[1.0; 64], &[1, 8, 8]).unwrap();
        assert!(small < 0.01, "{small}");
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        let s: f64 = gaussian_window().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
