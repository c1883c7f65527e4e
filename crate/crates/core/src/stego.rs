//! Weight-steganography baselines and parameter-noise injection.
//!
//! * `lsb`: the payload bit stream (least significant bit of each byte first)
//!   overwrites the `b` lowest mantissa bits of every parameter in store order.
//! * `last_bytes`: the three low bytes of each little-endian parameter.
//! * `dead_kernel`: whole output units (columns of linear weights, filters of
//!   convolutions) with the smallest L1 norm are overwritten by the payload
//!   read as little-endian `f32`s.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::metrics::ssim;
use crate::model::Model;
use crate::params::ParamStore;
use crate::train::{accuracy, memorization_mse, MemorySet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StegoMethod {
    Lsb,
    LastBytes,
    DeadKernel,
}

impl std::str::FromStr for StegoMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsb" => Ok(StegoMethod::Lsb),
            "last_bytes" => Ok(StegoMethod::LastBytes),
            "dead_kernel" => Ok(StegoMethod::DeadKernel),
            other => Err(Error::Parameter(format!("unknown stego method `{other}`"))),
        }
    }
}

/// A swap unit of the dead-kernel method: one output column or filter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub param: String,
    pub unit: usize,
}

/// Everything needed to read a payload back out of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegoManifest {
    pub method: StegoMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_per_param: Option<u32>,
    pub payload_len: usize,
    /// shapes of the images the payload encodes, one per image
    #[serde(default)]
    pub image_shapes: Vec<Vec<usize>>,
    pub capacity_used: f64,
    /// parameter names and sizes of the carrier model
    pub layout: Vec<(String, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub units: Vec<Unit>,
    pub payload_sha256: String,
}

fn layout(store: &ParamStore) -> Vec<(String, usize)> {
    store.iter().map(|(_, n, t)| (n.to_string(), t.len())).collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pixels in `[0, 1]` quantised to one byte each.
pub fn images_to_bytes(images: &[f32]) -> Vec<u8> {
    images.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn bytes_to_images(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Fraction of differing bits over the common length (missing bytes count as wrong).
pub fn bit_error_rate(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    let mut wrong = 8 * (a.len().abs_diff(b.len())) as u64;
    for (x, y) in a.iter().zip(b) {
        wrong += (x ^ y).count_ones() as u64;
    }
    wrong as f64 / (8 * n) as f64
}

/// Units ranked by ascending L1 norm, with their element positions.
fn dead_units(model: &Model) -> Vec<(f64, Unit, Vec<usize>)> {
    let store = model.params();
    let mut units = Vec::new();
    for layer in model.layers() {
        let Some(wid) = layer.params.weight else { continue };
        let w = store.get(wid);
        let name = store.name(wid).to_string();
        let s = w.shape();
        let groups: Vec<Vec<usize>> = match layer.kind {
            LayerKind::Linear { .. } => (0..s[1]).map(|j| (0..s[0]).map(|i| i * s[1] + j).collect()).collect(),
            LayerKind::Conv2d { .. } | LayerKind::Deconv2d { .. } => {
                let per = s[1] * s[2] * s[3];
                (0..s[0]).map(|m| (m * per..(m + 1) * per).collect()).collect()
            }
            _ => continue,
        };
        for (u, pos) in groups.into_iter().enumerate() {
            let l1: f64 = pos.iter().map(|&p| w.data()[p].abs() as f64).sum();
            units.push((l1, Unit { param: name.clone(), unit: u }, pos));
        }
    }
    units.sort_by(|a, b| a.0.total_cmp(&b.0));
    units
}

/// Capacity in bytes of `method` on `model`.
pub fn capacity(model: &Model, method: StegoMethod, bits: u32) -> usize {
    let p = model.params().num_scalars();
    match method {
        StegoMethod::Lsb => p * bits as usize / 8,
        StegoMethod::LastBytes => 3 * p,
        StegoMethod::DeadKernel => 4 * dead_units(model).iter().map(|u| u.2.len()).sum::<usize>(),
    }
}

/// Hides `payload` in a copy of `model`. `bits` is used by `lsb` only (1..=23).
pub fn embed(model: &Model, payload: &[u8], method: StegoMethod, bits: u32) -> Result<(Model, StegoManifest)> {
    if method == StegoMethod::Lsb && !(1..=23).contains(&bits) {
        return Err(Error::Parameter(format!("lsb bits per parameter must be 1..=23, got {bits}")));
    }
    let cap = capacity(model, method, bits);
    if payload.len() > cap {
        return Err(Error::Capacity(format!(
            "payload of {} bytes exceeds the {cap}-byte {method:?} capacity",
            payload.len()
        )));
    }
    let mut out = model.clone();
    let mut units = Vec::new();
    match method {
        StegoMethod::Lsb => {
            let mask = (1u32 << bits) - 1;
            let mut bit = 0usize;
            let total_bits = payload.len() * 8;
            'outer: for id in out.params().ids().collect::<Vec<_>>() {
                for w in out.params_mut().get_mut(id).data_mut() {
                    if bit >= total_bits {
                        break 'outer;
                    }
                    let mut chunk = 0u32;
                    for t in 0..bits as usize {
                        let b = bit + t;
                        if b < total_bits && (payload[b / 8] >> (b % 8)) & 1 == 1 {
                            chunk |= 1 << t;
                        }
                    }
                    *w = f32::from_bits((w.to_bits() & !mask) | chunk);
                    bit += bits as usize;
                }
            }
        }
        StegoMethod::LastBytes => {
            let mut chunks = payload.chunks(3);
            'outer: for id in out.params().ids().collect::<Vec<_>>() {
                for w in out.params_mut().get_mut(id).data_mut() {
                    let Some(chunk) = chunks.next() else { break 'outer };
                    let mut bytes = w.to_le_bytes();
                    bytes[..chunk.len()].copy_from_slice(chunk);
                    *w = f32::from_le_bytes(bytes);
                }
            }
        }
        StegoMethod::DeadKernel => {
            let mut floats = payload.chunks(4).map(|c| {
                let mut b = [0u8; 4];
                b[..c.len()].copy_from_slice(c);
                f32::from_le_bytes(b)
            });
            let mut remaining = payload.len().div_ceil(4);
            for (_, unit, pos) in dead_units(model) {
                if remaining == 0 {
                    break;
                }
                let id = out.params().find(&unit.param).expect("unit from this model");
                let data = out.params_mut().get_mut(id).data_mut();
                for &p in &pos {
                    match floats.next() {
                        Some(f) => data[p] = f,
                        None => break,
                    }
                }
                remaining = remaining.saturating_sub(pos.len());
                units.push(unit);
            }
        }
    }
    let manifest = StegoManifest {
        method,
        bits_per_param: (method == StegoMethod::Lsb).then_some(bits),
        payload_len: payload.len(),
        image_shapes: Vec::new(),
        capacity_used: if cap == 0 { 0.0 } else { payload.len() as f64 / cap as f64 },
        layout: layout(model.params()),
        units,
        payload_sha256: sha_hex(payload),
    };
    Ok((out, manifest))
}

/// Reads the payload back. Does not verify the payload hash, so damaged
/// payloads can still be measured; see [`verify_payload`].
pub fn extract(model: &Model, manifest: &StegoManifest) -> Result<Vec<u8>> {
    if layout(model.params()) != manifest.layout {
        return Err(Error::Integrity("model parameter layout does not match the manifest".into()));
    }
    let n = manifest.payload_len;
    let mut out = vec![0u8; n];
    match manifest.method {
        StegoMethod::Lsb => {
            let bits = manifest
                .bits_per_param
                .filter(|b| (1..=23).contains(b))
                .ok_or_else(|| Error::Integrity("lsb manifest without a valid bit count".into()))? as usize;
            let total_bits = n * 8;
            let mut bit = 0usize;
            'outer: for (_, _, t) in model.params().iter() {
                for w in t.data() {
                    if bit >= total_bits {
                        break 'outer;
                    }
                    let v = w.to_bits();
                    for t in 0..bits {
                        let b = bit + t;
                        if b < total_bits && (v >> t) & 1 == 1 {
                            out[b / 8] |= 1 << (b % 8);
                        }
                    }
                    bit += bits;
                }
            }
        }
        StegoMethod::LastBytes => {
            let mut pos = 0;
            'outer: for (_, _, t) in model.params().iter() {
                for w in t.data() {
                    if pos >= n {
                        break 'outer;
                    }
                    let bytes = w.to_le_bytes();
                    let take = (n - pos).min(3);
                    out[pos..pos + take].copy_from_slice(&bytes[..take]);
                    pos += take;
                }
            }
        }
        StegoMethod::DeadKernel => {
            let mut raw = Vec::with_capacity(n + 4);
            let all = dead_units(model);
            for unit in &manifest.units {
                let pos = all
                    .iter()
                    .find(|(_, u, _)| u == unit)
                    .map(|(_, _, pos)| pos)
                    .ok_or_else(|| Error::Integrity(format!("unit {} of `{}` missing", unit.unit, unit.param)))?;
                let id = model.params().find(&unit.param).expect("unit from this model");
                let data = model.params().get(id).data();
                for &p in pos {
                    raw.extend_from_slice(&data[p].to_le_bytes());
                }
            }
            if raw.len() < n {
                return Err(Error::Integrity("manifest units hold fewer bytes than the payload".into()));
            }
            out.copy_from_slice(&raw[..n]);
        }
    }
    Ok(out)
}

/// Checks an extracted payload against the manifest hash.
pub fn verify_payload(payload: &[u8], manifest: &StegoManifest) -> Result<()> {
    if sha_hex(payload) == manifest.payload_sha256 {
        Ok(())
    } else {
        Err(Error::Integrity("payload hash mismatch".into()))
    }
}

/// Adds `N(0, σ²)` to every parameter of a copy of `model`; with `relative`
/// the deviation is `σ` times each tensor's own standard deviation.
pub fn add_param_noise(model: &Model, sigma: f64, seed: u64, relative: bool) -> Result<Model> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut out = model.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in out.params().ids().collect::<Vec<_>>() {
        let data = out.params_mut().get_mut(id).data_mut();
        let scale = if relative {
            let n = data.len() as f64;
            let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
            (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            1.0
        };
        let std = sigma * scale;
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in data {
            *w = (*w as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    Ok(out)
}

/// A stego carrier evaluated by [`noise_sweep`].
pub struct StegoCarrier<'a> {
    pub model: &'a Model,
    pub manifest: &'a StegoManifest,
    pub payload: &'a [u8],
    /// shape of each image in the payload, for SSIM
    pub image_shape: &'a [usize],
}

/// A transpose-trained model evaluated by [`noise_sweep`].
pub struct TransposeCarrier<'a> {
    pub model: &'a Model,
    pub memory: &'a MemorySet,
    pub image_shape: &'a [usize],
    pub test_set: &'a LabeledDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StegoRow {
    pub method: StegoMethod,
    pub bit_error_rate: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub primary_accuracy: f64,
    pub transpose_mse: f64,
    pub transpose_ssim: f64,
    pub stego: Vec<StegoRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub rows: Vec<NoiseRow>,
}

fn mean_ssim(a: &[f32], b: &[f32], shape: &[usize]) -> Result<f64> {
    let per: usize = shape.iter().product();
    if per == 0 || a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension("ssim over mismatched image sets".into()));
    }
    let n = a.len() / per;
    let mut s = 0.0;
    for i in 0..n {
        s += ssim(&a[i * per..(i + 1) * per], &b[i * per..(i + 1) * per], shape)?;
    }
    Ok(s / n as f64)
}

/// Evaluates every carrier after adding noise of each `σ` (absolute).
pub fn noise_sweep(
    transpose: &TransposeCarrier,
    stego: &[StegoCarrier],
    sigmas: &[f64],
    seed: u64,
) -> Result<NoiseSweepReport> {
    if sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter("sigmas must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    for (k, &sigma) in sigmas.iter().enumerate() {
        let seed = seed.wrapping_add(k as u64);
        let noisy = add_param_noise(transpose.model, sigma, seed, false)?;
        let recon = noisy.infer(&transpose.memory.codes, crate::model::Direction::Transposed)?;
        let recon: Vec<f32> = recon.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let transpose_mse = memorization_mse(&noisy, transpose.memory)?;
        let transpose_ssim = mean_ssim(&recon, &transpose.memory.targets, transpose.image_shape)?;
        let primary_accuracy = accuracy(&noisy, transpose.test_set)?;
        let mut srows = Vec::with_capacity(stego.len());
        for carrier in stego {
            let noisy = add_param_noise(carrier.model, sigma, seed, false)?;
            let got = extract(&noisy, carrier.manifest)?;
            let ssim = mean_ssim(&bytes_to_images(&got), &bytes_to_images(carrier.payload), carrier.image_shape)?;
            srows.push(StegoRow {
                method: carrier.manifest.method,
                bit_error_rate: bit_error_rate(&got, carrier.payload),
                ssim,
            });
        }
        rows.push(NoiseRow {
            sigma,
            primary_accuracy,
            transpose_mse,
            transpose_ssim,
            stego: srows,
        });
    }
    Ok(NoiseSweepReport { rows })
}

/// The default sweep `{0, 1e-8, 1e-7, …, 1e-1}`.
pub fn default_sigmas() -> Vec<f64> {
    std::iter::once(0.0).chain((1..=8).rev().map(|e| 10f64.powi(-e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Activation;
    use crate::layers::LayerSpec;

    fn tiny() -> Model {
        let specs = vec![
            LayerSpec::conv(1, 4, 3, 1, 1, Activation::Relu),
            LayerSpec::reshape(vec![4, 5, 5], vec![100]),
            LayerSpec::linear(100, 6, Activation::Identity),
        ];
        Model::build(&specs, &[1, 5, 5], 9).unwrap()
    }

    #[test]
    fn round_trips_without_noise() {
        let m = tiny();
        let payload: Vec<u8> = (0..300u32).map(|i| (i * 7 % 256) as u8).collect();
        for method in [StegoMethod::Lsb, StegoMethod::LastBytes, StegoMethod::DeadKernel] {
            let (carrier, manifest) = embed(&m, &payload, method, 8).unwrap();
            let got = extract(&carrier, &manifest).unwrap();
            assert_eq!(got, payload, "{method:?}");
            verify_payload(&got, &manifest).unwrap();
        }
    }

    #[test]
    fn lsb_capacity_is_exact() {
        let m = tiny();
        let p = m.num_params();
        assert_eq!(capacity(&m, StegoMethod::Lsb, 8), p);
        let err = embed(&m, &vec![1u8; p + 1], StegoMethod::Lsb, 8).unwrap_err();
        assert!(err.to_string().contains(&format!("{}", p + 1)), "{err}");
    }

    #[test]
    fn zero_noise_is_bit_identical() {
        let m = tiny();
        let n = add_param_noise(&m, 0.0, 3, false).unwrap();
        let bits = |m: &Model| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&n));
        let a = add_param_noise(&m, 1e-3, 3, false).unwrap();
        let b = add_param_noise(&m, 1e-3, 3, false).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&m));
    }

    #[test]
    fn default_sweep() {
        let s = default_sigmas();
        assert_eq!(s.len(), 9);
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 1e-8).abs() < 1e-20);
        assert!((s[8] - 0.1).abs() < 1e-15);
    }
}
