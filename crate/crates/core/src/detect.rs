//! Detecting transposed-model memorization by optimizing the transposed
//! model's input toward the dataset mean image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{mse, ssim};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSetting {
    Auto,
    Manual(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub alpha: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// stop a restart once one step improves its score by less than this
    pub min_improvement: f64,
    pub threshold: ThresholdSetting,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            iterations: 300,
            restarts: 20,
            min_improvement: 1e-8,
            threshold: ThresholdSetting::Auto,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Benign,
    Malicious,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// final score of every restart (`+∞` for restarts whose gradient blew up)
    pub scores: Vec<f64>,
    pub min_score: f64,
    /// per-iteration best score of restart 0, for convergence inspection
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scores: Vec<f64>,
    pub min_score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Gradient descent on `e` (restarts batched) minimizing `MSE(f'(e), x̄)`,
/// starting from `e ~ U(0, 1)`. Model parameters are read but never changed.
pub fn bim_probe(model: &Model, xbar: &[f32], cfg: &DetectConfig) -> Result<ProbeResult> {
    if cfg.iterations == 0 || cfg.restarts == 0 {
        return Err(Error::Parameter("probe needs at least one iteration and one restart".into()));
    }
    let per = model.input_len();
    if xbar.len() != per {
        return Err(Error::Dimension(format!(
            "mean image has {} values but the transposed model emits {per}",
            xbar.len()
        )));
    }
    let d = model.output_len();
    let r = cfg.restarts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codes: Vec<f32> = (0..r * d).map(|_| rng.random_range(0.0..1.0)).collect();
    let target: Vec<f32> = xbar.iter().copied().cycle().take(r * per).collect();

    let mut scores = vec![f64::INFINITY; r];
    let mut active = vec![true; r];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    // one extra forward pass scores the final step
    for it in 0..=cfg.iterations {
        let mut g = Graph::<f32>::frozen();
        let e = g.input_with_grad(Tensor::new(vec![r, d], codes.clone())?);
        let out = model.reconstruct(&mut g, e)?;
        let values = g.value(out).data();
        let mut improved = vec![false; r];
        for k in 0..r {
            if !active[k] {
                continue;
            }
            let s = mse(&values[k * per..(k + 1) * per], xbar)?;
            if !s.is_finite() {
                scores[k] = f64::INFINITY;
                active[k] = false;
                continue;
            }
            improved[k] = scores[k] - s >= cfg.min_improvement;
            scores[k] = scores[k].min(s);
        }
        trace.push(scores[0]);
        if it == cfg.iterations || cfg.alpha == 0.0 {
            break;
        }
        for k in 0..r {
            if it > 0 && !improved[k] {
                active[k] = false;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        // the summed per-restart losses give each restart its own gradient
        let loss = g.mse(out, &target)?;
        let loss = g.scale(loss, r as f32);
        let grads = g.backward(loss)?;
        let ge = grads.wrt(e).expect("input requires grad");
        for k in 0..r {
            if !active[k] {
                continue;
            }
            let gk = &ge[k * d..(k + 1) * d];
            if gk.iter().any(|v| !v.is_finite()) {
                scores[k] = f64::INFINITY;
                active[k] = false;
                continue;
            }
            for (c, gv) in codes[k * d..(k + 1) * d].iter_mut().zip(gk) {
                *c -= (cfg.alpha as f32) * gv;
            }
        }
    }
    let min_score = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ProbeResult { scores, min_score, trace })
}

/// The default noise ladder `0.05, 0.10, …, 0.50`.
pub fn default_ladder() -> Vec<f64> {
    (1..=10).map(|k| 0.05 * k as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub sigma: f64,
    pub ssim: f64,
    pub threshold: f64,
}

/// Adds unclipped Gaussian noise of increasing `σ` to `x̄` and stops at the
/// first `σ` whose noisy image has SSIM below `cutoff`; the threshold is the
/// MSE of that noisy image.
pub fn select_threshold(xbar: &[f32], shape: &[usize], ladder: &[f64], cutoff: f64, seed: u64) -> Result<ThresholdChoice> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter("noise ladder must be non-empty and strictly increasing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &sigma in ladder {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        let noisy: Vec<f32> = xbar.iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
        let s = ssim(&noisy, xbar, shape)?;
        if s < cutoff {
            return Ok(ThresholdChoice {
                sigma,
                ssim: s,
                threshold: mse(&noisy, xbar)?,
            });
        }
    }
    Err(Error::Parameter(format!(
        "SSIM never fell below {cutoff} up to sigma {}; extend the ladder",
        ladder[ladder.len() - 1]
    )))
}

/// Rank AUC where a lower score means "more malicious"; ties count one half.
pub fn detection_auc(benign: &[f64], malicious: &[f64]) -> Result<f64> {
    if benign.is_empty() || malicious.is_empty() {
        return Err(Error::Parameter("AUC needs both populations".into()));
    }
    let mut wins = 0.0;
    for &m in malicious {
        for &b in benign {
            if m < b {
                wins += 1.0;
            } else if m == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (benign.len() * malicious.len()) as f64)
}

/// Probes `model` and applies the threshold.
pub fn detect(model: &Model, xbar: &[f32], threshold: f64, cfg: &DetectConfig) -> Result<DetectionReport> {
    let probe = bim_probe(model, xbar, cfg)?;
    Ok(DetectionReport {
        verdict: if probe.min_score <= threshold {
            Verdict::Malicious
        } else {
            Verdict::Benign
        },
        scores: probe.scores,
        min_score: probe.min_score,
        threshold,
        auc: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes() {
        assert_eq!(detection_auc(&[0.5, 0.6], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(detection_auc(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.5);
        assert_eq!(detection_auc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert!(detection_auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn ladder_above_crossing_uses_first_entry() {
        let xbar: Vec<f32> = (0..64).map(|i| (i % 8) as f32 / 8.0).collect();
        let c = select_threshold(&xbar, &[1, 8, 8], &[5.0, 6.0], 0.5, 1).unwrap();
        assert_eq!(c.sigma, 5.0);
        assert!(select_threshold(&xbar, &[1, 8, 8], &[1e-6], 0.5, 1).is_err());
    }
}
