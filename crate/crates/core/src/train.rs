//! Tandem training: a classification step on the forward model followed by a
//! memorization step on the transposed model, both over the same weights.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::index::SpatialIndexer;
use crate::model::{argmax, Direction, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// scale of the memorization loss
    pub lambda: f32,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_primary: usize,
    pub batch_secondary: usize,
    /// epochs without a `min_delta` improvement of the memorization MSE before stopping
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 500,
            batch_primary: 64,
            batch_secondary: 64,
            early_stop_patience: 20,
            min_delta: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_primary == 0 || self.batch_secondary == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda and weight_decay must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub primary_loss: f64,
    pub primary_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub secondary_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_secondary_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_secondary_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_test_accuracy: Option<f64>,
}

impl TrainReport {
    /// JSON-lines rendering: one record per epoch, then a summary line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain data"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "stop_reason": self.stop_reason,
            "wall_clock_secs": self.wall_clock_secs,
            "final_secondary_mse": self.final_secondary_mse,
            "final_test_accuracy": self.final_test_accuracy,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// The samples to memorize together with their spatial-index codes.
#[derive(Clone, Debug)]
pub struct MemorySet {
    /// `[n, code_length]`
    pub codes: Vec<f32>,
    /// `[n, sample_len]`
    pub targets: Vec<f32>,
    pub labels: Vec<usize>,
    pub code_len: usize,
    pub sample_len: usize,
}

impl MemorySet {
    /// Pairs `d_mem` (already grouped by class) with `I(i, c)`.
    pub fn new(d_mem: &LabeledDataset, indexer: &SpatialIndexer) -> Result<Self> {
        let counts = d_mem.class_counts();
        let entries = indexer.enumerate(&counts)?;
        let mut expected = d_mem.labels.clone();
        expected.sort_unstable();
        if expected != d_mem.labels {
            return Err(Error::Data("memorization set must be grouped by class".into()));
        }
        let code_len = indexer.code_length();
        let mut codes = Vec::with_capacity(entries.len() * code_len);
        for e in &entries {
            codes.extend_from_slice(&e.vector);
        }
        Ok(Self {
            codes,
            targets: d_mem.images.clone(),
            labels: d_mem.labels.clone(),
            code_len,
            sample_len: d_mem.sample_len(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut codes = Vec::with_capacity(idx.len() * self.code_len);
        let mut targets = Vec::with_capacity(idx.len() * self.sample_len);
        for &i in idx {
            codes.extend_from_slice(&self.codes[i * self.code_len..(i + 1) * self.code_len]);
            targets.extend_from_slice(&self.targets[i * self.sample_len..(i + 1) * self.sample_len]);
        }
        (codes, targets)
    }
}

/// Mean squared error of `f'(I(i, c))` against the memorized samples.
pub fn memorization_mse(model: &Model, mem: &MemorySet) -> Result<f64> {
    if mem.is_empty() {
        return Ok(0.0);
    }
    let out = model.infer(&mem.codes, Direction::Transposed)?;
    crate::metrics::mse(out.data(), &mem.targets)
}

/// Classification accuracy of the forward model on `ds`.
pub fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Parameter("accuracy of an empty dataset".into()));
    }
    let pred = model.predict(&ds.images)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

fn check_shapes(model: &Model, train: &LabeledDataset, mem: Option<&MemorySet>) -> Result<()> {
    if model.input_len() != train.sample_len() {
        return Err(Error::Dimension(format!(
            "model takes {:?} but samples are {:?}",
            model.input_shape(),
            train.shape
        )));
    }
    if model.output_len() < train.classes {
        return Err(Error::Dimension(format!(
            "model has {} outputs for {} classes",
            model.output_len(),
            train.classes
        )));
    }
    if let Some(mem) = mem {
        if mem.code_len != model.output_len() {
            return Err(Error::Dimension(format!(
                "index codes have length {} but the transposed model takes {}",
                mem.code_len,
                model.output_len()
            )));
        }
        if mem.sample_len != model.input_len() {
            return Err(Error::Dimension("memorized samples do not match the model input".into()));
        }
    }
    Ok(())
}

fn primary_step(model: &mut Model, opt: &mut Optimizer, x: Vec<f32>, labels: &[usize]) -> Result<(f64, usize)> {
    let mut g = Graph::<f32>::new();
    let b = labels.len();
    let xv = g.input(Tensor::new(vec![b, x.len() / b], x)?);
    let logits = model.classify(&mut g, xv)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).data()[0] as f64;
    let c = g.shape(logits)[1];
    let hits = g
        .value(logits)
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    if !value.is_finite() {
        return Ok((value, hits));
    }
    g.backward(loss)?.accumulate_into(model.params_mut());
    opt.step(model.params_mut());
    Ok((value, hits))
}

fn secondary_step(model: &mut Model, opt: &mut Optimizer, lambda: f32, codes: Vec<f32>, targets: &[f32], code_len: usize) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let b = codes.len() / code_len;
    let cv = g.input(Tensor::new(vec![b, code_len], codes)?);
    let out = model.reconstruct(&mut g, cv)?;
    let mse = g.mse(out, targets)?;
    let value = g.value(mse).data()[0] as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let loss = g.scale(mse, lambda);
    g.backward(loss)?.accumulate_into(model.params_mut());
    opt.step(model.params_mut());
    Ok(value)
}

/// Alternates, per primary batch, a cross-entropy step on `f` and a
/// `λ·MSE(f'(I(i, c)), x)` step on the transposed view (when `mem` is given).
/// Memorization batches cycle through `mem` independently of the epoch.
/// Stops early once the memorization MSE has not improved by `min_delta`
/// for `early_stop_patience` epochs.
pub fn train(
    model: &mut Model,
    train_set: &LabeledDataset,
    mem: Option<&MemorySet>,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    check_shapes(model, train_set, mem)?;
    let mem = mem.filter(|m| !m.is_empty());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut primary = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, model.params());
    let mut secondary = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, model.params());
    let per = train_set.sample_len();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut mem_order: Vec<usize> = (0..mem.map_or(0, |m| m.len())).collect();
    mem_order.shuffle(&mut rng);
    let mut mem_cursor = 0;

    let mut epochs = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (bi, batch) in order.chunks(cfg.batch_primary).enumerate() {
            let mut x = Vec::with_capacity(batch.len() * per);
            for &i in batch {
                x.extend_from_slice(train_set.image(i));
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, h) = primary_step(model, &mut primary, x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    what: "primary loss",
                });
            }
            loss_sum += loss * batch.len() as f64;
            hits += h;

            let Some(mem) = mem else { continue };
            if cfg.lambda == 0.0 {
                continue;
            }
            let mut idx = Vec::with_capacity(cfg.batch_secondary);
            while idx.len() < cfg.batch_secondary.min(mem.len()) {
                if mem_cursor == mem_order.len() {
                    mem_order.shuffle(&mut rng);
                    mem_cursor = 0;
                }
                idx.push(mem_order[mem_cursor]);
                mem_cursor += 1;
            }
            let (codes, targets) = mem.gather(&idx);
            let l2 = secondary_step(model, &mut secondary, cfg.lambda, codes, &targets, mem.code_len)?;
            if !l2.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    what: "secondary loss",
                });
            }
        }

        let secondary_mse = mem.map(|m| memorization_mse(model, m)).transpose()?;
        let test_accuracy = test_set.map(|t| accuracy(model, t)).transpose()?;
        let mut early = false;
        if let Some(mse) = secondary_mse {
            if best - mse > cfg.min_delta {
                best = mse;
                stale = 0;
            } else {
                best = best.min(mse);
                stale += 1;
                early = stale >= cfg.early_stop_patience;
            }
        }
        let record = EpochRecord {
            epoch,
            primary_loss: loss_sum / train_set.len() as f64,
            primary_accuracy: hits as f64 / train_set.len() as f64,
            secondary_mse,
            best_secondary_mse: secondary_mse.map(|_| best),
            test_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);
        if early {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let last = epochs.last().expect("at least one epoch");
    Ok(TrainReport {
        final_secondary_mse: last.secondary_mse,
        final_test_accuracy: last.test_accuracy,
        epochs,
        stop_reason,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Alg. 1 over `d_mem` indexed by `indexer`.
pub fn transpose_train(
    model: &mut Model,
    train_set: &LabeledDataset,
    d_mem: &LabeledDataset,
    indexer: &SpatialIndexer,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mem = MemorySet::new(d_mem, indexer)?;
    train(model, train_set, Some(&mem), test_set, cfg, |_| {})
}

/// Classification only; used for benign baselines and fine-tuning.
pub fn train_primary_only(
    model: &mut Model,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train(model, train_set, None, test_set, cfg, |_| {})
}
