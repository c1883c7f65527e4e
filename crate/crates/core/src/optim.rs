//! First-order optimizers over a [`ParamStore`]'s gradient buffers.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
    /// Adam with decoupled weight decay
    Adamw,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Optimizer state for one store. Parameters without a gradient are skipped
/// and their moments left alone.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    weight_decay: f32,
    step: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32, store: &ParamStore) -> Self {
        let zeros = |_| Vec::new();
        Self {
            kind,
            lr,
            weight_decay,
            step: 0,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step;
        let (lr, wd) = (self.lr, self.weight_decay);
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.take_grad() else { continue };
            let w = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(&grad) {
                        *wi -= lr * (gi + wd * *wi);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let decoupled = self.kind == OptimizerKind::Adamw;
                    let m = &mut self.first[id.0];
                    let v = &mut self.second[id.0];
                    if m.is_empty() {
                        m.resize(w.len(), 0.0);
                        v.resize(w.len(), 0.0);
                    }
                    for i in 0..w.len() {
                        let g = if decoupled { grad[i] } else { grad[i] + wd * w[i] };
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                        if decoupled {
                            w[i] -= lr * wd * w[i];
                        }
                        w[i] -= lr * update;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with_grad(w: f32, g: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![w]));
        s.get_mut(id).accumulate_grad(&[g]);
        s
    }

    #[test]
    fn sgd_step() {
        let mut s = store_with_grad(1.0, 0.5);
        Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0, &s).step(&mut s);
        assert!((s.flatten()[0] - 0.95).abs() < 1e-7);
        assert!(s.get(crate::ParamId(0)).grad().is_none());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store_with_grad(1.0, 3.0);
        Optimizer::new(OptimizerKind::Adam, 0.01, 0.0, &s).step(&mut s);
        assert!((s.flatten()[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn adamw_decays_without_gradient_signal() {
        let mut s = store_with_grad(2.0, 0.0);
        Optimizer::new(OptimizerKind::Adamw, 0.1, 0.5, &s).step(&mut s);
        assert!((s.flatten()[0] - 1.9).abs() < 1e-6);
    }
}
