//! Central-difference gradient oracle.
//!
//! Runs in `f64` so that the comparison measures the analytic backward pass
//! rather than single-precision rounding in the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{Activation, PoolKind};
use crate::layers::{LayerKind, LayerSpec};
use crate::model::{Direction, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over all checked entries of |analytic − numeric| / max(1e-8, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, element index) where the maximum was attained
    pub worst: (usize, usize),
    pub checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

fn eval<F>(build: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.check_finite()?;
    Ok(g.value(loss).data()[0])
}

/// Compares the analytic gradient of `build`'s scalar loss with respect to
/// every entry of `params` against central differences with step `eps`.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter("gradcheck step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input_with_grad(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.check_finite()?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; params[pi].len()];
        let analytic = grads.wrt(*var).unwrap_or(&zeros).to_vec();
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&build, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&build, &work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_err(analytic[ei], numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn eval_with_store<F>(build: &F, store: &ParamStore, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|p| g.input(p.clone())).collect();
    let loss = build(&mut g, store, &vars)?;
    g.check_finite()?;
    Ok(g.value(loss).data()[0])
}

/// Like [`grad_check`], but also checks every parameter of `store` that the
/// graph reaches. Parameters live in `f32`; the numeric derivative divides by
/// the step actually taken after rounding, so the comparison stays exact.
/// In the report, parameters are numbered after the inputs.
pub fn grad_check_with_params<F>(
    store: &mut ParamStore,
    inputs: &[Tensor<f64>],
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter("gradcheck step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|p| g.input_with_grad(p.clone())).collect();
    let loss = build(&mut g, store, &vars)?;
    g.check_finite()?;
    let grads = g.backward(loss)?;
    let param_grads = grads.params();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let note = |report: &mut GradCheckReport, slot: (usize, usize), a: f64, n: f64| {
        let e = rel_err(a, n);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = slot;
        }
        report.checked += 1;
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[pi].len()];
        let analytic = grads.wrt(*var).unwrap_or(&zeros).to_vec();
        for ei in 0..inputs[pi].len() {
            let orig = inputs[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval_with_store(&build, store, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval_with_store(&build, store, &work)?;
            work[pi].data_mut()[ei] = orig;
            note(&mut report, (pi, ei), analytic[ei], (plus - minus) / (2.0 * eps));
        }
    }

    for (id, analytic) in param_grads {
        let slot = inputs.len() + id.0;
        for ei in 0..analytic.len() {
            let orig = store.get(id).data()[ei];
            let up = (orig as f64 + eps) as f32;
            let down = (orig as f64 - eps) as f32;
            store.get_mut(id).data_mut()[ei] = up;
            let plus = eval_with_store(&build, store, inputs);
            store.get_mut(id).data_mut()[ei] = down;
            let minus = eval_with_store(&build, store, inputs);
            store.get_mut(id).data_mut()[ei] = orig;
            let numeric = (plus? - minus?) / (up as f64 - down as f64);
            note(&mut report, (slot, ei), analytic[ei], numeric);
        }
    }
    Ok(report)
}

/// Result of checking one operation over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

const SUITE_EPS: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;
const ATTENTION_TOLERANCE: f64 = 1e-2;

struct Case {
    name: &'static str,
    tolerance: f64,
    run: fn(u64) -> Result<GradCheckReport>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Values in `±[0.1, 1]`, away from the kink of ReLU.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.1, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    });
    t
}

/// Checks `dir` of a model built from `specs`, with every parameter redrawn
/// uniformly so that biases and gains are exercised too. The loss is a random
/// projection of the output so no gradient is trivially symmetric.
fn check_model(specs: &[LayerSpec], in_shape: &[usize], dir: Direction, batch: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::build(specs, in_shape, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let n = model.params().get(id).len();
        let vals: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        model.params_mut().assign(id, &vals)?;
    }
    let per: usize = match dir {
        Direction::Forward => model.input_len(),
        Direction::Transposed => model.output_len(),
    };
    let x = rand_tensor(&mut rng, &[batch, per], -1.0, 1.0);
    let out_len: usize = batch
        * match dir {
            Direction::Forward => model.output_len(),
            Direction::Transposed => model.input_len(),
        };
    let proj = rand_tensor(&mut rng, &[out_len], -1.0, 1.0);
    let mut store = std::mem::take(model.params_mut());
    grad_check_with_params(&mut store, &[x], SUITE_EPS, |g, store, v| {
        let y = model.run_on(store, g, v[0], dir)?;
        let n = g.value(y).len();
        let y = g.reshape(y, vec![n])?;
        let r = g.input(proj.clone());
        let prod = g.mul(y, r)?;
        Ok(g.sum(prod))
    })
}

fn activation_case(act: Activation, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = off_kink(&mut rng, &[12]);
    let proj = rand_tensor(&mut rng, &[12], -1.0, 1.0);
    grad_check(&[x], SUITE_EPS, |g, v| {
        let y = g.activation(v[0], act);
        let r = g.input(proj.clone());
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    })
}

fn lin(i: usize, o: usize) -> LayerSpec {
    LayerSpec::linear(i, o, Activation::Identity)
}

fn conv(c: usize, m: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::conv(c, m, 3, stride, pad, Activation::Identity)
}

fn block(dim: usize) -> LayerSpec {
    LayerSpec::new(
        LayerKind::TransformerBlock {
            dim,
            heads: 2,
            mlp_dim: 2 * dim,
        },
        Activation::Identity,
    )
}

fn token_model() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(LayerKind::Patchify { patch: 2 }, Activation::Identity),
        lin(4, 6),
        LayerSpec::new(LayerKind::PositionalEncoding { tokens: 4, dim: 6 }, Activation::Identity),
        block(6),
        LayerSpec::new(LayerKind::TokenPool { tokens: 4 }, Activation::Identity),
        lin(6, 3),
    ]
}

const CASES: &[Case] = &[
    Case { name: "linear", tolerance: TOLERANCE, run: |s| check_model(&[lin(6, 4)], &[6], Direction::Forward, 3, s) },
    Case { name: "linear_transposed", tolerance: TOLERANCE, run: |s| check_model(&[lin(6, 4)], &[6], Direction::Transposed, 3, s) },
    Case { name: "conv2d", tolerance: TOLERANCE, run: |s| check_model(&[conv(2, 3, 1, 1)], &[2, 5, 5], Direction::Forward, 2, s) },
    Case { name: "conv2d_strided", tolerance: TOLERANCE, run: |s| check_model(&[conv(2, 3, 2, 0)], &[2, 7, 7], Direction::Forward, 2, s) },
    Case { name: "deconv2d", tolerance: TOLERANCE, run: |s| check_model(&[conv(2, 3, 1, 1)], &[2, 5, 5], Direction::Transposed, 2, s) },
    Case { name: "deconv2d_strided", tolerance: TOLERANCE, run: |s| check_model(&[conv(2, 3, 2, 0)], &[2, 7, 7], Direction::Transposed, 2, s) },
    Case { name: "max_pool", tolerance: TOLERANCE, run: |s| check_model(&[LayerSpec::pool(PoolKind::Max, 2)], &[2, 5, 5], Direction::Forward, 2, s) },
    Case { name: "avg_pool", tolerance: TOLERANCE, run: |s| check_model(&[LayerSpec::pool(PoolKind::Avg, 2)], &[2, 5, 5], Direction::Forward, 2, s) },
    Case { name: "upsample", tolerance: TOLERANCE, run: |s| check_model(&[LayerSpec::pool(PoolKind::Max, 2)], &[2, 5, 5], Direction::Transposed, 2, s) },
    Case { name: "relu", tolerance: TOLERANCE, run: |s| activation_case(Activation::Relu, s) },
    Case { name: "gelu", tolerance: TOLERANCE, run: |s| activation_case(Activation::Gelu, s) },
    Case { name: "sigmoid", tolerance: TOLERANCE, run: |s| activation_case(Activation::Sigmoid, s) },
    Case { name: "tanh", tolerance: TOLERANCE, run: |s| activation_case(Activation::Tanh, s) },
    Case { name: "transformer_block", tolerance: ATTENTION_TOLERANCE, run: |s| check_model(&[block(8)], &[3, 8], Direction::Forward, 2, s) },
    Case { name: "transformer_block_transposed", tolerance: ATTENTION_TOLERANCE, run: |s| check_model(&[block(8)], &[3, 8], Direction::Transposed, 2, s) },
    Case { name: "token_model", tolerance: ATTENTION_TOLERANCE, run: |s| check_model(&token_model(), &[1, 4, 4], Direction::Forward, 2, s) },
    Case { name: "token_model_transposed", tolerance: ATTENTION_TOLERANCE, run: |s| check_model(&token_model(), &[1, 4, 4], Direction::Transposed, 2, s) },
    Case { name: "conv_pool_linear_l2", tolerance: TOLERANCE, run: composite_case },
    Case { name: "cross_entropy", tolerance: TOLERANCE, run: cross_entropy_case },
];

/// conv → max pool → linear, scored by squared error against a fixed target.
fn composite_case(seed: u64) -> Result<GradCheckReport> {
    let specs = [
        LayerSpec::conv(1, 2, 3, 1, 1, Activation::Tanh),
        LayerSpec::pool(PoolKind::Max, 2),
        LayerSpec::reshape(vec![2, 3, 3], vec![18]),
        lin(18, 4),
    ];
    let mut model = Model::build(&specs, &[1, 6, 6], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let x = rand_tensor(&mut rng, &[2, 36], -1.0, 1.0);
    let target: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut store = std::mem::take(model.params_mut());
    grad_check_with_params(&mut store, &[x], SUITE_EPS, |g, st, v| {
        let y = model.run_on(st, g, v[0], Direction::Forward)?;
        g.mse(y, &target)
    })
}

fn cross_entropy_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_tensor(&mut rng, &[4, 5], -2.0, 2.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    grad_check(&[logits], SUITE_EPS, |g, v| g.cross_entropy(v[0], &labels))
}

/// Names of every operation covered by [`run_suite`].
pub fn suite_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs every operation's gradient check at seeds `0..seeds`, keeping the
/// worst relative error per operation. `filter` restricts by name substring.
pub fn run_suite(seeds: usize, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in CASES.iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))) {
        let mut worst = 0.0f64;
        for seed in 0..seeds as u64 {
            let r = (case.run)(seed)?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(CaseResult {
            name: case.name,
            seeds,
            max_rel_error: worst,
            tolerance: case.tolerance,
            passed: worst < case.tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact() {
        let w = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = grad_check(&[w], 1e-3, |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn non_finite_loss_reports_node() {
        let w = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        let err = grad_check(&[w], 1e-3, |g, p| Ok(g.sum(p[0]))).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 0, .. }), "{err}");
    }
}
