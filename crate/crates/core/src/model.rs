//! A classifier and its transposed counterpart over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BlockParams, Layer, LayerKind, LayerSpec, ParamRefs};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Rows per chunk when running inference on large batches.
const INFERENCE_CHUNK: usize = 256;

const TRANSFORMER_INIT_STD: f64 = 0.02;

/// Which of the two layer lists a call runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Transposed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    forward: Vec<Layer>,
    transposed: Vec<Layer>,
    params: ParamStore,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Reverses a layer list, transposes each layer and moves every positional
/// encoding to the start of the transformer-block run it followed, so that
/// tokens are position-encoded before entering the blocks in either direction.
pub fn transpose_layers(layers: &[Layer]) -> Vec<Layer> {
    let mut out: Vec<Layer> = layers.iter().rev().map(Layer::transposed).collect();
    let mut j = 0;
    while j < out.len() {
        let is_pe = matches!(out[j].kind, LayerKind::PositionalEncoding { .. });
        if is_pe && j > 0 && matches!(out[j - 1].kind, LayerKind::TransformerBlock { .. }) {
            let mut start = j - 1;
            while start > 0 && matches!(out[start - 1].kind, LayerKind::TransformerBlock { .. }) {
                start -= 1;
            }
            let pe = out.remove(j);
            out.insert(start, pe);
        }
        j += 1;
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn init_params(
    kind: &LayerKind,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> ParamRefs {
    let mut refs = ParamRefs::default();
    let add = |store: &mut ParamStore, name: &str, t: Tensor<f32>| store.add(format!("{prefix}.{name}"), t);
    match *kind {
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
            transposed,
        } => {
            // stored layout is always [forward-in × forward-out]
            let (fin, fout) = if transposed {
                (out_features, in_features)
            } else {
                (in_features, out_features)
            };
            let w = uniform(rng, &[fin, fout], (6.0 / fin as f64).sqrt());
            refs.weight = Some(add(store, "weight", w));
            if bias {
                let b = add(store, "bias", Tensor::zeros(&[fout]));
                let tb = add(store, "tbias", Tensor::zeros(&[fin]));
                (refs.bias, refs.transposed_bias) = if transposed { (Some(tb), Some(b)) } else { (Some(b), Some(tb)) };
            }
        }
        LayerKind::Conv2d {
            in_ch, out_ch, kernel, ..
        } => {
            let fan_in = (in_ch * kernel * kernel) as f64;
            let w = uniform(rng, &[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt());
            refs.weight = Some(add(store, "weight", w));
            refs.bias = Some(add(store, "bias", Tensor::zeros(&[out_ch])));
            refs.transposed_bias = Some(add(store, "tbias", Tensor::zeros(&[in_ch])));
        }
        LayerKind::Deconv2d {
            in_ch, out_ch, kernel, ..
        } => {
            let fan_in = (out_ch * kernel * kernel) as f64;
            let w = uniform(rng, &[in_ch, out_ch, kernel, kernel], (6.0 / fan_in).sqrt());
            refs.weight = Some(add(store, "weight", w));
            refs.transposed_bias = Some(add(store, "bias", Tensor::zeros(&[in_ch])));
            refs.bias = Some(add(store, "tbias", Tensor::zeros(&[out_ch])));
        }
        LayerKind::TransformerBlock { dim, mlp_dim, .. } => {
            let s = TRANSFORMER_INIT_STD;
            let ids = [
                add(store, "ln1_g", Tensor::full(&[dim], 1.0)),
                add(store, "ln1_b", Tensor::zeros(&[dim])),
                add(store, "wq", normal(rng, &[dim, dim], s)),
                add(store, "wk", normal(rng, &[dim, dim], s)),
                add(store, "wv", normal(rng, &[dim, dim], s)),
                add(store, "wo", normal(rng, &[dim, dim], s)),
                add(store, "ln2_g", Tensor::full(&[dim], 1.0)),
                add(store, "ln2_b", Tensor::zeros(&[dim])),
                add(store, "w1", normal(rng, &[dim, mlp_dim], s)),
                add(store, "b1", Tensor::zeros(&[mlp_dim])),
                add(store, "w2", normal(rng, &[mlp_dim, dim], s)),
                add(store, "b2", Tensor::zeros(&[dim])),
            ];
            debug_assert_eq!(ids.len(), BlockParams::COUNT);
            refs.extra = ids.to_vec();
        }
        LayerKind::PositionalEncoding { tokens, dim } => {
            refs.weight = Some(add(store, "table", normal(rng, &[tokens, dim], TRANSFORMER_INIT_STD)));
        }
        _ => {}
    }
    refs
}

impl Model {
    /// Builds a model for per-sample inputs of `input_shape`, initialising
    /// weights Kaiming-uniform (transformer weights `N(0, 0.02²)`) and biases
    /// at zero, deterministically from `seed`.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Model> {
        if specs.is_empty() {
            return Err(Error::Construction {
                layer: 0,
                msg: "a model needs at least one layer".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let out_shape = spec.kind.output_shape(&shape).map_err(|e| Error::Construction {
                layer: i,
                msg: e.to_string(),
            })?;
            let refs = init_params(&spec.kind, &format!("layer{i}"), &mut params, &mut rng);
            layers.push(Layer {
                kind: spec.kind.clone(),
                activation: spec.activation,
                transpose_activation: spec.transpose_activation.unwrap_or(spec.activation),
                in_shape: shape.clone(),
                out_shape: out_shape.clone(),
                params: refs,
            });
            shape = out_shape;
        }
        Self::from_parts(layers, params)
    }

    /// Reassembles a model from layers and a parameter store (used when loading).
    pub fn from_parts(forward: Vec<Layer>, params: ParamStore) -> Result<Model> {
        for (i, w) in forward.windows(2).enumerate() {
            if w[0].out_shape != w[1].in_shape {
                return Err(Error::Construction {
                    layer: i + 1,
                    msg: format!("input {:?} does not follow {:?}", w[1].in_shape, w[0].out_shape),
                });
            }
        }
        for (i, l) in forward.iter().enumerate() {
            let ids = l.params.weight.iter().chain(&l.params.bias).chain(&l.params.transposed_bias).chain(&l.params.extra);
            if let Some(bad) = ids.into_iter().find(|id| id.0 >= params.len()) {
                return Err(Error::Construction {
                    layer: i,
                    msg: format!("parameter {} is not in the store", bad.0),
                });
            }
        }
        let transposed = transpose_layers(&forward);
        Ok(Model {
            input_shape: forward.first().map(|l| l.in_shape.clone()).unwrap_or_default(),
            output_shape: forward.last().map(|l| l.out_shape.clone()).unwrap_or_default(),
            forward,
            transposed,
            params,
        })
    }

    /// Turns the model around: the transposed network becomes the forward one.
    /// The parameter store moves with it, so both views share every weight.
    pub fn transpose(self) -> Model {
        Model {
            forward: self.transposed,
            transposed: self.forward,
            params: self.params,
            input_shape: self.output_shape,
            output_shape: self.input_shape,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.forward
    }

    pub fn transposed_layers(&self) -> &[Layer] {
        &self.transposed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Output size of the forward direction (number of classes).
    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn layers_for(&self, dir: Direction) -> &[Layer] {
        match dir {
            Direction::Forward => &self.forward,
            Direction::Transposed => &self.transposed,
        }
    }

    fn in_shape_for(&self, dir: Direction) -> &[usize] {
        match dir {
            Direction::Forward => &self.input_shape,
            Direction::Transposed => &self.output_shape,
        }
    }

    /// Records `dir`'s layers on `g`. `x` is `[batch, ...]` with any
    /// trailing layout of the right size.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var, dir: Direction) -> Result<Var> {
        self.run_on(&self.params, g, x, dir)
    }

    /// [`Model::run`] reading parameters from `store` instead of the model's own.
    pub fn run_on<T: Scalar>(&self, store: &ParamStore, g: &mut Graph<T>, x: Var, dir: Direction) -> Result<Var> {
        let in_shape = self.in_shape_for(dir);
        let per: usize = in_shape.iter().product();
        let total = g.value(x).len();
        if !total.is_multiple_of(per) || total == 0 {
            return Err(Error::Dimension(format!(
                "input of {total} values is not a batch of {in_shape:?}"
            )));
        }
        let mut shape = vec![total / per];
        shape.extend_from_slice(in_shape);
        let mut h = if g.shape(x) == shape.as_slice() { x } else { g.reshape(x, shape)? };
        for layer in self.layers_for(dir) {
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    /// Classifier logits `f(x)`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.run(g, x, Direction::Forward)
    }

    /// Transposed-model output `f'(code)`.
    pub fn reconstruct<T: Scalar>(&self, g: &mut Graph<T>, code: Var) -> Result<Var> {
        self.run(g, code, Direction::Transposed)
    }

    /// Inference without gradients; `x` holds whole samples back to back.
    /// Returns `[batch, out...]` values for `dir`.
    pub fn infer(&self, x: &[f32], dir: Direction) -> Result<Tensor<f32>> {
        let per: usize = self.in_shape_for(dir).iter().product();
        let out_shape = match dir {
            Direction::Forward => &self.output_shape,
            Direction::Transposed => &self.input_shape,
        };
        let out_per: usize = out_shape.iter().product();
        if x.is_empty() || !x.len().is_multiple_of(per) {
            return Err(Error::Dimension(format!(
                "input of {} values is not a batch of {:?}",
                x.len(),
                self.in_shape_for(dir)
            )));
        }
        let batch = x.len() / per;
        let mut out = Vec::with_capacity(batch * out_per);
        for chunk in x.chunks(INFERENCE_CHUNK * per) {
            let mut g = Graph::<f32>::frozen();
            let v = g.input(Tensor::new(vec![chunk.len() / per, per], chunk.to_vec())?);
            let y = self.run(&mut g, v, dir)?;
            out.extend_from_slice(g.value(y).data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(out_shape);
        Tensor::new(shape, out)
    }

    /// Predicted class for every sample in `x`.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<usize>> {
        let logits = self.infer(x, Direction::Forward)?;
        let c = self.output_len();
        Ok(logits.data().chunks(c).map(argmax).collect())
    }

    /// The specs this model's forward direction was built from.
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.forward
            .iter()
            .map(|l| LayerSpec {
                kind: l.kind.clone(),
                activation: l.activation,
                transpose_activation: Some(l.transpose_activation),
            })
            .collect()
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
