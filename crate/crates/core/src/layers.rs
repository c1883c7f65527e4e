//! Layer descriptions and the per-layer transposition rules.
//!
//! Every layer knows how to run itself on a [`Graph`] and how to produce its
//! transposed counterpart over the same parameter handles:
//!
//! | forward            | transposed                           |
//! |--------------------|--------------------------------------|
//! | linear `N→M`       | linear `M→N` reading the weight as θᵀ |
//! | conv2d `[M,C,K,K]` | deconv2d viewing the bank as `[C,M,K,K]` |
//! | pool2d (size s)    | nearest-neighbour upsampling (factor s) |
//! | transformer block  | itself                               |
//! | reshape `a→b`      | reshape `b→a`                        |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{Activation, PoolKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `y = x·θ` with `θ ∈ R^{in×out}`; when `transposed`, the stored weight is
    /// `[out×in]` and the layer computes `y = x·θᵀ`.
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
        #[serde(default)]
        transposed: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Consumes `in_ch` channels through a bank stored as `[in_ch, out_ch, k, k]`.
    Deconv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        pool: PoolKind,
        size: usize,
    },
    UpsampleNn {
        factor: usize,
        /// the pooling this upsampling undoes, restored on transposition
        #[serde(default)]
        inverse_of: Option<PoolKind>,
    },
    TransformerBlock {
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    },
    PositionalEncoding {
        tokens: usize,
        dim: usize,
    },
    Reshape {
        from: Vec<usize>,
        to: Vec<usize>,
    },
    Patchify {
        patch: usize,
    },
    Unpatchify {
        patch: usize,
        chw: [usize; 3],
    },
    TokenPool {
        tokens: usize,
    },
    TokenRepeat {
        tokens: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Deconv2d { .. } => "deconv2d",
            LayerKind::Pool2d { .. } => "pool2d",
            LayerKind::UpsampleNn { .. } => "upsample_nn",
            LayerKind::TransformerBlock { .. } => "transformer_block",
            LayerKind::PositionalEncoding { .. } => "positional_encoding",
            LayerKind::Reshape { .. } => "reshape",
            LayerKind::Patchify { .. } => "patchify",
            LayerKind::Unpatchify { .. } => "unpatchify",
            LayerKind::TokenPool { .. } => "token_pool",
            LayerKind::TokenRepeat { .. } => "token_repeat",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: String| Err(Error::Dimension(what));
        match self {
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => match input.split_last() {
                Some((&last, lead)) if last == *in_features => {
                    let mut s = lead.to_vec();
                    s.push(*out_features);
                    Ok(s)
                }
                _ => bad(format!("linear expects trailing dim {in_features}, got {input:?}")),
            },
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == *in_ch => {
                    let g = crate::kernels::ConvGeom::forward(c, *out_ch, h, w, *kernel, *stride, *padding)
                        .ok_or_else(|| {
                            Error::Dimension(format!("kernel {kernel} does not fit input {input:?}"))
                        })?;
                    Ok(vec![*out_ch, g.oh, g.ow])
                }
                _ => bad(format!("conv2d expects [{in_ch}, h, w], got {input:?}")),
            },
            LayerKind::Deconv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == *in_ch => {
                    let size = |n: usize| (n as isize - 1) * *stride as isize - 2 * *padding as isize + *kernel as isize;
                    let (oh, ow) = (size(h), size(w));
                    if oh <= 0 || ow <= 0 {
                        return bad(format!("deconv2d output {oh}×{ow} is not positive"));
                    }
                    Ok(vec![*out_ch, oh as usize, ow as usize])
                }
                _ => bad(format!("deconv2d expects [{in_ch}, h, w], got {input:?}")),
            },
            LayerKind::Pool2d { size, .. } => match *input {
                [c, h, w] if *size > 0 => Ok(vec![c, h.div_ceil(*size), w.div_ceil(*size)]),
                _ => bad(format!("pool2d expects [c, h, w] and positive size, got {input:?}")),
            },
            LayerKind::UpsampleNn { factor, .. } => match *input {
                [c, h, w] if *factor > 0 => Ok(vec![c, h * factor, w * factor]),
                _ => bad(format!("upsample expects [c, h, w] and positive factor, got {input:?}")),
            },
            LayerKind::TransformerBlock { dim, heads, mlp_dim } => {
                if *heads == 0 || dim % heads != 0 || *mlp_dim == 0 {
                    return Err(Error::Parameter(format!(
                        "transformer block dim {dim} / heads {heads} / mlp {mlp_dim} invalid"
                    )));
                }
                match *input {
                    [_, d] if d == *dim => Ok(input.to_vec()),
                    _ => bad(format!("transformer block expects [tokens, {dim}], got {input:?}")),
                }
            }
            LayerKind::PositionalEncoding { tokens, dim } => {
                if input == [*tokens, *dim] {
                    Ok(input.to_vec())
                } else {
                    bad(format!("positional encoding expects [{tokens}, {dim}], got {input:?}"))
                }
            }
            LayerKind::Reshape { from, to } => {
                if input != from.as_slice() || from.iter().product::<usize>() != to.iter().product::<usize>() {
                    bad(format!("reshape {from:?}→{to:?} cannot take {input:?}"))
                } else {
                    Ok(to.clone())
                }
            }
            LayerKind::Patchify { patch } => match *input {
                [c, h, w] if *patch > 0 && h % patch == 0 && w % patch == 0 => {
                    Ok(vec![(h / patch) * (w / patch), c * patch * patch])
                }
                _ => bad(format!("patch {patch} does not tile {input:?}")),
            },
            LayerKind::Unpatchify { patch, chw } => {
                let [c, h, w] = *chw;
                if *patch > 0 && h % patch == 0 && w % patch == 0 && input == [(h / patch) * (w / patch), c * patch * patch] {
                    Ok(chw.to_vec())
                } else {
                    bad(format!("unpatchify into {chw:?} cannot take {input:?}"))
                }
            }
            LayerKind::TokenPool { tokens } => match *input {
                [t, d] if t == *tokens => Ok(vec![d]),
                _ => bad(format!("token pool expects [{tokens}, d], got {input:?}")),
            },
            LayerKind::TokenRepeat { tokens } => match *input {
                [d] => Ok(vec![*tokens, d]),
                _ => bad(format!("token repeat expects [d], got {input:?}")),
            },
        }
    }

    /// The operation that undoes this one with reversed input/output dimensions.
    pub fn transposed(&self, in_shape: &[usize]) -> LayerKind {
        match self.clone() {
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
                transposed,
            } => LayerKind::Linear {
                in_features: out_features,
                out_features: in_features,
                bias,
                transposed: !transposed,
            },
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => LayerKind::Deconv2d {
                in_ch: out_ch,
                out_ch: in_ch,
                kernel,
                stride,
                padding,
            },
            LayerKind::Deconv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => LayerKind::Conv2d {
                in_ch: out_ch,
                out_ch: in_ch,
                kernel,
                stride,
                padding,
            },
            LayerKind::Pool2d { pool, size } => LayerKind::UpsampleNn {
                factor: size,
                inverse_of: Some(pool),
            },
            LayerKind::UpsampleNn { factor, inverse_of } => LayerKind::Pool2d {
                pool: inverse_of.unwrap_or(PoolKind::Avg),
                size: factor,
            },
            k @ (LayerKind::TransformerBlock { .. } | LayerKind::PositionalEncoding { .. }) => k,
            LayerKind::Reshape { from, to } => LayerKind::Reshape { from: to, to: from },
            LayerKind::Patchify { patch } => {
                let chw = [in_shape[0], in_shape[1], in_shape[2]];
                LayerKind::Unpatchify { patch, chw }
            }
            LayerKind::Unpatchify { patch, .. } => LayerKind::Patchify { patch },
            LayerKind::TokenPool { tokens } => LayerKind::TokenRepeat { tokens },
            LayerKind::TokenRepeat { tokens } => LayerKind::TokenPool { tokens },
        }
    }
}

/// User-facing description of one layer: the operation, its activation `k`
/// and the activation `k'` used when the layer runs transposed (defaults to `k`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub transpose_activation: Option<Activation>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, activation: Activation) -> Self {
        Self {
            kind,
            activation,
            transpose_activation: None,
        }
    }

    pub fn linear(in_features: usize, out_features: usize, activation: Activation) -> Self {
        Self::new(
            LayerKind::Linear {
                in_features,
                out_features,
                bias: true,
                transposed: false,
            },
            activation,
        )
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, activation: Activation) -> Self {
        Self::new(
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            },
            activation,
        )
    }

    pub fn pool(pool: PoolKind, size: usize) -> Self {
        Self::new(LayerKind::Pool2d { pool, size }, Activation::Identity)
    }

    pub fn reshape(from: Vec<usize>, to: Vec<usize>) -> Self {
        Self::new(LayerKind::Reshape { from, to }, Activation::Identity)
    }

    pub fn with_transpose_activation(mut self, act: Activation) -> Self {
        self.transpose_activation = Some(act);
        self
    }
}

/// Parameter handles of a built layer. `bias` is the bias of the current
/// direction; `transposed_bias` is the one used after transposition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRefs {
    pub weight: Option<ParamId>,
    pub bias: Option<ParamId>,
    pub transposed_bias: Option<ParamId>,
    /// transformer internals in a fixed order, see [`BlockParams`]
    pub extra: Vec<ParamId>,
}

/// A layer placed in a model: spec, per-sample shapes, parameter handles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub transpose_activation: Activation,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: ParamRefs,
}

impl Layer {
    /// Shape through which the weight is read in this direction; for a
    /// deconvolution this is the bank viewed as `[c, m, k, k]`.
    pub fn weight_view_shape(&self, store: &ParamStore) -> Option<Vec<usize>> {
        let w = store.get(self.params.weight?).shape().to_vec();
        Some(match self.kind {
            LayerKind::Linear { transposed: true, .. } => vec![w[1], w[0]],
            LayerKind::Deconv2d { .. } => vec![w[1], w[0], w[2], w[3]],
            _ => w,
        })
    }

    /// Reads weight element `index` (in the view returned by
    /// [`Layer::weight_view_shape`]) from the shared store.
    pub fn weight_at(&self, store: &ParamStore, index: &[usize]) -> Option<f32> {
        let w = store.get(self.params.weight?);
        let s = w.shape();
        let flat = match (&self.kind, index) {
            (LayerKind::Linear { transposed: true, .. }, &[i, j]) => j * s[1] + i,
            (LayerKind::Deconv2d { .. }, &[c, m, a, b]) => ((m * s[1] + c) * s[2] + a) * s[3] + b,
            _ => index
                .iter()
                .zip(s)
                .fold(0, |acc, (&i, &d)| acc * d + i),
        };
        w.data().get(flat).copied()
    }

    pub fn transposed(&self) -> Layer {
        Layer {
            kind: self.kind.transposed(&self.in_shape),
            activation: self.transpose_activation,
            transpose_activation: self.activation,
            in_shape: self.out_shape.clone(),
            out_shape: self.in_shape.clone(),
            params: ParamRefs {
                weight: self.params.weight,
                bias: self.params.transposed_bias,
                transposed_bias: self.params.bias,
                extra: self.params.extra.clone(),
            },
        }
    }

    /// Applies `k(A(x))` to a batch `x [batch, in_shape...]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let with_batch = |s: &[usize]| {
            let mut v = vec![batch];
            v.extend_from_slice(s);
            v
        };
        let y = match &self.kind {
            LayerKind::Linear {
                in_features,
                out_features,
                transposed,
                ..
            } => {
                let rows = g.value(x).len() / in_features;
                let flat = g.reshape(x, vec![rows, *in_features])?;
                let w = g.param(store, self.params.weight.expect("linear weight"));
                let mut y = g.matmul_t(flat, w, false, *transposed)?;
                if let Some(b) = self.params.bias {
                    let b = g.param(store, b);
                    y = g.add_trailing(y, b)?;
                }
                let _ = out_features;
                g.reshape(y, with_batch(&self.out_shape))?
            }
            LayerKind::Conv2d { stride, padding, .. } => {
                let w = g.param(store, self.params.weight.expect("conv weight"));
                let mut y = g.conv2d(x, w, *stride, *padding)?;
                if let Some(b) = self.params.bias {
                    let b = g.param(store, b);
                    y = g.add_channel(y, b)?;
                }
                y
            }
            LayerKind::Deconv2d { stride, padding, .. } => {
                let w = g.param(store, self.params.weight.expect("deconv weight"));
                let hw = (self.out_shape[1], self.out_shape[2]);
                let mut y = g.deconv2d(x, w, *stride, *padding, Some(hw))?;
                if let Some(b) = self.params.bias {
                    let b = g.param(store, b);
                    y = g.add_channel(y, b)?;
                }
                y
            }
            LayerKind::Pool2d { pool, size } => g.pool2d(x, *size, *pool)?,
            LayerKind::UpsampleNn { factor, .. } => {
                g.upsample_nn(x, *factor, Some((self.out_shape[1], self.out_shape[2])))?
            }
            LayerKind::TransformerBlock { heads, .. } => {
                let p = BlockParams::from_refs(&self.params.extra);
                transformer_block(g, store, &p, x, *heads)?
            }
            LayerKind::PositionalEncoding { .. } => {
                let table = g.param(store, self.params.weight.expect("positional table"));
                g.add_trailing(x, table)?
            }
            LayerKind::Reshape { to, .. } => g.reshape(x, with_batch(to))?,
            LayerKind::Patchify { patch } => g.patchify(x, *patch)?,
            LayerKind::Unpatchify { patch, chw } => g.unpatchify(x, *patch, *chw)?,
            LayerKind::TokenPool { .. } => g.token_mean(x)?,
            LayerKind::TokenRepeat { tokens } => g.token_repeat(x, *tokens)?,
        };
        Ok(g.activation(y, self.activation))
    }
}

/// Transformer block parameters in `ParamRefs::extra` order.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockParams {
    pub const COUNT: usize = 12;

    pub fn from_refs(ids: &[ParamId]) -> Self {
        assert_eq!(ids.len(), Self::COUNT, "transformer block needs {} params", Self::COUNT);
        Self {
            ln1_g: ids[0],
            ln1_b: ids[1],
            wq: ids[2],
            wk: ids[3],
            wv: ids[4],
            wo: ids[5],
            ln2_g: ids[6],
            ln2_b: ids[7],
            w1: ids[8],
            b1: ids[9],
            w2: ids[10],
            b2: ids[11],
        }
    }
}

/// Pre-norm block: `x + Wo·attn(LN(x))`, then `+ MLP(LN(·))` with GELU.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore,
    p: &BlockParams,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let rows = b * t;
    let p_ = |g: &mut Graph<T>, id| g.param(store, id);

    let (g1, b1) = (p_(g, p.ln1_g), p_(g, p.ln1_b));
    let h = g.layer_norm(x, g1, b1)?;
    let h = g.reshape(h, vec![rows, d])?;
    let proj = |g: &mut Graph<T>, w| -> Result<Var> {
        let w = g.param(store, w);
        let y = g.matmul(h, w)?;
        g.reshape(y, vec![b, t, d])
    };
    let q = proj(g, p.wq)?;
    let k = proj(g, p.wk)?;
    let v = proj(g, p.wv)?;
    let a = g.attention(q, k, v, heads)?;
    let a = g.reshape(a, vec![rows, d])?;
    let wo = p_(g, p.wo);
    let o = g.matmul(a, wo)?;
    let o = g.reshape(o, shape.clone())?;
    let x1 = g.add(x, o)?;

    let (g2, b2) = (p_(g, p.ln2_g), p_(g, p.ln2_b));
    let h2 = g.layer_norm(x1, g2, b2)?;
    let h2 = g.reshape(h2, vec![rows, d])?;
    let w1 = p_(g, p.w1);
    let m = g.matmul(h2, w1)?;
    let bias1 = p_(g, p.b1);
    let m = g.add_trailing(m, bias1)?;
    let m = g.activation(m, Activation::Gelu);
    let w2 = p_(g, p.w2);
    let m = g.matmul(m, w2)?;
    let bias2 = p_(g, p.b2);
    let m = g.add_trailing(m, bias2)?;
    let m = g.reshape(m, shape)?;
    g.add(x1, m)
}
