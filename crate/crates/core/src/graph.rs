//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Parameters enter the tape by value through [`Graph::param`]; their
//! gradients are reported by [`ParamId`] and can be accumulated back into the
//! owning [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, ConvGeom, PoolKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddTrailing { x: Var, b: Var },
    AddChannel { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Activation { x: Var, kind: Activation },
    Conv2d { x: Var, f: Var, geom: ConvGeom },
    Deconv2d { y: Var, f: Var, geom: ConvGeom },
    Pool { x: Var, size: usize, kind: PoolKind, argmax: Vec<u32> },
    Upsample { x: Var, factor: usize },
    Reshape { x: Var },
    LayerNorm { x: Var, g: Var, b: Var, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    TokenMean { x: Var },
    TokenRepeat { x: Var },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
    Sum { x: Var },
    Mse { pred: Var, target: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddTrailing { .. } => "add_trailing",
            Op::AddChannel { .. } => "add_channel",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Activation { .. } => "activation",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Pool { .. } => "pool2d",
            Op::Upsample { .. } => "upsample_nn",
            Op::Reshape { .. } => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::TokenMean { .. } => "token_mean",
            Op::TokenRepeat { .. } => "token_repeat",
            Op::Patchify { .. } => "patchify",
            Op::Unpatchify { .. } => "unpatchify",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Operation tape. Build it by calling ops in execution order, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Clone, Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    param_grads: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_grads: true,
        }
    }

    /// A tape on which parameters are constants: no gradients flow to them.
    pub fn frozen() -> Self {
        Self {
            nodes: Vec::new(),
            param_grads: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// An input whose gradient is wanted (e.g. an adversarial code).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Copies a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let value: Tensor<T> = src.cast();
        let needs = self.param_grads && src.requires_grad();
        self.push(Op::Param(id), value, needs)
    }

    /// `a [m×k] · b [k×n]`, with either operand optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err(format!("matmul needs 2-d operands, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(dim_err(format!(
                "matmul inner dimensions disagree: {sa:?}{} · {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
        T::gemm(
            m, ka, n, T::one(), self.data(a), rsa, csa, self.data(b), rsb, csb, T::zero(),
            &mut out, n as isize, 1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Op::MatMul { a, b, ta, tb },
            Tensor::new(vec![m, n], out)?,
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds `b` broadcast over the leading dimensions of `x`; `b`'s shape must
    /// equal the trailing dimensions of `x` (bias vectors, positional tables).
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(dim_err(format!("cannot broadcast {sb:?} onto {sx:?}")));
        }
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_mut(bd.len()) {
            chunk.iter_mut().zip(&bd).for_each(|(o, &v)| *o += v);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Op::AddTrailing { x, b }, Tensor::new(sx, out)?, ng))
    }

    /// Adds a per-channel bias `b [c]` to `x [batch, c, ...]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(dim_err(format!("channel bias {sb:?} does not match {sx:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let v = bd[i % bd.len()];
            chunk.iter_mut().for_each(|o| *o += v);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Op::AddChannel { x, b }, Tensor::new(sx, out)?, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(s, out)?, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(s, out)?, ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * s).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(Op::Scale { x, s }, out, ng)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| kind.apply(a)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(Op::Activation { x, kind }, out, ng)
    }

    fn image_dims(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(dim_err(format!("{what} expects [batch, c, h, w], got {s:?}"))),
        }
    }

    /// Cross-correlation of `x [b, c, h, w]` with `f [m, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, f: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w) = self.image_dims(x, "conv2d")?;
        let (m, fc, k) = match *self.shape(f) {
            [m, fc, k1, k2] if k1 == k2 => (m, fc, k1),
            ref s => return Err(dim_err(format!("conv2d filters must be [m, c, k, k], got {s:?}"))),
        };
        if fc != c {
            return Err(dim_err(format!(
                "conv2d input has {c} channels but filters {:?} expect {fc}",
                self.shape(f)
            )));
        }
        let geom = ConvGeom::forward(c, m, h, w, k, stride, pad).ok_or_else(|| {
            dim_err(format!(
                "kernel {k} (stride {stride}, padding {pad}) does not fit input {h}×{w}"
            ))
        })?;
        let out = kernels::conv2d_forward(self.data(x), self.data(f), &geom, b);
        let ng = self.ng(x) || self.ng(f);
        Ok(self.push(
            Op::Conv2d { x, f, geom },
            Tensor::new(vec![b, m, geom.oh, geom.ow], out)?,
            ng,
        ))
    }

    /// Transposed convolution of `y [b, m, h, w]` through the bank `f [m, c, k, k]`
    /// viewed as `[c, m, k, k]`. The output spatial size defaults to
    /// `(h-1)·stride − 2·pad + k`; `out_hw` selects another size whose forward
    /// convolution yields `h × w` (used to undo odd-size convolutions).
    pub fn deconv2d(
        &mut self,
        y: Var,
        f: Var,
        stride: usize,
        pad: usize,
        out_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        let (b, m, h, w) = self.image_dims(y, "deconv2d")?;
        let (fm, c, k) = match *self.shape(f) {
            [fm, c, k1, k2] if k1 == k2 => (fm, c, k1),
            ref s => {
                return Err(dim_err(format!("deconv2d filters must be [m, c, k, k], got {s:?}")))
            }
        };
        if fm != m {
            return Err(dim_err(format!(
                "deconv2d input has {m} channels but filters {:?} produce {fm}",
                self.shape(f)
            )));
        }
        let (oh, ow) = match out_hw {
            Some(hw) => hw,
            None => {
                let size = |n: usize| (n as isize - 1) * stride as isize - 2 * pad as isize + k as isize;
                let (oh, ow) = (size(h), size(w));
                if oh <= 0 || ow <= 0 {
                    return Err(dim_err(format!(
                        "deconv2d output size {oh}×{ow} is not positive"
                    )));
                }
                (oh as usize, ow as usize)
            }
        };
        let geom = ConvGeom::forward(c, m, oh, ow, k, stride, pad)
            .filter(|g| g.oh == h && g.ow == w)
            .ok_or_else(|| {
                dim_err(format!(
                    "deconv2d output {oh}×{ow} is inconsistent with input {h}×{w} (k {k}, stride {stride}, pad {pad})"
                ))
            })?;
        let out = kernels::deconv2d_forward(self.data(y), self.data(f), &geom, b);
        let ng = self.ng(y) || self.ng(f);
        Ok(self.push(
            Op::Deconv2d { y, f, geom },
            Tensor::new(vec![b, c, oh, ow], out)?,
            ng,
        ))
    }

    pub fn pool2d(&mut self, x: Var, size: usize, kind: PoolKind) -> Result<Var> {
        if size == 0 {
            return Err(Error::Parameter("pool size must be positive".into()));
        }
        let (b, c, h, w) = self.image_dims(x, "pool2d")?;
        let (out, argmax) = kernels::pool2d_forward(self.data(x), b * c, h, w, size, kind);
        let shape = vec![b, c, kernels::pooled_len(h, size), kernels::pooled_len(w, size)];
        let ng = self.ng(x);
        Ok(self.push(
            Op::Pool {
                x,
                size,
                kind,
                argmax,
            },
            Tensor::new(shape, out)?,
            ng,
        ))
    }

    /// Nearest-neighbour upsampling, optionally cropped to `out_hw`.
    pub fn upsample_nn(
        &mut self,
        x: Var,
        factor: usize,
        out_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Parameter("upsample factor must be positive".into()));
        }
        let (b, c, h, w) = self.image_dims(x, "upsample_nn")?;
        let (oh, ow) = out_hw.unwrap_or((h * factor, w * factor));
        if oh > h * factor || ow > w * factor || oh == 0 || ow == 0 {
            return Err(dim_err(format!(
                "upsample crop {oh}×{ow} outside {}×{}",
                h * factor,
                w * factor
            )));
        }
        let out = kernels::upsample_forward(self.data(x), b * c, h, w, factor, oh, ow);
        let ng = self.ng(x);
        Ok(self.push(
            Op::Upsample { x, factor },
            Tensor::new(vec![b, c, oh, ow], out)?,
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(Op::Reshape { x }, t, ng))
    }

    /// Layer normalisation over the last dimension with gain `g` and shift `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        if self.shape(g) != [n] || self.shape(b) != [n] {
            return Err(dim_err(format!(
                "layer norm parameters {:?}/{:?} do not match feature size {n}",
                self.shape(g),
                self.shape(b)
            )));
        }
        let (xd, gd, bd) = (self.data(x), self.data(g), self.data(b));
        let rows = xd.len() / n;
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(T::from_f64(rs));
            for j in 0..n {
                let xhat = T::from_f64((row[j].as_f64() - mean) * rs);
                out[r * n + j] = xhat * gd[j] + bd[j];
            }
        }
        let ng = self.ng(x) || self.ng(g) || self.ng(b);
        Ok(self.push(Op::LayerNorm { x, g, b, rstd }, Tensor::new(sx, out)?, ng))
    }

    /// Multi-head scaled dot-product self-attention core on `[batch, tokens, dim]`
    /// query/key/value projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(dim_err(format!(
                "attention expects equal [batch, tokens, dim] operands, got {:?}/{:?}/{:?}",
                s,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (bsz, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("{heads} heads do not divide dimension {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); bsz * heads * t * t];
        let mut out = vec![T::zero(); bsz * t * d];
        let mut row = vec![0.0f64; t];
        for b in 0..bsz {
            for h in 0..heads {
                let base = b * t * d + h * dh;
                let pbase = (b * heads + h) * t * t;
                for i in 0..t {
                    let qi = &qd[base + i * d..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        let kj = &kd[base + j * d..][..dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        row[j] = s * scale;
                        max = max.max(row[j]);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for j in 0..t {
                        let p = T::from_f64(row[j] / z);
                        probs[pbase + i * t + j] = p;
                        let vj = &vd[base + j * d..][..dh];
                        let oi = &mut out[base + i * d..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &vv)| *o += p * vv);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            Tensor::new(s, out)?,
            ng,
        ))
    }

    /// Mean over the token axis: `[batch, tokens, dim] -> [batch, dim]`.
    pub fn token_mean(&mut self, x: Var) -> Result<Var> {
        let (b, t, d) = match *self.shape(x) {
            [b, t, d] => (b, t, d),
            ref s => return Err(dim_err(format!("token_mean expects 3-d input, got {s:?}"))),
        };
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * d];
        let inv = T::from_f64(1.0 / t as f64);
        for bi in 0..b {
            for ti in 0..t {
                let src = &xd[(bi * t + ti) * d..][..d];
                out[bi * d..(bi + 1) * d].iter_mut().zip(src).for_each(|(o, &v)| *o += v * inv);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Op::TokenMean { x }, Tensor::new(vec![b, d], out)?, ng))
    }

    /// Replicates `[batch, dim]` into `[batch, tokens, dim]`.
    pub fn token_repeat(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let (b, d) = match *self.shape(x) {
            [b, d] => (b, d),
            ref s => return Err(dim_err(format!("token_repeat expects 2-d input, got {s:?}"))),
        };
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * tokens * d);
        for bi in 0..b {
            for _ in 0..tokens {
                out.extend_from_slice(&xd[bi * d..(bi + 1) * d]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Op::TokenRepeat { x }, Tensor::new(vec![b, tokens, d], out)?, ng))
    }

    /// `[b, c, h, w] -> [b, (h/p)(w/p), c·p·p]`, non-overlapping patches in
    /// row-major order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (b, c, h, w) = self.image_dims(x, "patchify")?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(dim_err(format!("patch {patch} does not tile {h}×{w}")));
        }
        let perm = patch_perm(c, h, w, patch);
        let xd = self.data(x);
        let per = c * h * w;
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for (o, &src) in perm.iter().enumerate() {
                out[bi * per + o] = xd[bi * per + src];
            }
        }
        let shape = vec![b, (h / patch) * (w / patch), c * patch * patch];
        let ng = self.ng(x);
        Ok(self.push(Op::Patchify { x, patch }, Tensor::new(shape, out)?, ng))
    }

    /// Inverse of [`Graph::patchify`] for an image of shape `[c, h, w]`.
    pub fn unpatchify(&mut self, x: Var, patch: usize, chw: [usize; 3]) -> Result<Var> {
        let [c, h, w] = chw;
        let expect_t = (h / patch.max(1)) * (w / patch.max(1));
        let b = match *self.shape(x) {
            [b, t, f] if patch > 0 && h % patch == 0 && w % patch == 0 && t == expect_t && f == c * patch * patch => b,
            ref s => {
                return Err(dim_err(format!(
                    "unpatchify of {s:?} into [{c}, {h}, {w}] with patch {patch} is impossible"
                )))
            }
        };
        let perm = patch_perm(c, h, w, patch);
        let xd = self.data(x);
        let per = c * h * w;
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for (o, &dst) in perm.iter().enumerate() {
                out[bi * per + dst] = xd[bi * per + o];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Op::Unpatchify { x, patch },
            Tensor::new(vec![b, c, h, w], out)?,
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        let ng = self.ng(x);
        self.push(Op::Sum { x }, Tensor::scalar(T::from_f64(s)), ng)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != target.len() {
            return Err(dim_err(format!(
                "mse: prediction has {} values, target {}",
                p.len(),
                target.len()
            )));
        }
        let s: f64 = p
            .iter()
            .zip(target)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let loss = s / p.len() as f64;
        let ng = self.ng(pred);
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            Tensor::scalar(T::from_f64(loss)),
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `logits [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = match *self.shape(logits) {
            [b, c] => (b, c),
            ref s => return Err(dim_err(format!("cross entropy expects [batch, classes], got {s:?}"))),
        };
        if labels.len() != b {
            return Err(dim_err(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = T::from_f64((row[j].as_f64() - max).exp() / z);
            }
            loss += z.ln() + max - row[labels[i]].as_f64();
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(T::from_f64(loss / b as f64)),
            ng,
        ))
    }

    /// First node holding a NaN or infinity, as a diagnostic error.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: n.op.name(),
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if ta { sa[0] } else { sa[1] };
                if self.ng(a) {
                    // dA = dC · Bᵀ (or its transpose when A was transposed).
                    let mut da = vec![T::zero(); sa[0] * sa[1]];
                    let (rsb, csb) = if tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
                    // op(B)ᵀ has element (j, kk) = op(B)(kk, j)
                    let (rsc, csc) = if ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
                    T::gemm(
                        m, n, k, T::one(), dy, n as isize, 1, self.data(b), csb, rsb, T::zero(),
                        &mut da, rsc, csc,
                    );
                    acc(a, da);
                }
                if self.ng(b) {
                    let mut db = vec![T::zero(); sb[0] * sb[1]];
                    let (rsa, csa) = if ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
                    let (rsc, csc) = if tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
                    // d op(B) = op(A)ᵀ · dC
                    T::gemm(
                        k, m, n, T::one(), self.data(a), csa, rsa, dy, n as isize, 1, T::zero(),
                        &mut db, rsc, csc,
                    );
                    acc(b, db);
                }
            }
            &Op::AddTrailing { x, b } => {
                if self.ng(b) {
                    let n = self.value(b).len();
                    let mut db = vec![T::zero(); n];
                    for chunk in dy.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                    }
                    acc(b, db);
                }
                acc(x, dy.to_vec());
            }
            &Op::AddChannel { x, b } => {
                if self.ng(b) {
                    let s = self.shape(x);
                    let inner: usize = s[2..].iter().product();
                    let c = s[1];
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum();
                    }
                    acc(b, db);
                }
                acc(x, dy.to_vec());
            }
            &Op::Add { a, b } => {
                acc(a, dy.to_vec());
                acc(b, dy.to_vec());
            }
            &Op::Mul { a, b } => {
                if self.ng(a) {
                    acc(a, dy.iter().zip(self.data(b)).map(|(&g, &v)| g * v).collect());
                }
                if self.ng(b) {
                    acc(b, dy.iter().zip(self.data(a)).map(|(&g, &v)| g * v).collect());
                }
            }
            &Op::Scale { x, s } => acc(x, dy.iter().map(|&g| g * s).collect()),
            &Op::Activation { x, kind } => {
                let (xd, yd) = (self.data(x), node.value.data());
                acc(
                    x,
                    dy.iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(&g, (&xv, &yv))| g * kind.derivative(xv, yv))
                        .collect(),
                );
            }
            &Op::Conv2d { x, f, geom } => {
                let batch = self.shape(x)[0];
                let (dx, df) = kernels::conv2d_backward(
                    dy,
                    self.data(x),
                    self.data(f),
                    &geom,
                    batch,
                    self.ng(x),
                    self.ng(f),
                );
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(df) = df {
                    acc(f, df);
                }
            }
            &Op::Deconv2d { y, f, geom } => {
                let batch = self.shape(y)[0];
                let (dyy, df) = kernels::deconv2d_backward(
                    dy,
                    self.data(y),
                    self.data(f),
                    &geom,
                    batch,
                    self.ng(y),
                    self.ng(f),
                );
                if let Some(d) = dyy {
                    acc(y, d);
                }
                if let Some(df) = df {
                    acc(f, df);
                }
            }
            Op::Pool {
                x,
                size,
                kind,
                argmax,
            } => {
                let s = self.shape(*x);
                let dx = kernels::pool2d_backward(dy, s[0] * s[1], s[2], s[3], *size, *kind, argmax);
                acc(*x, dx);
            }
            &Op::Upsample { x, factor } => {
                let s = self.shape(x);
                let os = node.value.shape();
                let dx = kernels::upsample_backward(dy, s[0] * s[1], s[2], s[3], factor, os[2], os[3]);
                acc(x, dx);
            }
            &Op::Reshape { x } => acc(x, dy.to_vec()),
            Op::LayerNorm { x, g, b, rstd } => {
                let n = *self.shape(*x).last().unwrap();
                let (xd, gd) = (self.data(*x), self.data(*g));
                let rows = xd.len() / n;
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for r in 0..rows {
                    let row = &xd[r * n..(r + 1) * n];
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
                    let rs = rstd[r].as_f64();
                    let dyr = &dy[r * n..(r + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (row[j].as_f64() - mean) * rs;
                        let dxhat = dyr[j].as_f64() * gd[j].as_f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dg[j] += T::from_f64(dyr[j].as_f64() * xhat);
                        db[j] += dyr[j];
                    }
                    for j in 0..n {
                        let xhat = (row[j].as_f64() - mean) * rs;
                        let dxhat = dyr[j].as_f64() * gd[j].as_f64();
                        dx[r * n + j] = T::from_f64(
                            rs * (dxhat - sum_dxhat / n as f64 - xhat * sum_dxhat_xhat / n as f64),
                        );
                    }
                }
                acc(*x, dx);
                acc(*g, dg);
                acc(*b, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = self.shape(*q);
                let (bsz, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); t];
                for b in 0..bsz {
                    for h in 0..*heads {
                        let base = b * t * d + h * dh;
                        let pbase = (b * heads + h) * t * t;
                        for i in 0..t {
                            let doi = &dy[base + i * d..][..dh];
                            let p = &probs[pbase + i * t..][..t];
                            for j in 0..t {
                                let vj = &vd[base + j * d..][..dh];
                                dp[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                let dvj = &mut dv[base + j * d..][..dh];
                                dvj.iter_mut().zip(doi).for_each(|(a, &g)| *a += p[j] * g);
                            }
                            let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = &kd[base + j * d..][..dh];
                                let qi = &qd[base + i * d..][..dh];
                                let dqi = &mut dq[base + i * d..][..dh];
                                dqi.iter_mut().zip(kj).for_each(|(a, &kv)| *a += ds * kv);
                                let dkj = &mut dk[base + j * d..][..dh];
                                dkj.iter_mut().zip(qi).for_each(|(a, &qv)| *a += ds * qv);
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            &Op::TokenMean { x } => {
                let s = self.shape(x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let inv = T::from_f64(1.0 / t as f64);
                let mut dx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        dx[(bi * t + ti) * d..][..d]
                            .iter_mut()
                            .zip(&dy[bi * d..(bi + 1) * d])
                            .for_each(|(a, &g)| *a = g * inv);
                    }
                }
                acc(x, dx);
            }
            &Op::TokenRepeat { x } => {
                let s = node.value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); b * d];
                for bi in 0..b {
                    for ti in 0..t {
                        dx[bi * d..(bi + 1) * d]
                            .iter_mut()
                            .zip(&dy[(bi * t + ti) * d..][..d])
                            .for_each(|(a, &g)| *a += g);
                    }
                }
                acc(x, dx);
            }
            &Op::Patchify { x, patch } => {
                let s = self.shape(x);
                let perm = patch_perm(s[1], s[2], s[3], patch);
                let per = s[1] * s[2] * s[3];
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..s[0] {
                    for (o, &src) in perm.iter().enumerate() {
                        dx[bi * per + src] = dy[bi * per + o];
                    }
                }
                acc(x, dx);
            }
            &Op::Unpatchify { x, patch } => {
                let s = node.value.shape();
                let perm = patch_perm(s[1], s[2], s[3], patch);
                let per = s[1] * s[2] * s[3];
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..s[0] {
                    for (o, &dst) in perm.iter().enumerate() {
                        dx[bi * per + o] = dy[bi * per + dst];
                    }
                }
                acc(x, dx);
            }
            &Op::Sum { x } => acc(x, vec![dy[0]; self.value(x).len()]),
            Op::Mse { pred, target } => {
                let p = self.data(*pred);
                let c = dy[0] * T::from_f64(2.0 / p.len() as f64);
                acc(*pred, p.iter().zip(target).map(|(&a, &b)| c * (a - b)).collect());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = dy[0] / T::from_f64(labels.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * c + l] -= scale;
                }
                acc(*logits, g);
            }
        }
    }
}

/// Source index (within one `[c, h, w]` image) for each patchified position.
fn patch_perm(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (ph, pw) = (h / p, w / p);
    let mut perm = Vec::with_capacity(c * h * w);
    for ti in 0..ph {
        for tj in 0..pw {
            for ch in 0..c {
                for di in 0..p {
                    for dj in 0..p {
                        perm.push((ch * h + ti * p + di) * w + tj * p + dj);
                    }
                }
            }
        }
    }
    perm
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Per-parameter gradients, summed over every use of the parameter.
    pub fn params(&self) -> BTreeMap<ParamId, Vec<T>> {
        let mut out: BTreeMap<ParamId, Vec<T>> = BTreeMap::new();
        for &(id, node) in &self.params {
            let Some(g) = self.grads[node].as_deref() else { continue };
            match out.get_mut(&id) {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    out.insert(id, g.to_vec());
                }
            }
        }
        out
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.params() {
            let g32: Vec<f32> = g.iter().map(|v| v.as_f32()).collect();
            store.get_mut(id).accumulate_grad(&g32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[0.0; 6]));
        let b = g.input(t(&[2, 3], &[0.0; 6]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut g = Graph::<f64>::new();
        let a = g.input_with_grad(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn transposed_matmul_gradients_match_explicit_transpose() {
        let av = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let bv = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        // a: [3x2] used transposed -> [2x3]; b: [2x3] used transposed -> [3x2]
        let mut g = Graph::<f64>::new();
        let a = g.input_with_grad(t(&[3, 2], &av));
        let b = g.input_with_grad(t(&[2, 3], &bv));
        let c = g.matmul_t(a, b, true, true).unwrap();
        let w = g.input(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let cw = g.mul(c, w).unwrap();
        let s = g.sum(cw);
        let gr = g.backward(s).unwrap();

        let transpose = |v: &[f64], r: usize, c: usize| {
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = v[i * c + j];
                }
            }
            o
        };
        let mut h = Graph::<f64>::new();
        let at = h.input_with_grad(t(&[2, 3], &transpose(&av, 3, 2)));
        let bt = h.input_with_grad(t(&[3, 2], &transpose(&bv, 2, 3)));
        let c2 = h.matmul(at, bt).unwrap();
        assert_eq!(h.value(c2).data(), g.value(c).data());
        let w2 = h.input(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let cw2 = h.mul(c2, w2).unwrap();
        let s2 = h.sum(cw2);
        let gr2 = h.backward(s2).unwrap();
        assert_eq!(gr.wrt(a).unwrap(), transpose(gr2.wrt(at).unwrap(), 2, 3).as_slice());
        assert_eq!(gr.wrt(b).unwrap(), transpose(gr2.wrt(bt).unwrap(), 3, 2).as_slice());
    }

    #[test]
    fn sum_and_half_squared_norm_gradients() {
        let mut g = Graph::<f64>::new();
        let w = g.input_with_grad(t(&[2], &[3.0, -4.0]));
        let s = g.sum(w);
        assert_eq!(g.backward(s).unwrap().wrt(w).unwrap(), &[1.0, 1.0]);

        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        assert_eq!(g.backward(half).unwrap().wrt(w).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.input_with_grad(t(&[2], &[3.0, -4.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_scaling_and_block_average() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 3, 3], &[1.0; 9]));
        let f = g.input(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, f, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 9]);

        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.input(t(&[1, 1, 4, 4], &ramp));
        let f = g.input(t(&[1, 1, 2, 2], &[0.25; 4]));
        let y = g.conv2d(x, f, 2, 0).unwrap();
        // direct block sums
        let mut expect = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        s += ramp[(r * 2 + i) * 4 + c * 2 + j];
                    }
                }
                expect.push(s / 4.0);
            }
        }
        assert_eq!(g.value(y).data(), expect.as_slice());
        assert_eq!(expect, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn conv_kernel_too_large_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[0.0; 4]));
        let f = g.input(t(&[1, 1, 3, 3], &[0.0; 9]));
        assert!(matches!(g.conv2d(x, f, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn deconv_unit_filter_is_identity_and_shape_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let f = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.deconv2d(x, f, 1, 0, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let f = g.input(t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = g.deconv2d(x, f, 2, 0, None).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = g.pool2d(x, 2, PoolKind::Avg).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
        let x = g.input_with_grad(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.pool2d(x, 2, PoolKind::Max).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let y = g.pool2d(x, 2, PoolKind::Avg).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[0.25; 4]);
        assert!(matches!(g.pool2d(x, 0, PoolKind::Avg), Err(Error::Parameter(_))));
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let same = g.upsample_nn(x, 1, None).unwrap();
        assert_eq!(g.value(same).data(), g.value(x).data());
        let y = g.upsample_nn(x, 2, None).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn activations_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.activation(x, Activation::Relu);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(t(&[1], &[0.0]));
        let s = g.activation(z, Activation::Sigmoid);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn losses() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[0.3, 0.7]));
        let l = g.mse(x, &[0.3, 0.7]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let z = g.input(t(&[2], &[0.0, 0.0]));
        let l = g.mse(z, &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);

        let logits = g.input(t(&[2, 10], &[0.0; 20]));
        let l = g.cross_entropy(logits, &[3, 9]).unwrap();
        assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(g.cross_entropy(logits, &[3, 10]), Err(Error::Data(_))));
    }

    #[test]
    fn patchify_roundtrip() {
        let data: Vec<f64> = (0..2 * 2 * 4 * 4).map(f64::from).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2, 4, 4], &data));
        let p = g.patchify(x, 2).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 8]);
        // first token: channel 0 rows 0..2 cols 0..2, then channel 1
        assert_eq!(&g.value(p).data()[..8], &[0., 1., 4., 5., 16., 17., 20., 21.]);
        let back = g.unpatchify(p, 2, [2, 4, 4]).unwrap();
        assert_eq!(g.value(back).data(), data.as_slice());
    }

    #[test]
    fn frozen_graph_leaves_params_without_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::<f32>::frozen();
        let w = g.param(&store, id);
        let x = g.input_with_grad(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = g.mul(w, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.params().is_empty());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_param_gradients_are_summed() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut g = Graph::<f32>::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        let y = g.mul(w1, w2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.params()[&id], vec![6.0]);
        grads.accumulate_into(&mut store);
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[12.0]);
    }
}
