//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Image tensors are laid out `[batch, channels, height, width]`.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

/// Geometry of a 2-D convolution from a `[c, h, w]` input to `[m, oh, ow]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution; `None` when the kernel does not fit.
    pub fn forward(
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(Self {
            in_ch,
            out_ch,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    pub fn filter_len(&self) -> usize {
        self.out_ch * self.col_rows()
    }
}

/// Unrolls one `[c, h, w]` image into `[c*k*k, oh*ow]` patch columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into an image.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], f: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); batch * g.out_len()];
    for b in 0..batch {
        im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut col);
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        T::gemm(
            g.out_ch, rows, cols, T::one(), f, rows as isize, 1, &col, cols as isize, 1,
            T::zero(), ob, cols as isize, 1,
        );
    }
    out
}

/// Returns `(dx, dfilters)` for `y = conv2d(x, f)` given `dy`.
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    f: &[T],
    g: &ConvGeom,
    batch: usize,
    want_dx: bool,
    want_df: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * g.in_len()]);
    let mut df = want_df.then(|| vec![T::zero(); g.filter_len()]);
    for b in 0..batch {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        if let Some(df) = df.as_mut() {
            im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut col);
            // df += dy_b [m×cols] · col^T [cols×rows]
            T::gemm(
                g.out_ch, cols, rows, T::one(), dyb, cols as isize, 1, &col, 1, cols as isize,
                T::one(), df, rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = f^T [rows×m] · dy_b [m×cols]
            T::gemm(
                rows, g.out_ch, cols, T::one(), f, 1, rows as isize, dyb, cols as isize, 1,
                T::zero(), &mut col, cols as isize, 1,
            );
            col2im(&col, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
    (dx, df)
}

/// Transposed convolution: the linear adjoint of [`conv2d_forward`] for the
/// same geometry, mapping `[m, oh, ow]` back to `[c, h, w]`.
pub fn deconv2d_forward<T: Scalar>(y: &[T], f: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); batch * g.in_len()];
    for b in 0..batch {
        let yb = &y[b * g.out_len()..(b + 1) * g.out_len()];
        T::gemm(
            rows, g.out_ch, cols, T::one(), f, 1, rows as isize, yb, cols as isize, 1,
            T::zero(), &mut col, cols as isize, 1,
        );
        col2im(&col, g, &mut out[b * g.in_len()..(b + 1) * g.in_len()]);
    }
    out
}

/// Returns `(dy, dfilters)` for `out = deconv2d(y, f)` given `dout`.
pub fn deconv2d_backward<T: Scalar>(
    dout: &[T],
    y: &[T],
    f: &[T],
    g: &ConvGeom,
    batch: usize,
    want_dy: bool,
    want_df: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut dy = want_dy.then(|| vec![T::zero(); batch * g.out_len()]);
    let mut df = want_df.then(|| vec![T::zero(); g.filter_len()]);
    for b in 0..batch {
        im2col(&dout[b * g.in_len()..(b + 1) * g.in_len()], g, &mut col);
        if let Some(dy) = dy.as_mut() {
            T::gemm(
                g.out_ch, rows, cols, T::one(), f, rows as isize, 1, &col, cols as isize, 1,
                T::zero(), &mut dy[b * g.out_len()..(b + 1) * g.out_len()], cols as isize, 1,
            );
        }
        if let Some(df) = df.as_mut() {
            let yb = &y[b * g.out_len()..(b + 1) * g.out_len()];
            T::gemm(
                g.out_ch, cols, rows, T::one(), yb, cols as isize, 1, &col, 1, cols as isize,
                T::one(), df, rows as isize, 1,
            );
        }
    }
    (dy, df)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Sentinel argmax entry for a maximum that landed in the implicit zero padding.
pub const PAD_INDEX: u32 = u32::MAX;

pub fn pooled_len(n: usize, size: usize) -> usize {
    n.div_ceil(size)
}

/// Non-overlapping pooling over `[planes, h, w]`. Non-divisible edges are
/// padded with zeros on the right/bottom. For max pooling the returned vector
/// holds the flat input index of the first maximum of each patch.
pub fn pool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (pooled_len(h, size), pooled_len(w, size));
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = if kind == PoolKind::Max {
        vec![0u32; planes * oh * ow]
    } else {
        Vec::new()
    };
    let area = (size * size) as f64;
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let o = (p * oh + oi) * ow + oj;
                match kind {
                    PoolKind::Avg => {
                        // f64 accumulation keeps pool(upsample(v)) == v exact.
                        let mut acc = 0.0f64;
                        for di in 0..size {
                            let i = oi * size + di;
                            if i >= h {
                                break;
                            }
                            for dj in 0..size {
                                let j = oj * size + dj;
                                if j < w {
                                    acc += plane[i * w + j].as_f64();
                                }
                            }
                        }
                        out[o] = T::from_f64(acc / area);
                    }
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_idx = PAD_INDEX;
                        for di in 0..size {
                            for dj in 0..size {
                                let (i, j) = (oi * size + di, oj * size + dj);
                                let (v, idx) = if i < h && j < w {
                                    (plane[i * w + j], (p * h * w + i * w + j) as u32)
                                } else {
                                    (T::zero(), PAD_INDEX)
                                };
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out[o] = best;
                        arg[o] = best_idx;
                    }
                }
            }
        }
    }
    (out, arg)
}

#[allow(clippy::too_many_arguments)]
pub fn pool2d_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
    kind: PoolKind,
    argmax: &[u32],
) -> Vec<T> {
    let (oh, ow) = (pooled_len(h, size), pooled_len(w, size));
    let mut dx = vec![T::zero(); planes * h * w];
    match kind {
        PoolKind::Max => {
            for (o, &idx) in argmax.iter().enumerate() {
                if idx != PAD_INDEX {
                    dx[idx as usize] += dy[o];
                }
            }
        }
        PoolKind::Avg => {
            let inv = T::from_f64(1.0 / (size * size) as f64);
            for p in 0..planes {
                for i in 0..h {
                    for j in 0..w {
                        dx[(p * h + i) * w + j] = dy[(p * oh + i / size) * ow + j / size] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling of `[planes, h, w]` by `factor`, cropped to
/// `(out_h, out_w)` (each at most `h*factor`, `w*factor`).
pub fn upsample_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        for i in 0..out_h {
            let src = &x[(p * h + i / factor) * w..][..w];
            let dst = &mut out[(p * out_h + i) * out_w..][..out_w];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j / factor];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..out_h {
            for j in 0..out_w {
                dx[(p * h + i / factor) * w + j / factor] += dy[(p * out_h + i) * out_w + j];
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    #[default]
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "relu" => Activation::Relu,
            "gelu" => Activation::Gelu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "identity" | "none" => Activation::Identity,
            other => {
                return Err(crate::error::Error::Parameter(format!(
                    "unknown activation `{other}`"
                )))
            }
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// dy/dx given the input `x` and the output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_formula() {
        let g = ConvGeom::forward(1, 1, 4, 4, 2, 2, 0).unwrap();
        assert_eq!((g.oh, g.ow), (2, 2));
        let g = ConvGeom::forward(3, 8, 28, 28, 3, 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (28, 28));
        assert!(ConvGeom::forward(1, 1, 2, 2, 5, 1, 1).is_none());
    }

    #[test]
    fn max_pool_ties_go_to_first_index() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (y, arg) = pool2d_forward(&x, 1, 2, 2, 2, PoolKind::Max);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn pool_pads_non_divisible_edges_with_zeros() {
        let x = [3.0f32; 9];
        let (y, _) = pool2d_forward(&x, 1, 3, 3, 2, PoolKind::Avg);
        assert_eq!(y, vec![3.0, 1.5, 1.5, 0.75]);
        let x = [-1.0f32; 9];
        let (y, arg) = pool2d_forward(&x, 1, 3, 3, 2, PoolKind::Max);
        assert_eq!(y, vec![-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(arg[3], PAD_INDEX);
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert!("swish".parse::<Activation>().is_err());
    }
}
