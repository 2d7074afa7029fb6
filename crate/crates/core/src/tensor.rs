//! Dense row-major tensors and the neural-network primitives built on them.
//!
//! All operations are pure: inputs are borrowed, results are freshly
//! allocated. Slices and permutes copy; there are no views.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::real::Real;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!("dims {dims:?} hold {n} elements but data has {}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    /// Build from f64 values, narrowing to `T`.
    pub fn from_f64(dims: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    /// Row-major strides derived from `dims`.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims)
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.dims.len() {
            return Err(Error::shape("index", index, &self.dims));
        }
        let mut off = 0;
        for ((&i, &d), s) in index.iter().zip(&self.dims).zip(self.strides()) {
            if i >= d {
                return Err(Error::IndexOutOfRange {
                    op: "index",
                    index: i,
                    bound: d,
                });
            }
            off += i * s;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.dims.clone()));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::InvalidShape {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of the axes of {:?}", self.dims),
            });
        }
        let in_strides = self.strides();
        let out_dims: Vec<usize> = axes.iter().map(|&a| self.dims[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self {
            dims: out_dims,
            data: out,
        })
    }

    /// Copy of the sub-range `range` along `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: axis,
                bound: self.rank(),
            });
        }
        let extent = self.dims[axis];
        if range.start > range.end || range.end > extent {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: range.end.max(range.start),
                bound: extent,
            });
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let len = range.end - range.start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&self.data[base + range.start * inner..base + range.end * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Ok(Self { dims, data })
    }

    /// Prepend `pad` zeros along `axis`.
    pub fn left_pad(&self, axis: usize, pad: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::IndexOutOfRange {
                op: "left_pad",
                index: axis,
                bound: self.rank(),
            });
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let extent = self.dims[axis];
        let mut data = Vec::with_capacity(outer * (extent + pad) * inner);
        for o in 0..outer {
            data.extend(std::iter::repeat(T::zero()).take(pad * inner));
            data.extend_from_slice(&self.data[o * extent * inner..(o + 1) * extent * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] += pad;
        Ok(Self { dims, data })
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        // `other` may match the full shape or only its trailing dims.
        let k = other.rank();
        if k > self.rank() || self.dims[self.rank() - k..] != other.dims[..] {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        let n = other.numel().max(1);
        let data = self
            .data
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., m, k]`; `rhs` is either `[k, n]` (shared across the
    /// leading axes) or `[.., k, n]` with the same leading axes.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(Error::shape("matmul", &self.dims, &rhs.dims));
        }
        let (m, k) = (self.dims[self.rank() - 2], self.dims[self.rank() - 1]);
        let (k2, n) = (rhs.dims[rhs.rank() - 2], rhs.dims[rhs.rank() - 1]);
        let lead = &self.dims[..self.rank() - 2];
        let rhs_lead = &rhs.dims[..rhs.rank() - 2];
        if k != k2 || !(rhs_lead.is_empty() || rhs_lead == lead) {
            return Err(Error::shape("matmul", &self.dims, &rhs.dims));
        }
        let batches: usize = lead.iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        for bi in 0..batches {
            let a = &self.data[bi * m * k..(bi + 1) * m * k];
            let b = if rhs_lead.is_empty() {
                &rhs.data[..]
            } else {
                &rhs.data[bi * k * n..(bi + 1) * k * n]
            };
            let c = &mut out[bi * m * n..(bi + 1) * m * n];
            T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), c, n as isize, 1);
        }
        let mut dims = lead.to_vec();
        dims.extend([m, n]);
        Ok(Self { dims, data: out })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape("max_abs_diff", &self.dims, &other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.as_f64().abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

/// Split `[.., D]` into (rows, D).
fn rows_of<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if x.rank() == 0 {
        return Err(Error::InvalidShape {
            op,
            reason: "expected at least one axis".into(),
        });
    }
    let d = x.last_dim();
    Ok((if d == 0 { 0 } else { x.numel() / d }, d))
}

fn expect_dims<T: Real>(t: &Tensor<T>, want: &[usize], op: &'static str) -> Result<()> {
    if t.dims() != want {
        return Err(Error::shape(op, t.dims(), want));
    }
    Ok(())
}

/// Split `[B, L, D]`.
pub(crate) fn bld<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [b, l, d] => Ok((b, l, d)),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected [B, L, D], got {:?}", x.dims()),
        }),
    }
}

/// `y = x W + b` over the last axis. `W` is `[D_in, D_out]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, d_in) = rows_of(x, "linear")?;
    if w.rank() != 2 || w.dims()[0] != d_in {
        return Err(Error::shape("linear", x.dims(), w.dims()));
    }
    let d_out = w.dims()[1];
    let mut out = match b {
        Some(b) => {
            expect_dims(b, &[d_out], "linear bias")?;
            let mut v = Vec::with_capacity(rows * d_out);
            for _ in 0..rows {
                v.extend_from_slice(b.data());
            }
            v
        }
        None => vec![T::zero(); rows * d_out],
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        rows,
        d_in,
        d_out,
        T::one(),
        x.data(),
        d_in as isize,
        1,
        w.data(),
        d_out as isize,
        1,
        beta,
        &mut out,
        d_out as isize,
        1,
    );
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = d_out;
    Tensor::new(dims, out)
}

/// Per-row statistics saved by layer norm for its backward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over the last axis with population variance.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (rows, d) = rows_of(x, "layer_norm")?;
    expect_dims(gamma, &[d], "layer_norm gamma")?;
    expect_dims(beta, &[d], "layer_norm beta")?;
    if d == 0 {
        return Err(Error::InvalidShape {
            op: "layer_norm",
            reason: "normalized axis is empty".into(),
        });
    }
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(eps);
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (row, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        for (((o, &v), &g), &b) in dst.iter_mut().zip(row).zip(gamma.data()).zip(beta.data()) {
            *o = (v - mean) * rstd * g + b;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(x.dims().to_vec(), out)?, stats))
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    // exp(-x) may overflow to +inf for very negative x; the result is then 0.
    (T::one() + (-x).exp()).recip()
}

#[inline]
pub fn silu_scalar<T: Real>(x: T) -> T {
    x * sigmoid_scalar(x)
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = rows_of(x, "softmax")?;
    if n == 0 {
        return Err(Error::InvalidShape {
            op: "softmax",
            reason: "softmax over an empty axis".into(),
        });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.dims().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Depthwise causal convolution over `[B, L, D]` with kernel `[D, k]`.
///
/// Each channel is left-padded with `k - 1` zeros, so output position `t`
/// only sees inputs at positions `<= t`.
pub fn causal_depthwise_conv1d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, l, d) = bld(x, "causal_depthwise_conv1d")?;
    if kernel.rank() != 2 || kernel.dims()[0] != d || kernel.dims()[1] == 0 {
        return Err(Error::shape("causal_depthwise_conv1d", x.dims(), kernel.dims()));
    }
    let k = kernel.dims()[1];
    if let Some(bias) = bias {
        expect_dims(bias, &[d], "causal_depthwise_conv1d bias")?;
    }
    let kd = kernel.data();
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for t in 0..l {
            let dst = &mut out[(bi * l + t) * d..(bi * l + t + 1) * d];
            if let Some(bias) = bias {
                dst.copy_from_slice(bias.data());
            }
            // Tap i reads padded position t + i, i.e. input position t + i - (k - 1).
            for i in 0..k {
                let Some(src_t) = (t + i).checked_sub(k - 1) else {
                    continue;
                };
                let src = &xd[(bi * l + src_t) * d..(bi * l + src_t + 1) * d];
                for c in 0..d {
                    dst[c] += kd[c * k + i] * src[c];
                }
            }
        }
    }
    Tensor::new(vec![b, l, d], out)
}

/// Kernel-size-1 grouped convolution: each of the `H` channel groups of
/// width `d = D / H` is mixed by its own `d × d` matrix (`weights` is
/// `[H, d, d]`, input-major), plus a per-channel bias.
pub fn grouped_pointwise_conv1d<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, dm) = rows_of(x, "grouped_pointwise_conv1d")?;
    let [h, di, dout] = *weights.dims() else {
        return Err(Error::shape("grouped_pointwise_conv1d", x.dims(), weights.dims()));
    };
    if di != dout || h * di != dm {
        return Err(Error::InvalidShape {
            op: "grouped_pointwise_conv1d",
            reason: format!(
                "channel dim {dm} must equal groups × group width (weights {:?})",
                weights.dims()
            ),
        });
    }
    let d = di;
    let mut out = match bias {
        Some(bias) => {
            expect_dims(bias, &[dm], "grouped_pointwise_conv1d bias")?;
            let mut v = Vec::with_capacity(rows * dm);
            for _ in 0..rows {
                v.extend_from_slice(bias.data());
            }
            v
        }
        None => vec![T::zero(); rows * dm],
    };
    for g in 0..h {
        // Strided GEMM over the group's column block.
        T::gemm(
            rows,
            d,
            d,
            T::one(),
            &x.data()[g * d..],
            dm as isize,
            1,
            &weights.data()[g * d * d..(g + 1) * d * d],
            d as isize,
            1,
            T::one(),
            &mut out[g * d..],
            dm as isize,
            1,
        );
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Validate the channel split `D = H · d`.
pub fn head_dim(d_model: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::InvalidShape {
            op: "heads",
            reason: format!("d_model {d_model} is not divisible by n_heads {n_heads}"),
        });
    }
    Ok(d_model / n_heads)
}

/// Gather rows of `table` (`[V, D]`) for `ids` laid out as `[B, L]`.
pub fn embedding_lookup<T: Real>(
    ids: &[usize],
    batch: usize,
    len: usize,
    table: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [v, d] = *table.dims() else {
        return Err(Error::InvalidShape {
            op: "embedding_lookup",
            reason: format!("table must be [V, D], got {:?}", table.dims()),
        });
    };
    if ids.len() != batch * len {
        return Err(Error::LengthMismatch {
            op: "embedding_lookup",
            left: ids.len(),
            right: batch * len,
        });
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::IndexOutOfRange {
                op: "embedding_lookup",
                index: id,
                bound: v,
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![batch, len, d], out)
}

/// Mean next-token negative log likelihood; logits are `[.., V]`, one
/// target per row.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    ce_rows(logits, targets, None)
}

/// Cross-entropy plus the row softmax, computed in one pass.
pub fn cross_entropy_with_probs<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Vec<T>)> {
    let mut probs = vec![T::zero(); logits.numel()];
    let loss = ce_rows(logits, targets, Some(&mut probs))?;
    Ok((loss, probs))
}

fn ce_rows<T: Real>(logits: &Tensor<T>, targets: &[usize], mut probs: Option<&mut [T]>) -> Result<T> {
    let (rows, v) = rows_of(logits, "cross_entropy")?;
    if rows != targets.len() {
        return Err(Error::LengthMismatch {
            op: "cross_entropy",
            left: rows,
            right: targets.len(),
        });
    }
    if rows == 0 {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            reason: "no rows".into(),
        });
    }
    let mut total = 0.0f64;
    for (r, (row, &t)) in logits.data().chunks_exact(v).zip(targets).enumerate() {
        if t >= v {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                index: t,
                bound: v,
            });
        }
        let lse = match probs.as_deref_mut() {
            None => log_sum_exp(row),
            Some(p) => {
                let dst = &mut p[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - max).exp();
                    sum += *d;
                }
                let inv = sum.recip();
                for d in dst.iter_mut() {
                    *d *= inv;
                }
                max + sum.ln()
            }
        };
        total += (lse - row[t]).as_f64();
    }
    Ok(T::of(total / rows as f64))
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
