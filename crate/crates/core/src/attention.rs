//! Sliding-window causal self-attention.
//!
//! The fused projection `W_qkv` produces, per token, a `[H, 3, d]` block
//! (query, key, value for each head). Query `t` attends to keys
//! `max(0, t - window + 1) ..= t` with scale `1/√d`; no positional encoding
//! is applied. Setting `window >= L` gives full causal attention, which the
//! scaling benchmark uses as its quadratic baseline.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::param::ParamKind;
use crate::real::{dot, Real};
use crate::rng::Rng;
use crate::tensor::{bld, head_dim, Tensor};

/// Parameters of one attention mixer. Weight slots are generic so the same
/// structure can hold tensors, tape handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaParams<P> {
    /// `[D, 3D]`, bias-free.
    pub w_qkv: P,
    /// `[D, D]`, bias-free, scaled init.
    pub w_out: P,
    pub n_heads: usize,
    pub window: usize,
}

impl<P> SwaParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> SwaParams<Q> {
        SwaParams {
            w_qkv: f(&self.w_qkv),
            w_out: f(&self.w_out),
            n_heads: self.n_heads,
            window: self.window,
        }
    }

    /// Weight slots in canonical order with their names and roles.
    pub fn slots(&self) -> [(&'static str, ParamKind, &P); 2] {
        [
            ("c_attn.weight", ParamKind::Weight, &self.w_qkv),
            ("c_proj.weight", ParamKind::ScaledWeight, &self.w_out),
        ]
    }

    pub fn slots_mut(&mut self) -> [(&'static str, ParamKind, &mut P); 2] {
        [
            ("c_attn.weight", ParamKind::Weight, &mut self.w_qkv),
            ("c_proj.weight", ParamKind::ScaledWeight, &mut self.w_out),
        ]
    }
}

impl<T: Real> SwaParams<Tensor<T>> {
    /// Normal init: `std` for the fused projection, `scaled_std` for the
    /// output projection.
    pub fn init(d_model: usize, n_heads: usize, window: usize, rng: &mut Rng, std: f64, scaled_std: f64) -> Result<Self> {
        head_dim(d_model, n_heads)?;
        if window == 0 {
            return Err(Error::InvalidConfig("attention window must be >= 1".into()));
        }
        Ok(Self {
            w_qkv: Tensor::new(vec![d_model, 3 * d_model], rng.normal_vec(3 * d_model * d_model, std))?,
            w_out: Tensor::new(vec![d_model, d_model], rng.normal_vec(d_model * d_model, scaled_std))?,
            n_heads,
            window,
        })
    }

    pub fn validate(&self) -> Result<usize> {
        let d = match *self.w_out.dims() {
            [a, b] if a == b => a,
            _ => return Err(Error::shape("swa w_out", self.w_out.dims(), &[0, 0])),
        };
        if self.w_qkv.dims() != [d, 3 * d] {
            return Err(Error::shape("swa w_qkv", self.w_qkv.dims(), &[d, 3 * d]));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("attention window must be >= 1".into()));
        }
        head_dim(d, self.n_heads)?;
        Ok(d)
    }
}

/// Width of the saved probability rows.
fn row_width(window: usize, l: usize) -> usize {
    window.min(l).max(1)
}

/// Queries processed per GEMM block.
const QUERY_BLOCK: usize = 64;

/// Key range `[k0, q1)` covering every window of the query block `[q0, q1)`.
fn key_range(q0: usize, q1: usize, window: usize) -> (usize, usize) {
    ((q0 + 1).saturating_sub(window), q1)
}

/// Attention core on fused `qkv` (`[B, L, 3D]`), returning `[B, L, D]` before
/// the output projection, plus the softmax weights when `save` is set
/// (`[B, H, L, min(window, L)]`, row `t` left-aligned).
///
/// Queries are processed in blocks: one GEMM scores a block against the
/// union of its windows, out-of-window entries are masked before the
/// softmax, and a second GEMM applies the weights to the values.
pub fn attention_core<T: Real>(
    qkv: &Tensor<T>,
    n_heads: usize,
    window: usize,
    save: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, l, d3) = bld(qkv, "attention")?;
    if d3 % 3 != 0 {
        return Err(Error::InvalidShape {
            op: "attention",
            reason: format!("fused projection width {d3} is not a multiple of 3"),
        });
    }
    let dm = d3 / 3;
    let d = head_dim(dm, n_heads)?;
    if window == 0 {
        return Err(Error::InvalidConfig("attention window must be >= 1".into()));
    }
    let scale = T::of(1.0 / (d as f64).sqrt());
    let w = row_width(window, l);
    let src = qkv.data();
    let mut out = vec![T::zero(); b * l * dm];
    let mut probs = if save { vec![T::zero(); b * n_heads * l * w] } else { Vec::new() };
    let mut scores = Vec::new();
    let (s3, sm) = (d3 as isize, dm as isize);
    for bi in 0..b {
        for h in 0..n_heads {
            let (qo, ko, vo) = (h * 3 * d, h * 3 * d + d, h * 3 * d + 2 * d);
            for q0 in (0..l).step_by(QUERY_BLOCK) {
                let q1 = (q0 + QUERY_BLOCK).min(l);
                let (k0, k1) = key_range(q0, q1, window);
                let (bq, nk) = (q1 - q0, k1 - k0);
                scores.clear();
                scores.resize(bq * nk, T::zero());
                let q = &src[(bi * l + q0) * d3 + qo..];
                let k = &src[(bi * l + k0) * d3 + ko..];
                T::gemm(bq, d, nk, scale, q, s3, 1, k, 1, s3, T::zero(), &mut scores, nk as isize, 1);
                for (r, row) in scores.chunks_exact_mut(nk).enumerate() {
                    let t = q0 + r;
                    let lo = (t + 1).saturating_sub(window) - k0;
                    let hi = t + 1 - k0;
                    row[..lo].iter_mut().for_each(|x| *x = T::zero());
                    row[hi..].iter_mut().for_each(|x| *x = T::zero());
                    crate::tensor::softmax_in_place(&mut row[lo..hi]);
                    if save {
                        let base = ((bi * n_heads + h) * l + t) * w;
                        probs[base..base + hi - lo].copy_from_slice(&row[lo..hi]);
                    }
                }
                let v = &src[(bi * l + k0) * d3 + vo..];
                let dst = &mut out[(bi * l + q0) * dm + h * d..];
                T::gemm(bq, nk, d, T::one(), &scores, nk as isize, 1, v, s3, 1, T::zero(), dst, sm, 1);
            }
        }
    }
    Ok((Tensor::new(vec![b, l, dm], out)?, probs))
}

/// Gradient of [`attention_core`] with respect to the fused `qkv` input.
pub fn attention_core_backward<T: Real>(
    qkv: &Tensor<T>,
    probs: &[T],
    dy: &Tensor<T>,
    n_heads: usize,
    window: usize,
) -> Result<Tensor<T>> {
    let (b, l, d3) = bld(qkv, "attention backward")?;
    let dm = d3 / 3;
    let d = head_dim(dm, n_heads)?;
    if dy.dims() != [b, l, dm] {
        return Err(Error::shape("attention backward", dy.dims(), &[b, l, dm]));
    }
    let w = row_width(window, l);
    if probs.len() != b * n_heads * l * w {
        return Err(Error::NoGradGraph);
    }
    let scale = T::of(1.0 / (d as f64).sqrt());
    let src = qkv.data();
    let gy = dy.data();
    let mut grad = vec![T::zero(); qkv.numel()];
    let (mut p, mut ds) = (Vec::new(), Vec::new());
    let (s3, sm) = (d3 as isize, dm as isize);
    for bi in 0..b {
        for h in 0..n_heads {
            let (qo, ko, vo) = (h * 3 * d, h * 3 * d + d, h * 3 * d + 2 * d);
            for q0 in (0..l).step_by(QUERY_BLOCK) {
                let q1 = (q0 + QUERY_BLOCK).min(l);
                let (k0, k1) = key_range(q0, q1, window);
                let (bq, nk) = (q1 - q0, k1 - k0);
                let nki = nk as isize;
                p.clear();
                p.resize(bq * nk, T::zero());
                for (r, row) in p.chunks_exact_mut(nk).enumerate() {
                    let t = q0 + r;
                    let lo = (t + 1).saturating_sub(window) - k0;
                    let base = ((bi * n_heads + h) * l + t) * w;
                    row[lo..t + 1 - k0].copy_from_slice(&probs[base..base + t + 1 - k0 - lo]);
                }
                let (q_off, k_off, v_off) = ((bi * l + q0) * d3 + qo, (bi * l + k0) * d3 + ko, (bi * l + k0) * d3 + vo);
                let g_blk = &gy[(bi * l + q0) * dm + h * d..];
                ds.clear();
                ds.resize(bq * nk, T::zero());
                // dP = dY · Vᵀ, dV += Pᵀ · dY
                T::gemm(bq, d, nk, T::one(), g_blk, sm, 1, &src[v_off..], 1, s3, T::zero(), &mut ds, nki, 1);
                T::gemm(nk, bq, d, T::one(), &p, 1, nki, g_blk, sm, 1, T::one(), &mut grad[v_off..], s3, 1);
                for (dr, pr) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                    let weighted = dot(dr, pr);
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - weighted) * scale;
                    }
                }
                // dQ += dS · K, dK += dSᵀ · Q
                T::gemm(bq, nk, d, T::one(), &ds, nki, 1, &src[k_off..], s3, 1, T::one(), &mut grad[q_off..], s3, 1);
                T::gemm(nk, bq, d, T::one(), &ds, 1, nki, &src[q_off..], s3, 1, T::one(), &mut grad[k_off..], s3, 1);
            }
        }
    }
    Tensor::new(qkv.dims().to_vec(), grad)
}

/// Record the attention mixer on a tape: fused projection, windowed
/// attention, output projection.
pub fn swa_graph<T: Real>(g: &mut Graph<T>, x: NodeId, p: &SwaParams<NodeId>) -> Result<NodeId> {
    let qkv = g.linear(x, p.w_qkv, None)?;
    let y = g.attention(qkv, p.n_heads, p.window)?;
    g.linear(y, p.w_out, None)
}

/// Sliding-window attention forward pass on `[B, L, D]`.
pub fn swa_forward<T: Real>(x: &Tensor<T>, p: &SwaParams<Tensor<T>>) -> Result<Tensor<T>> {
    let d = p.validate()?;
    let (_, _, dx) = bld(x, "swa_forward")?;
    if dx != d {
        return Err(Error::shape("swa_forward", x.dims(), p.w_out.dims()));
    }
    let mut g = Graph::no_grad();
    let xi = g.constant(x.clone());
    let bound = p.map(&mut |t| g.constant(t.clone()));
    let y = swa_graph(&mut g, xi, &bound)?;
    Ok(g.take_value(y))
}
