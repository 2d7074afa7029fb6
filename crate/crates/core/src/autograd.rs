//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! values its backward rule needs. [`Graph::backward`] walks the tape once in
//! reverse order and consumes it; a second call is an error. The tape is
//! rebuilt for every training step.
//!
//! Operations are coarse (a whole linear layer, layer norm, causal mix or
//! attention core is one node), each with a hand-written adjoint.

use crate::error::{Error, Result};
use crate::mix::{mix_channels, mix_channels_backward, MixOptions, MixSaved};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{self, bld, NormStats, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// Keeps `sigmoid(x)` when tracking.
    Silu(NodeId, Vec<T>),
    Sum(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// `x · wᵀ` (tied output head).
    LinearT {
        x: NodeId,
        w: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<T>,
    },
    DepthwiseConv {
        x: NodeId,
        kernel: NodeId,
    },
    GroupedConv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    CausalMix {
        v: NodeId,
        g: NodeId,
        opts: MixOptions,
        saved: Option<MixSaved<T>>,
    },
    Attention {
        qkv: NodeId,
        n_heads: usize,
        window: usize,
        probs: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    leaf: bool,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track: bool,
    consumed: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Move a leaf gradient out. Panics if `id` is not a tracked leaf.
    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0].take().expect("gradient requested for an untracked node")
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Tape that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
            consumed: false,
        }
    }

    /// Forward-only tape; nothing is saved for backward.
    pub fn no_grad() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = self.track && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            leaf: false,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            leaf: true,
            needs_grad: needs_grad && self.track,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Move a node's value out of the tape (the node is left empty).
    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(vec![0]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.same_shape("add", a, b)?;
        let out = v.0.add(v.1)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.same_shape("mul", a, b)?;
        let out = v.0.mul(v.1)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        if !self.track {
            let out = tensor::silu(self.value(x));
            return self.push(out, Op::Silu(x, Vec::new()), &[x]);
        }
        let xv = self.value(x);
        let sig: Vec<T> = xv.data().iter().map(|&v| tensor::sigmoid_scalar(v)).collect();
        let out = xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(xv.dims().to_vec(), out).expect("same shape");
        self.push(out, Op::Silu(x, sig), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// `x · wᵀ` for `x: [.., D]`, `w: [V, D]`.
    pub fn linear_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.last_dim();
        let [v, dw] = *wv.dims() else {
            return Err(Error::shape("linear_t", xv.dims(), wv.dims()));
        };
        if dw != d || xv.rank() == 0 {
            return Err(Error::shape("linear_t", xv.dims(), wv.dims()));
        }
        let rows = xv.numel() / d.max(1);
        let mut out = vec![T::zero(); rows * v];
        T::gemm(rows, d, v, T::one(), xv.data(), d as isize, 1, wv.data(), 1, d as isize, T::zero(), &mut out, v as isize, 1);
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = v;
        let out = Tensor::new(dims, out)?;
        Ok(self.push(out, Op::LinearT { x, w }, &[x, w]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (out, stats) = tensor::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = if self.track {
            stats
        } else {
            NormStats {
                mean: Vec::new(),
                rstd: Vec::new(),
            }
        };
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn depthwise_conv(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let out = tensor::causal_depthwise_conv1d(self.value(x), self.value(kernel), None)?;
        Ok(self.push(out, Op::DepthwiseConv { x, kernel }, &[x, kernel]))
    }

    pub fn grouped_conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = tensor::grouped_pointwise_conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::GroupedConv { x, w, b }, &inputs))
    }

    /// Channel-wise causal mixing of content `v` with gate `g`, both
    /// `[B, L, D]`.
    pub fn causal_mix(&mut self, v: NodeId, g: NodeId, opts: MixOptions) -> Result<NodeId> {
        let (out, saved) = mix_channels(self.value(v), self.value(g), opts, self.track)?;
        Ok(self.push(out, Op::CausalMix { v, g, opts, saved }, &[v, g]))
    }

    pub fn attention(&mut self, qkv: NodeId, n_heads: usize, window: usize) -> Result<NodeId> {
        let (out, probs) = crate::attention::attention_core(self.value(qkv), n_heads, window, self.track)?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                n_heads,
                window,
                probs,
            },
            &[qkv],
        ))
    }

    /// Row gather from `table` (`[V, D]`) for ids laid out `[batch, len]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], batch: usize, len: usize) -> Result<NodeId> {
        let out = tensor::embedding_lookup(ids, batch, len, self.value(table))?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean cross-entropy of `logits` (`[.., V]`) against one target per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if !self.track {
            let loss = tensor::cross_entropy(lv, targets)?;
            return Ok(self.push(
                Tensor::scalar(loss),
                Op::CrossEntropy {
                    logits,
                    targets: targets.to_vec(),
                    probs: Vec::new(),
                },
                &[logits],
            ));
        }
        let (loss, probs) = tensor::cross_entropy_with_probs(lv, targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(op, va.dims(), vb.dims()));
        }
        Ok((va, vb))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.track {
            return Err(Error::NoGradGraph);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let dims = self.value(loss).dims().to_vec();
        if dims.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(dims));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(dims, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].leaf {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(&op, &gout, &mut grads)?;
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.leaf && node.needs_grad {
                g.get_or_insert_with(|| Tensor::zeros(node.value.dims().to_vec()));
            } else {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: NodeId) -> Option<&'g mut [T]> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        Some(
            grads[id.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.dims().to_vec()))
                .data_mut(),
        )
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, contrib: impl IntoIterator<Item = T>) {
        if let Some(dst) = self.slot(grads, id) {
            for (d, c) in dst.iter_mut().zip(contrib) {
                *d += c;
            }
        }
    }

    fn backprop(&self, op: &Op<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = gout.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                let gb: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&v| v * *s)),
            Op::Silu(x, sig) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .zip(sig)
                        .map(|((&gy, &v), &s)| gy * s * (T::one() + v * (T::one() - s))),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, std::iter::repeat(g[0]).take(n));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let din = xv.last_dim();
                let dout = wv.dims()[1];
                let rows = xv.numel() / din.max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    T::gemm(rows, dout, din, T::one(), g, dout as isize, 1, wv.data(), 1, dout as isize, T::one(), gx, din as isize, 1);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    T::gemm(din, rows, dout, T::one(), xv.data(), 1, din as isize, g, dout as isize, 1, T::one(), gw, dout as isize, 1);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks_exact(dout) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::LinearT { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let d = xv.last_dim();
                let v = wv.dims()[0];
                let rows = xv.numel() / d.max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    T::gemm(rows, v, d, T::one(), g, v as isize, 1, wv.data(), d as isize, 1, T::one(), gx, d as isize, 1);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    T::gemm(v, rows, d, T::one(), g, 1, v as isize, xv.data(), d as isize, 1, T::one(), gw, d as isize, 1);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = xv.last_dim();
                let inv_d = T::of(1.0 / d as f64);
                let rows = xv.numel() / d;
                let mut gx = vec![T::zero(); xv.numel()];
                let mut ggam = vec![T::zero(); d];
                let mut gbet = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                        ggam[j] += gr[j] * xhat[j];
                        gbet[j] += gr[j];
                    }
                    let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                    for j in 0..d {
                        gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, ggam);
                self.accumulate(grads, *beta, gbet);
            }
            Op::DepthwiseConv { x, kernel } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (b, l, d) = bld(xv, "depthwise conv backward")?;
                let k = kv.dims()[1];
                let mut gx = vec![T::zero(); xv.numel()];
                let mut gk = vec![T::zero(); kv.numel()];
                for bi in 0..b {
                    for t in 0..l {
                        let gr = &g[(bi * l + t) * d..(bi * l + t + 1) * d];
                        for i in 0..k {
                            let Some(s) = (t + i).checked_sub(k - 1) else {
                                continue;
                            };
                            let base = (bi * l + s) * d;
                            for c in 0..d {
                                gx[base + c] += kv.data()[c * k + i] * gr[c];
                                gk[c * k + i] += gr[c] * xv.data()[base + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::GroupedConv { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let dm = xv.last_dim();
                let (h, d) = (wv.dims()[0], wv.dims()[1]);
                let rows = xv.numel() / dm;
                if let Some(gx) = self.slot(grads, *x) {
                    for gi in 0..h {
                        let wg = &wv.data()[gi * d * d..(gi + 1) * d * d];
                        T::gemm(rows, d, d, T::one(), &g[gi * d..], dm as isize, 1, wg, 1, d as isize, T::one(), &mut gx[gi * d..], dm as isize, 1);
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for gi in 0..h {
                        T::gemm(d, rows, d, T::one(), &xv.data()[gi * d..], 1, dm as isize, &g[gi * d..], dm as isize, 1, T::one(), &mut gw[gi * d * d..(gi + 1) * d * d], d as isize, 1);
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks_exact(dm) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::CausalMix { v, g: gate, opts, saved } => {
                let (dv, dg) = mix_channels_backward(gout, self.value(*v), self.value(*gate), *opts, saved.as_ref())?;
                self.accumulate(grads, *v, dv.into_data());
                self.accumulate(grads, *gate, dg.into_data());
            }
            Op::Attention {
                qkv,
                n_heads,
                window,
                probs,
            } => {
                let dq = crate::attention::attention_core_backward(self.value(*qkv), probs, gout, *n_heads, *window)?;
                self.accumulate(grads, *qkv, dq.into_data());
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = gout.last_dim();
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        for (dst, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *dst += v;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / T::of(targets.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * v..(r + 1) * v];
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for (d, &pi) in dst.iter_mut().zip(p) {
                            *d += pi * scale;
                        }
                        dst[t] -= scale;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Check every coordinate when the total count is at most this.
    pub exhaustive_limit: usize,
    /// Coordinates sampled otherwise.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-5,
            exhaustive_limit: 10_000,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradSample>,
    pub failures: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.max_rel_err.is_finite()
    }
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of `f` with central finite differences.
///
/// `f` records a scalar loss on the given graph from leaves bound to
/// `params` (in order).
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.take(id)).collect();

    let total: usize = params.iter().map(Tensor::numel).sum();
    let coords: Vec<(usize, usize)> = if total <= opts.exhaustive_limit {
        params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
            .collect()
    } else {
        let mut rng = Rng::new(opts.seed);
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < opts.samples.min(total) {
            chosen.insert(rng.below(total));
        }
        chosen
            .into_iter()
            .map(|mut flat| {
                let mut p = 0;
                while flat >= params[p].numel() {
                    flat -= params[p].numel();
                    p += 1;
                }
                (p, flat)
            })
            .collect()
    };

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: 0,
        tol: opts.tol,
    };
    for (p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + opts.h;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - opts.h;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let a = analytic[p].data()[i];
        let err = rel_err(a, numeric);
        report.checked += 1;
        if !(err < opts.tol) {
            report.failures += 1;
        }
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst = Some(GradSample {
                param: p,
                index: i,
                analytic: a,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(report)
}
