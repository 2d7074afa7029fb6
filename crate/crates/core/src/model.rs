//! The full language model: tied byte embedding, a stack of pre-norm
//! residual blocks whose mixer is either MHF or sliding-window attention,
//! final layer norm, and an output head sharing the embedding table.
//!
//! No positional encoding is added anywhere.

use std::fmt::Write as _;

use crate::attention::{swa_forward, swa_graph, SwaParams};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mhf::{mhf_forward, mhf_graph, mhf_param_count, MhfOptions, MhfParams, PRE_CONV_WIDTH};
use crate::mix::MixOptions;
use crate::param::ParamKind;
use crate::real::{Precision, Real};
use crate::rng::Rng;
use crate::tensor::{self, head_dim, Tensor, LN_EPS};

/// Base init std.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub window: usize,
    /// MHF layers per attention layer in the uniform interleave.
    pub ratio: usize,
    /// Explicit attention layer indices; overrides `ratio` when set.
    pub attn_layers: Option<Vec<usize>>,
    pub ln_eps: f64,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Mhf,
    Swa,
}

impl ModelConfig {
    fn base(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_head: d_model / n_heads.max(1),
            vocab_size: 256,
            window: 256,
            ratio: 2,
            attn_layers: None,
            ln_eps: LN_EPS,
            precision: Precision::F32,
        }
    }

    /// 512 wide, 12 layers, 8 heads of 64.
    pub fn tiny() -> Self {
        Self::base(512, 12, 8)
    }

    /// 64 wide, 3 layers (MHF, MHF, attention), 4 heads.
    pub fn micro() -> Self {
        Self::base(64, 3, 4)
    }

    pub fn with_dims(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self::base(d_model, n_layers, n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || self.d_model != self.n_heads * self.d_head {
            bad.push(format!(
                "d_model ({}) must equal n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.n_layers == 0 {
            bad.push("n_layers must be >= 1".into());
        }
        if self.vocab_size == 0 {
            bad.push("vocab_size must be >= 1".into());
        }
        if self.window == 0 {
            bad.push("window must be >= 1".into());
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            bad.push(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if let Some(layers) = &self.attn_layers {
            if let Some(&i) = layers.iter().find(|&&i| i >= self.n_layers) {
                bad.push(format!("attention layer {i} is outside 0..{}", self.n_layers));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }

    /// Gated MLP width: `2·D·4/3` rounded up to a multiple of 128.
    pub fn intermediate_size(&self) -> usize {
        let ffn = 2 * self.d_model * 4 / 3;
        ffn.div_ceil(128) * 128
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.n_layers)
            .map(|i| {
                let swa = match &self.attn_layers {
                    Some(layers) => layers.contains(&i),
                    None => (i + 1) % (self.ratio + 1) == 0,
                };
                if swa {
                    LayerKind::Swa
                } else {
                    LayerKind::Mhf
                }
            })
            .collect()
    }

    /// Std of residual output projections.
    pub fn scaled_std(&self) -> f64 {
        INIT_STD * (2.0 * self.n_layers as f64).powf(-0.5)
    }

    /// Learnable scalars, counting the tied embedding once.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let (d, i) = (self.d_model, self.intermediate_size());
        let mut total = self.vocab_size * d + 2 * d;
        for kind in self.layer_kinds() {
            total += 4 * d + 3 * d * i;
            total += match kind {
                LayerKind::Mhf => mhf_param_count(d, self.n_heads)?,
                LayerKind::Swa => 4 * d * d,
            };
        }
        Ok(total)
    }

    /// `key = value` lines, as stored in checkpoints.
    pub fn to_text(&self) -> String {
        let attn = match &self.attn_layers {
            None => "none".to_string(),
            Some(v) => v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        };
        let mut s = String::new();
        for (k, v) in [
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_head", self.d_head.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("window", self.window.to_string()),
            ("ratio", self.ratio.to_string()),
            ("attn_layers", attn),
            ("ln_eps", self.ln_eps.to_string()),
            ("precision", self.precision.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::checkpoint("config", format!("malformed line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::checkpoint(k, "missing from config"));
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::checkpoint(k, format!("`{}` is not an integer", map[k])))
        };
        let attn_layers = match get("attn_layers")?.as_str() {
            "none" => None,
            "" => Some(Vec::new()),
            list => Some(
                list.split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| Error::checkpoint("attn_layers", format!("`{list}` is not a list of integers")))?,
            ),
        };
        let ln_eps = get("ln_eps")?
            .parse()
            .map_err(|_| Error::checkpoint("ln_eps", "not a number"))?;
        let precision = get("precision")?.parse().map_err(|e: String| Error::checkpoint("precision", e))?;
        let cfg = Self {
            d_model: int("d_model")?,
            n_layers: int("n_layers")?,
            n_heads: int("n_heads")?,
            d_head: int("d_head")?,
            vocab_size: int("vocab_size")?,
            window: int("window")?,
            ratio: int("ratio")?,
            attn_layers,
            ln_eps,
            precision,
        };
        cfg.validate().map_err(|e| Error::checkpoint("config", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer<P> {
    Mhf(MhfParams<P>),
    Swa(SwaParams<P>),
}

impl<P> Mixer<P> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Mixer::Mhf(_) => LayerKind::Mhf,
            Mixer::Swa(_) => LayerKind::Swa,
        }
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Mixer<Q> {
        match self {
            Mixer::Mhf(p) => Mixer::Mhf(p.map(f)),
            Mixer::Swa(p) => Mixer::Swa(p.map(f)),
        }
    }

    fn slots(&self) -> Vec<(&'static str, ParamKind, &P)> {
        match self {
            Mixer::Mhf(p) => p.slots().to_vec(),
            Mixer::Swa(p) => p.slots().to_vec(),
        }
    }

    fn slots_mut(&mut self) -> Vec<(&'static str, ParamKind, &mut P)> {
        match self {
            Mixer::Mhf(p) => p.slots_mut().into_iter().collect(),
            Mixer::Swa(p) => p.slots_mut().into_iter().collect(),
        }
    }
}

/// Gated feed-forward: `W_out( W_in x ⊙ silu(W_gate x) )`, bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<P> {
    /// `[D, I]`
    pub w_in: P,
    /// `[D, I]`
    pub w_gate: P,
    /// `[I, D]`, scaled init.
    pub w_out: P,
}

impl<P> MlpParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> MlpParams<Q> {
        MlpParams {
            w_in: f(&self.w_in),
            w_gate: f(&self.w_gate),
            w_out: f(&self.w_out),
        }
    }

    pub fn slots(&self) -> [(&'static str, ParamKind, &P); 3] {
        [
            ("fc_1.weight", ParamKind::Weight, &self.w_in),
            ("fc_gate.weight", ParamKind::Weight, &self.w_gate),
            ("fc_2.weight", ParamKind::ScaledWeight, &self.w_out),
        ]
    }

    pub fn slots_mut(&mut self) -> [(&'static str, ParamKind, &mut P); 3] {
        [
            ("fc_1.weight", ParamKind::Weight, &mut self.w_in),
            ("fc_gate.weight", ParamKind::Weight, &mut self.w_gate),
            ("fc_2.weight", ParamKind::ScaledWeight, &mut self.w_out),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub mixer: Mixer<P>,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub mlp: MlpParams<P>,
}

impl<P> BlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            mixer: self.mixer.map(f),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            mlp: self.mlp.map(f),
        }
    }

    pub fn slots(&self) -> Vec<(String, ParamKind, &P)> {
        let mut out = vec![
            ("ln_1.weight".to_string(), ParamKind::NormGain, &self.ln1_gamma),
            ("ln_1.bias".to_string(), ParamKind::NormBias, &self.ln1_beta),
        ];
        out.extend(self.mixer.slots().into_iter().map(|(n, k, p)| (format!("mixer.{n}"), k, p)));
        out.push(("ln_2.weight".into(), ParamKind::NormGain, &self.ln2_gamma));
        out.push(("ln_2.bias".into(), ParamKind::NormBias, &self.ln2_beta));
        out.extend(self.mlp.slots().into_iter().map(|(n, k, p)| (format!("pos_ffn.{n}"), k, p)));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<(String, ParamKind, &mut P)> {
        let mut out = vec![
            ("ln_1.weight".to_string(), ParamKind::NormGain, &mut self.ln1_gamma),
            ("ln_1.bias".to_string(), ParamKind::NormBias, &mut self.ln1_beta),
        ];
        out.extend(self.mixer.slots_mut().into_iter().map(|(n, k, p)| (format!("mixer.{n}"), k, p)));
        out.push(("ln_2.weight".into(), ParamKind::NormGain, &mut self.ln2_gamma));
        out.push(("ln_2.bias".into(), ParamKind::NormBias, &mut self.ln2_beta));
        out.extend(self.mlp.slots_mut().into_iter().map(|(n, k, p)| (format!("pos_ffn.{n}"), k, p)));
        out
    }
}

/// All weights of the model. `wte` is both the input embedding and the
/// output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    /// `[V, D]`
    pub wte: P,
    pub blocks: Vec<BlockParams<P>>,
    pub lnf_gamma: P,
    pub lnf_beta: P,
}

impl<P> ModelParams<P> {
    /// Visits slots in the same order as [`ModelParams::slots`].
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            wte: f(&self.wte),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            lnf_gamma: f(&self.lnf_gamma),
            lnf_beta: f(&self.lnf_beta),
        }
    }

    /// Named slots in canonical (checkpoint) order.
    pub fn slots(&self) -> Vec<(String, ParamKind, &P)> {
        let mut out = vec![("wte.weight".to_string(), ParamKind::Embedding, &self.wte)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.slots().into_iter().map(|(n, k, p)| (format!("h.{i}.{n}"), k, p)));
        }
        out.push(("ln_f.weight".into(), ParamKind::NormGain, &self.lnf_gamma));
        out.push(("ln_f.bias".into(), ParamKind::NormBias, &self.lnf_beta));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<(String, ParamKind, &mut P)> {
        let mut out = vec![("wte.weight".to_string(), ParamKind::Embedding, &mut self.wte)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.slots_mut().into_iter().map(|(n, k, p)| (format!("h.{i}.{n}"), k, p)));
        }
        out.push(("ln_f.weight".into(), ParamKind::NormGain, &mut self.lnf_gamma));
        out.push(("ln_f.bias".into(), ParamKind::NormBias, &mut self.lnf_beta));
        out
    }

    /// Same layout, filled with `values` given in slot order.
    pub fn rebuild<Q>(&self, values: impl IntoIterator<Item = Q>) -> Result<ModelParams<Q>> {
        let values: Vec<Q> = values.into_iter().collect();
        let n = self.slots().len();
        if values.len() != n {
            return Err(Error::InvalidConfig(format!("expected {n} parameter slots, got {}", values.len())));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_| it.next().expect("length checked")))
    }
}

impl<P: Real> ModelParams<Tensor<P>> {
    pub fn numel(&self) -> usize {
        self.slots().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Put every weight on a tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<P>) -> ModelParams<NodeId> {
        self.map(&mut |t| g.param(t.clone()))
    }
}

/// Forward-pass settings that are not part of the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub mix: MixOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaracalModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

/// Shapes of every slot for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Result<ModelParams<Vec<usize>>> {
    cfg.validate()?;
    let (d, i, h) = (cfg.d_model, cfg.intermediate_size(), cfg.n_heads);
    let dh = head_dim(d, h)?;
    let blocks = cfg
        .layer_kinds()
        .into_iter()
        .map(|kind| BlockParams {
            ln1_gamma: vec![d],
            ln1_beta: vec![d],
            mixer: match kind {
                LayerKind::Mhf => Mixer::Mhf(MhfParams {
                    pre_conv: vec![d, PRE_CONV_WIDTH],
                    ln_gamma: vec![d],
                    ln_beta: vec![d],
                    w_v: vec![d, d],
                    b_v: vec![d],
                    w_g1: vec![d, d],
                    b_g1: vec![d],
                    w_g2: vec![h, dh, dh],
                    b_g2: vec![d],
                    w_o: vec![d, d],
                    b_o: vec![d],
                    n_heads: h,
                }),
                LayerKind::Swa => Mixer::Swa(SwaParams {
                    w_qkv: vec![d, 3 * d],
                    w_out: vec![d, d],
                    n_heads: h,
                    window: cfg.window,
                }),
            },
            ln2_gamma: vec![d],
            ln2_beta: vec![d],
            mlp: MlpParams {
                w_in: vec![d, i],
                w_gate: vec![d, i],
                w_out: vec![i, d],
            },
        })
        .collect();
    Ok(ModelParams {
        wte: vec![cfg.vocab_size, d],
        blocks,
        lnf_gamma: vec![d],
        lnf_beta: vec![d],
    })
}

/// Build a freshly initialized model. Deterministic in `seed`: one
/// generator is drawn from slot by slot in canonical order. The stored
/// precision follows `T`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<CaracalModel<T>> {
    let shapes = layout(cfg)?;
    let mut config = cfg.clone();
    config.precision = T::PRECISION;
    let scaled = cfg.scaled_std();
    let mut rng = Rng::new(seed);
    let mut values = Vec::new();
    for (_, kind, dims) in shapes.slots() {
        let n = dims.iter().product();
        let t = match kind {
            ParamKind::Weight | ParamKind::Embedding => Tensor::new(dims.clone(), rng.normal_vec(n, INIT_STD))?,
            ParamKind::ScaledWeight => Tensor::new(dims.clone(), rng.normal_vec(n, scaled))?,
            ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(dims.clone()),
            ParamKind::NormGain => Tensor::full(dims.clone(), T::one()),
        };
        values.push(t);
    }
    Ok(CaracalModel {
        config,
        params: shapes.rebuild(values)?,
    })
}

/// Gated MLP on `[.., D]`.
pub fn mlp_forward<T: Real>(x: &Tensor<T>, p: &MlpParams<Tensor<T>>) -> Result<Tensor<T>> {
    let h = tensor::linear(x, &p.w_in, None)?;
    let gate = tensor::silu(&tensor::linear(x, &p.w_gate, None)?);
    tensor::linear(&h.mul(&gate)?, &p.w_out, None)
}

pub fn mlp_graph<T: Real>(g: &mut Graph<T>, x: NodeId, p: &MlpParams<NodeId>) -> Result<NodeId> {
    let h = g.linear(x, p.w_in, None)?;
    let gate = g.linear(x, p.w_gate, None)?;
    let gate = g.silu(gate);
    let m = g.mul(h, gate)?;
    g.linear(m, p.w_out, None)
}

/// Pre-norm residual block: `h = x + mixer(ln_1(x))`, `h + mlp(ln_2(h))`.
pub fn block_forward<T: Real>(
    x: &Tensor<T>,
    p: &BlockParams<Tensor<T>>,
    ln_eps: f64,
    opts: ForwardOptions,
) -> Result<Tensor<T>> {
    let a = tensor::layer_norm(x, &p.ln1_gamma, &p.ln1_beta, ln_eps)?;
    let mixed = match &p.mixer {
        Mixer::Mhf(m) => mhf_forward(&a, m, MhfOptions { ln_eps, mix: opts.mix })?,
        Mixer::Swa(s) => swa_forward(&a, s)?,
    };
    let h = x.add(&mixed)?;
    let b = tensor::layer_norm(&h, &p.ln2_gamma, &p.ln2_beta, ln_eps)?;
    h.add(&mlp_forward(&b, &p.mlp)?)
}

pub fn block_graph<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &BlockParams<NodeId>,
    ln_eps: f64,
    opts: ForwardOptions,
) -> Result<NodeId> {
    let a = g.layer_norm(x, p.ln1_gamma, p.ln1_beta, ln_eps)?;
    let mixed = match &p.mixer {
        Mixer::Mhf(m) => mhf_graph(g, a, m, MhfOptions { ln_eps, mix: opts.mix })?,
        Mixer::Swa(s) => swa_graph(g, a, s)?,
    };
    let h = g.add(x, mixed)?;
    let b = g.layer_norm(h, p.ln2_gamma, p.ln2_beta, ln_eps)?;
    let m = mlp_graph(g, b, &p.mlp)?;
    g.add(h, m)
}

/// Record the model on a tape; returns logits `[B, L, V]`.
pub fn model_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ModelParams<NodeId>,
    ids: &[usize],
    batch: usize,
    len: usize,
    opts: ForwardOptions,
) -> Result<NodeId> {
    let mut x = g.embedding(p.wte, ids, batch, len)?;
    for block in &p.blocks {
        x = block_graph(g, x, block, cfg.ln_eps, opts)?;
    }
    let x = g.layer_norm(x, p.lnf_gamma, p.lnf_beta, cfg.ln_eps)?;
    g.linear_t(x, p.wte)
}

/// Record forward plus mean cross-entropy against `targets`.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ModelParams<NodeId>,
    ids: &[usize],
    targets: &[usize],
    batch: usize,
    len: usize,
    opts: ForwardOptions,
) -> Result<NodeId> {
    let logits = model_graph(g, cfg, p, ids, batch, len, opts)?;
    g.cross_entropy(logits, targets)
}

impl<T: Real> CaracalModel<T> {
    /// Logits `[B, L, V]` for ids laid out `[B, L]`.
    pub fn forward(&self, ids: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        self.forward_with(ids, batch, len, ForwardOptions::default())
    }

    pub fn forward_with(&self, ids: &[usize], batch: usize, len: usize, opts: ForwardOptions) -> Result<Tensor<T>> {
        if len == 0 {
            return Err(Error::InvalidShape {
                op: "model_forward",
                reason: "sequence length must be >= 1".into(),
            });
        }
        let mut g = Graph::no_grad();
        let bound = self.params.map(&mut |t| g.constant(t.clone()));
        let logits = model_graph(&mut g, &self.config, &bound, ids, batch, len, opts)?;
        Ok(g.take_value(logits))
    }

    /// Mean cross-entropy without recording gradients.
    pub fn loss(&self, ids: &[usize], targets: &[usize], batch: usize, len: usize) -> Result<f64> {
        let logits = self.forward(ids, batch, len)?;
        Ok(tensor::cross_entropy(&logits, targets)?.as_f64())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}

/// Convenience wrapper for [`CaracalModel::forward`].
pub fn model_forward<T: Real>(ids: &[usize], batch: usize, len: usize, model: &CaracalModel<T>) -> Result<Tensor<T>> {
    model.forward(ids, batch, len)
}
