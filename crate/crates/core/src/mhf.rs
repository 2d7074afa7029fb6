//! Multi-Head Fourier mixer.
//!
//! Forward pass on `x: [B, L, D]`:
//!
//! 1. `x̃ = causal_depthwise_conv1d(x)` with a width-3 kernel and no bias
//! 2. `x_norm = layer_norm(x̃)`
//! 3. content `x_v = x_norm W_V + b_V`
//! 4. gate `x_g = grouped_conv(silu(x_norm W_G1 + b_G1); W_G2) + b_G2`, one
//!    `d × d` block per head
//! 5. every channel: `r = causal_conv(x_v, x_g)` along the sequence, via
//!    pad, real FFT, pointwise product, inverse FFT, truncate
//! 6. `y = r W_O + b_O`
//!
//! Head `h` owns channels `h·d .. (h+1)·d`, so the head split is a view of
//! the channel axis and step 5 is independent per channel.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mix::{mix_channels, MixOptions};
use crate::param::ParamKind;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{self, bld, head_dim, Tensor, LN_EPS};

/// Pre-convolution kernel width.
pub const PRE_CONV_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MhfParams<P> {
    /// `[D, 3]` depthwise kernel, no bias.
    pub pre_conv: P,
    pub ln_gamma: P,
    pub ln_beta: P,
    /// `[D, D]`
    pub w_v: P,
    pub b_v: P,
    /// `[D, D]`
    pub w_g1: P,
    pub b_g1: P,
    /// `[H, d, d]`, input-major per head.
    pub w_g2: P,
    pub b_g2: P,
    /// `[D, D]`, scaled init.
    pub w_o: P,
    pub b_o: P,
    pub n_heads: usize,
}

impl<P> MhfParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> MhfParams<Q> {
        MhfParams {
            pre_conv: f(&self.pre_conv),
            ln_gamma: f(&self.ln_gamma),
            ln_beta: f(&self.ln_beta),
            w_v: f(&self.w_v),
            b_v: f(&self.b_v),
            w_g1: f(&self.w_g1),
            b_g1: f(&self.b_g1),
            w_g2: f(&self.w_g2),
            b_g2: f(&self.b_g2),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            n_heads: self.n_heads,
        }
    }

    /// Slots in canonical order with their names and roles.
    pub fn slots(&self) -> [(&'static str, ParamKind, &P); 11] {
        use ParamKind::*;
        [
            ("pre_conv.weight", Weight, &self.pre_conv),
            ("ln.weight", NormGain, &self.ln_gamma),
            ("ln.bias", NormBias, &self.ln_beta),
            ("W_V.weight", Weight, &self.w_v),
            ("W_V.bias", Bias, &self.b_v),
            ("W_G1.weight", Weight, &self.w_g1),
            ("W_G1.bias", Bias, &self.b_g1),
            ("W_G2.weight", Weight, &self.w_g2),
            ("W_G2.bias", Bias, &self.b_g2),
            ("linear.weight", ScaledWeight, &self.w_o),
            ("linear.bias", Bias, &self.b_o),
        ]
    }

    pub fn slots_mut(&mut self) -> [(&'static str, ParamKind, &mut P); 11] {
        use ParamKind::*;
        [
            ("pre_conv.weight", Weight, &mut self.pre_conv),
            ("ln.weight", NormGain, &mut self.ln_gamma),
            ("ln.bias", NormBias, &mut self.ln_beta),
            ("W_V.weight", Weight, &mut self.w_v),
            ("W_V.bias", Bias, &mut self.b_v),
            ("W_G1.weight", Weight, &mut self.w_g1),
            ("W_G1.bias", Bias, &mut self.b_g1),
            ("W_G2.weight", Weight, &mut self.w_g2),
            ("W_G2.bias", Bias, &mut self.b_g2),
            ("linear.weight", ScaledWeight, &mut self.w_o),
            ("linear.bias", Bias, &mut self.b_o),
        ]
    }
}

impl<T: Real> MhfParams<Tensor<T>> {
    /// Normal init with `std`, `scaled_std` for `W_O`; biases zero, norm
    /// gain one.
    pub fn init(d_model: usize, n_heads: usize, rng: &mut Rng, std: f64, scaled_std: f64) -> Result<Self> {
        let d = head_dim(d_model, n_heads)?;
        let mut normal = |dims: Vec<usize>, s: f64| {
            let n = dims.iter().product();
            Tensor::new(dims, rng.normal_vec(n, s))
        };
        let pre_conv = normal(vec![d_model, PRE_CONV_WIDTH], std)?;
        let w_v = normal(vec![d_model, d_model], std)?;
        let w_g1 = normal(vec![d_model, d_model], std)?;
        let w_g2 = normal(vec![n_heads, d, d], std)?;
        let w_o = normal(vec![d_model, d_model], scaled_std)?;
        let zeros = || Tensor::zeros(vec![d_model]);
        Ok(Self {
            pre_conv,
            ln_gamma: Tensor::full(vec![d_model], T::one()),
            ln_beta: zeros(),
            w_v,
            b_v: zeros(),
            w_g1,
            b_g1: zeros(),
            w_g2,
            b_g2: zeros(),
            w_o,
            b_o: zeros(),
            n_heads,
        })
    }

    /// Check every slot against the expected shape; returns `D`.
    pub fn validate(&self) -> Result<usize> {
        let dm = self.ln_gamma.dims().first().copied().unwrap_or(0);
        let d = head_dim(dm, self.n_heads)?;
        let want: [&[usize]; 11] = [
            &[dm, PRE_CONV_WIDTH],
            &[dm],
            &[dm],
            &[dm, dm],
            &[dm],
            &[dm, dm],
            &[dm],
            &[self.n_heads, d, d],
            &[dm],
            &[dm, dm],
            &[dm],
        ];
        for ((name, _, t), w) in self.slots().into_iter().zip(want) {
            if t.dims() != w {
                return Err(Error::InvalidShape {
                    op: "mhf params",
                    reason: format!("{name} has shape {:?}, expected {w:?}", t.dims()),
                });
            }
        }
        Ok(dm)
    }

    pub fn numel(&self) -> usize {
        self.slots().iter().map(|(_, _, t)| t.numel()).sum()
    }
}

/// Number of learnable scalars in one mixer of width `d_model`.
pub fn mhf_param_count(d_model: usize, n_heads: usize) -> Result<usize> {
    let d = head_dim(d_model, n_heads)?;
    Ok(PRE_CONV_WIDTH * d_model + 2 * d_model + 3 * (d_model * d_model + d_model) + n_heads * d * d + d_model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhfOptions {
    pub ln_eps: f64,
    pub mix: MixOptions,
}

impl Default for MhfOptions {
    fn default() -> Self {
        Self {
            ln_eps: LN_EPS,
            mix: MixOptions::default(),
        }
    }
}

/// Every intermediate of one forward pass, all `[B, L, D]`.
#[derive(Debug, Clone)]
pub struct MhfTrace<T> {
    pub conv: Tensor<T>,
    pub norm: Tensor<T>,
    pub content: Tensor<T>,
    pub gate: Tensor<T>,
    pub mixed: Tensor<T>,
    pub out: Tensor<T>,
}

fn check_input<T: Real>(x: &Tensor<T>, p: &MhfParams<Tensor<T>>) -> Result<()> {
    let dm = p.validate()?;
    let (_, l, d) = bld(x, "mhf_forward")?;
    if d != dm {
        return Err(Error::shape("mhf_forward", x.dims(), p.w_v.dims()));
    }
    if l == 0 {
        return Err(Error::InvalidShape {
            op: "mhf_forward",
            reason: "sequence length must be >= 1".into(),
        });
    }
    Ok(())
}

pub fn mhf_forward_traced<T: Real>(x: &Tensor<T>, p: &MhfParams<Tensor<T>>, opts: MhfOptions) -> Result<MhfTrace<T>> {
    check_input(x, p)?;
    let conv = tensor::causal_depthwise_conv1d(x, &p.pre_conv, None)?;
    let norm = tensor::layer_norm(&conv, &p.ln_gamma, &p.ln_beta, opts.ln_eps)?;
    let content = tensor::linear(&norm, &p.w_v, Some(&p.b_v))?;
    let pre_gate = tensor::silu(&tensor::linear(&norm, &p.w_g1, Some(&p.b_g1))?);
    let gate = tensor::grouped_pointwise_conv1d(&pre_gate, &p.w_g2, Some(&p.b_g2))?;
    let (mixed, _) = mix_channels(&content, &gate, opts.mix, false)?;
    let out = tensor::linear(&mixed, &p.w_o, Some(&p.b_o))?;
    Ok(MhfTrace {
        conv,
        norm,
        content,
        gate,
        mixed,
        out,
    })
}

pub fn mhf_forward<T: Real>(x: &Tensor<T>, p: &MhfParams<Tensor<T>>, opts: MhfOptions) -> Result<Tensor<T>> {
    mhf_forward_traced(x, p, opts).map(|t| t.out)
}

/// Record the mixer on a tape.
pub fn mhf_graph<T: Real>(g: &mut Graph<T>, x: NodeId, p: &MhfParams<NodeId>, opts: MhfOptions) -> Result<NodeId> {
    let conv = g.depthwise_conv(x, p.pre_conv)?;
    let norm = g.layer_norm(conv, p.ln_gamma, p.ln_beta, opts.ln_eps)?;
    let content = g.linear(norm, p.w_v, Some(p.b_v))?;
    let h = g.linear(norm, p.w_g1, Some(p.b_g1))?;
    let h = g.silu(h);
    let gate = g.grouped_conv(h, p.w_g2, Some(p.b_g2))?;
    let mixed = g.causal_mix(content, gate, opts.mix)?;
    g.linear(mixed, p.w_o, Some(p.b_o))
}
