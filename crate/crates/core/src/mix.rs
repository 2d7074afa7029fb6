//! Channel-wise causal mixing over `[B, L, D]` tensors.
//!
//! Every `(batch, channel)` pair is an independent length-`L` causal
//! convolution of the content stream with the gate stream. Heads are
//! contiguous channel blocks, so the per-head split needs no data movement.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::spectral::{self, mix_nfft, next_pow2, RealFftPlan};
use crate::tensor::{bld, Tensor};

/// How the per-channel causal convolution is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixPath {
    /// One transform plan shared by every channel of the call.
    #[default]
    Fft,
    /// Independent 1-D [`spectral::causal_mix_fft`] call per channel.
    FftPerChannel,
    /// `O(L²)` direct summation.
    Direct,
    /// Unpadded transform (circular convolution). Non-causal; fault injection
    /// only.
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MixOptions {
    pub path: MixPath,
    /// Run the spectral arithmetic in f64 regardless of the tensor type.
    pub force_f64: bool,
}

impl MixOptions {
    pub fn with_path(path: MixPath) -> Self {
        Self {
            path,
            force_f64: false,
        }
    }
}

/// Spectra retained from the forward pass of the batched FFT path.
#[derive(Debug, Clone)]
pub struct MixSaved<T> {
    nfft: usize,
    v_spec: Vec<Complex<T>>,
    g_spec: Vec<Complex<T>>,
}

/// Tile edge for the cache-blocked transposes.
const TILE: usize = 32;

/// Transpose a row-major `rows × cols` matrix into `dst` (`cols × rows`).
fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                let row = &src[r * cols..(r + 1) * cols];
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
}

/// `[B, L, D]` → channel-major rows `[B·D][L]`.
fn to_channels<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (b, l, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks_exact(l * d).zip(out.chunks_exact_mut(l * d)) {
        transpose_into(src, l, d, dst);
    }
    debug_assert_eq!(out.len(), b * l * d);
    out
}

fn from_channels<T: Real>(chan: &[T], b: usize, l: usize, d: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); b * l * d];
    for (src, dst) in chan.chunks_exact(l * d).zip(out.chunks_exact_mut(l * d)) {
        transpose_into(src, d, l, dst);
    }
    Tensor::new(vec![b, l, d], out).expect("shape preserved")
}

fn check_pair<T: Real>(v: &Tensor<T>, g: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let dims = bld(v, "causal mix")?;
    if v.dims() != g.dims() {
        return Err(Error::shape("causal mix", v.dims(), g.dims()));
    }
    Ok(dims)
}

/// Forward mixing. Returns the mixed tensor and, when `save` is set and the
/// path supports it, the spectra needed by [`mix_channels_backward`].
pub fn mix_channels<T: Real>(
    v: &Tensor<T>,
    g: &Tensor<T>,
    opts: MixOptions,
    save: bool,
) -> Result<(Tensor<T>, Option<MixSaved<T>>)> {
    let (b, l, d) = check_pair(v, g)?;
    if opts.force_f64 && T::PRECISION != crate::real::Precision::F64 {
        let inner = MixOptions {
            force_f64: false,
            ..opts
        };
        let (out, _) = mix_channels::<f64>(&v.cast(), &g.cast(), inner, false)?;
        return Ok((out.cast(), None));
    }
    if l == 0 {
        return Ok((v.clone(), None));
    }
    let vc = to_channels(v);
    let gc = to_channels(g);
    let rows = b * d;
    let mut out = vec![T::zero(); rows * l];
    let mut saved = None;
    match opts.path {
        MixPath::Fft => {
            let nfft = mix_nfft(l);
            let plan = RealFftPlan::<T>::new(nfft)?;
            let nb = plan.bins();
            let zero = Complex::new(T::zero(), T::zero());
            let mut v_spec = vec![zero; rows * nb];
            let mut g_spec = vec![zero; rows * nb];
            let mut prod = vec![zero; nb];
            let mut scratch = Vec::with_capacity(nfft / 2);
            for r in 0..rows {
                let vs = &mut v_spec[r * nb..(r + 1) * nb];
                let gs = &mut g_spec[r * nb..(r + 1) * nb];
                plan.forward_into(&vc[r * l..(r + 1) * l], &mut scratch, vs);
                plan.forward_into(&gc[r * l..(r + 1) * l], &mut scratch, gs);
                for ((p, a), bb) in prod.iter_mut().zip(vs.iter()).zip(gs.iter()) {
                    *p = a * bb;
                }
                plan.inverse_into(&prod, &mut scratch, &mut out[r * l..(r + 1) * l]);
            }
            if save {
                saved = Some(MixSaved {
                    nfft,
                    v_spec,
                    g_spec,
                });
            }
        }
        MixPath::FftPerChannel => {
            for r in 0..rows {
                let y = spectral::causal_mix_fft(&vc[r * l..(r + 1) * l], &gc[r * l..(r + 1) * l])?;
                out[r * l..(r + 1) * l].copy_from_slice(&y);
            }
        }
        MixPath::Direct => {
            for r in 0..rows {
                let y = spectral::direct_causal_conv(&vc[r * l..(r + 1) * l], &gc[r * l..(r + 1) * l])?;
                out[r * l..(r + 1) * l].copy_from_slice(&y);
            }
        }
        MixPath::Circular => {
            let n = next_pow2(l);
            let mut vp = vec![T::zero(); n];
            let mut gp = vec![T::zero(); n];
            for r in 0..rows {
                vp[..l].copy_from_slice(&vc[r * l..(r + 1) * l]);
                gp[..l].copy_from_slice(&gc[r * l..(r + 1) * l]);
                let y = spectral::circular_conv(&vp, &gp)?;
                out[r * l..(r + 1) * l].copy_from_slice(&y[..l]);
            }
        }
    }
    Ok((from_channels(&out, b, l, d), saved))
}

/// Gradients of the mixed output with respect to both streams.
///
/// For causal mixing the adjoint is a causal correlation:
/// `dv_j = Σ_{t≥j} dr_t g_{t-j}` and `dg_k = Σ_{t≥k} dr_t v_{t-k}`. The FFT
/// paths evaluate it as a reversed causal convolution through the same padded
/// transform.
pub fn mix_channels_backward<T: Real>(
    dr: &Tensor<T>,
    v: &Tensor<T>,
    g: &Tensor<T>,
    opts: MixOptions,
    saved: Option<&MixSaved<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, l, d) = check_pair(v, g)?;
    if dr.dims() != v.dims() {
        return Err(Error::shape("causal mix backward", dr.dims(), v.dims()));
    }
    if opts.force_f64 && T::PRECISION != crate::real::Precision::F64 {
        let inner = MixOptions {
            force_f64: false,
            ..opts
        };
        let (dv, dg) = mix_channels_backward::<f64>(&dr.cast(), &v.cast(), &g.cast(), inner, None)?;
        return Ok((dv.cast(), dg.cast()));
    }
    if l == 0 {
        return Ok((v.clone(), g.clone()));
    }
    let rows = b * d;
    let drc = to_channels(dr);
    let vc = to_channels(v);
    let gc = to_channels(g);
    let mut dv = vec![T::zero(); rows * l];
    let mut dg = vec![T::zero(); rows * l];
    match opts.path {
        MixPath::Fft | MixPath::FftPerChannel => {
            let nfft = mix_nfft(l);
            let plan = RealFftPlan::<T>::new(nfft)?;
            let nb = plan.bins();
            let zero = Complex::new(T::zero(), T::zero());
            let mut scratch = Vec::with_capacity(nfft / 2);
            let mut rev = vec![T::zero(); l];
            let mut r_spec = vec![zero; nb];
            let mut vs_buf = vec![zero; nb];
            let mut gs_buf = vec![zero; nb];
            let mut prod = vec![zero; nb];
            let reuse = saved.filter(|s| s.nfft == nfft && s.v_spec.len() == rows * nb);
            for r in 0..rows {
                let (vs, gs): (&[Complex<T>], &[Complex<T>]) = match reuse {
                    Some(s) => (&s.v_spec[r * nb..(r + 1) * nb], &s.g_spec[r * nb..(r + 1) * nb]),
                    None => {
                        plan.forward_into(&vc[r * l..(r + 1) * l], &mut scratch, &mut vs_buf);
                        plan.forward_into(&gc[r * l..(r + 1) * l], &mut scratch, &mut gs_buf);
                        (&vs_buf, &gs_buf)
                    }
                };
                for (dst, src) in rev.iter_mut().zip(drc[r * l..(r + 1) * l].iter().rev()) {
                    *dst = *src;
                }
                plan.forward_into(&rev, &mut scratch, &mut r_spec);
                for (dst, spec) in [(&mut dv, gs), (&mut dg, vs)] {
                    for ((p, a), bb) in prod.iter_mut().zip(r_spec.iter()).zip(spec) {
                        *p = a * bb;
                    }
                    let row = &mut dst[r * l..(r + 1) * l];
                    plan.inverse_into(&prod, &mut scratch, row);
                    row.reverse();
                }
            }
        }
        MixPath::Direct => {
            for r in 0..rows {
                let dr_row = &drc[r * l..(r + 1) * l];
                dv[r * l..(r + 1) * l]
                    .copy_from_slice(&spectral::direct_causal_corr(dr_row, &gc[r * l..(r + 1) * l])?);
                dg[r * l..(r + 1) * l]
                    .copy_from_slice(&spectral::direct_causal_corr(dr_row, &vc[r * l..(r + 1) * l])?);
            }
        }
        MixPath::Circular => {
            // r_t = Σ_j v_j g_{(t-j) mod n}, taps beyond L are zero padding.
            let n = next_pow2(l);
            for r in 0..rows {
                let (dr_row, vr, gr) = (
                    &drc[r * l..(r + 1) * l],
                    &vc[r * l..(r + 1) * l],
                    &gc[r * l..(r + 1) * l],
                );
                for t in 0..l {
                    for j in 0..l {
                        let k = (t + n - j) % n;
                        if k < l {
                            dv[r * l + j] += dr_row[t] * gr[k];
                            dg[r * l + k] += dr_row[t] * vr[j];
                        }
                    }
                }
            }
        }
    }
    Ok((from_channels(&dv, b, l, d), from_channels(&dg, b, l, d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(dims: [usize; 3], seed: u64) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), Rng::new(seed).normal_vec(n, 1.0)).unwrap()
    }

    #[test]
    fn batched_equals_per_channel_and_direct() {
        for l in [1usize, 2, 3, 7, 16] {
            let v = random([2, l, 6], 1);
            let g = random([2, l, 6], 2);
            let (a, _) = mix_channels(&v, &g, MixOptions::with_path(MixPath::Fft), false).unwrap();
            let (b, _) = mix_channels(&v, &g, MixOptions::with_path(MixPath::FftPerChannel), false).unwrap();
            let (c, _) = mix_channels(&v, &g, MixOptions::with_path(MixPath::Direct), false).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
            assert!(a.max_abs_diff(&c).unwrap() <= 1e-9 * c.max_abs().max(1.0));
        }
    }

    #[test]
    fn backward_paths_agree() {
        let v = random([2, 9, 4], 3);
        let g = random([2, 9, 4], 4);
        let dr = random([2, 9, 4], 5);
        let (_, saved) = mix_channels(&v, &g, MixOptions::default(), true).unwrap();
        let (dv_f, dg_f) =
            mix_channels_backward(&dr, &v, &g, MixOptions::default(), saved.as_ref()).unwrap();
        let (dv_d, dg_d) =
            mix_channels_backward(&dr, &v, &g, MixOptions::with_path(MixPath::Direct), None).unwrap();
        assert!(dv_f.max_abs_diff(&dv_d).unwrap() < 1e-10);
        assert!(dg_f.max_abs_diff(&dg_d).unwrap() < 1e-10);
    }

    #[test]
    fn force_f64_matches_direct_in_f32() {
        let v: Tensor<f32> = random([1, 33, 3], 6).cast();
        let g: Tensor<f32> = random([1, 33, 3], 7).cast();
        let opts = MixOptions {
            path: MixPath::Fft,
            force_f64: true,
        };
        let (a, _) = mix_channels(&v, &g, opts, false).unwrap();
        let (c, _) = mix_channels(&v, &g, MixOptions::with_path(MixPath::Direct), false).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() < 1e-4);
    }

    #[test]
    fn circular_path_leaks_future() {
        let mut v = Tensor::<f64>::from_f64(vec![1, 2, 1], &[1., 2.]).unwrap();
        let g = Tensor::<f64>::from_f64(vec![1, 2, 1], &[3., 4.]).unwrap();
        let opts = MixOptions::with_path(MixPath::Circular);
        let (a, _) = mix_channels(&v, &g, opts, false).unwrap();
        assert_eq!(a.data(), &[11., 10.]);
        v.data_mut()[1] = 3.0;
        let (b, _) = mix_channels(&v, &g, opts, false).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() > 1e-3);
    }

    #[test]
    fn rejects_mismatched_streams() {
        let v = random([1, 4, 2], 1);
        let g = random([1, 5, 2], 1);
        assert!(mix_channels(&v, &g, MixOptions::default(), false).is_err());
    }
}
