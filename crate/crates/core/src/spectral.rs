//! Radix-2 FFTs, real half-spectrum transforms, and the direct-summation
//! oracles for causal mixing.
//!
//! Causal mixing of a content sequence `v` with a filter `g` is
//! `r_t = Σ_{j≤t} v_j g_{t-j}`. The fast route zero-pads both sequences to at
//! least `2L`, multiplies their spectra and keeps the first `L` outputs of the
//! inverse transform. Without the padding the product computes a circular
//! convolution, whose wrap-around terms leak future positions into the past;
//! [`circular_conv`] exists only to demonstrate that failure.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub type Cplx<T> = Complex<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// `e^{-2πi k/n}` in f64, exact at quarter turns.
fn twiddle(k: usize, n: usize) -> (f64, f64) {
    let k = k % n;
    if (4 * k) % n == 0 {
        return match 4 * k / n {
            0 => (1.0, 0.0),
            1 => (0.0, -1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, 1.0),
        };
    }
    let angle = -std::f64::consts::TAU * k as f64 / n as f64;
    (angle.cos(), angle.sin())
}

fn narrow<T: Real>((re, im): (f64, f64)) -> Cplx<T> {
    Cplx::new(T::of(re), T::of(im))
}

/// Smallest power of two `>= n` (and `>= 1`).
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Transform length used for causal mixing of length-`len` sequences.
pub fn mix_nfft(len: usize) -> usize {
    next_pow2(2 * len).max(2)
}

/// Twiddles and bit-reversal table for one complex transform length.
///
/// Built per call; nothing is cached across calls.
#[derive(Debug, Clone)]
pub struct FftPlan<T> {
    n: usize,
    /// Stage twiddles laid out back to back: stage with butterfly span
    /// `2h` occupies `h - 1 .. 2h - 1` and holds `w_{2h}^k` for `k < h`.
    forward: Vec<Cplx<T>>,
    inverse: Vec<Cplx<T>>,
    bitrev: Vec<u32>,
}

impl<T: Real> FftPlan<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { op: "fft", len: n });
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        let mut forward = Vec::with_capacity(n.saturating_sub(1));
        let mut len = 2;
        while len <= n {
            forward.extend((0..len / 2).map(|k| narrow::<T>(twiddle(k * (n / len), n))));
            len <<= 1;
        }
        let inverse = forward.iter().map(|w| w.conj()).collect();
        Ok(Self {
            n,
            forward,
            inverse,
            bitrev,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform; the inverse includes the `1/n` factor.
    pub fn run(&self, buf: &mut [Cplx<T>], dir: Direction) {
        let n = self.n;
        assert_eq!(buf.len(), n, "fft buffer length must match the plan");
        let inverse = dir == Direction::Inverse;
        let table = if inverse { &self.inverse } else { &self.forward };
        for i in 0..n {
            let j = self.bitrev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        // The first two stages have trivial twiddles (1 and ∓i).
        if n >= 2 {
            for pair in buf.chunks_exact_mut(2) {
                let (u, t) = (pair[0], pair[1]);
                pair[0] = u + t;
                pair[1] = u - t;
            }
        }
        if n >= 4 {
            for q in buf.chunks_exact_mut(4) {
                let (u0, u1, t0) = (q[0], q[1], q[2]);
                // t1 · (∓i)
                let t1 = if inverse { Cplx::new(-q[3].im, q[3].re) } else { Cplx::new(q[3].im, -q[3].re) };
                q[0] = u0 + t0;
                q[2] = u0 - t0;
                q[1] = u1 + t1;
                q[3] = u1 - t1;
            }
        }
        let mut half = 4;
        while half < n {
            let tw = &table[half - 1..2 * half - 1];
            for block in buf.chunks_exact_mut(2 * half) {
                let (lo, hi) = block.split_at_mut(half);
                for ((a, b), &w) in lo.iter_mut().zip(hi.iter_mut()).zip(tw) {
                    let u = *a;
                    let t = *b * w;
                    *a = u + t;
                    *b = u - t;
                }
            }
            half <<= 1;
        }
        if inverse {
            let inv = T::of(1.0 / n as f64);
            for z in buf.iter_mut() {
                *z = z.scale(inv);
            }
        }
    }
}

/// Complex DFT of a power-of-two length sequence.
///
/// Forward: `X_k = Σ x_j e^{-2πi jk/N}`; inverse is the conjugate transform
/// divided by `N`.
pub fn fft_complex<T: Real>(x: &[Cplx<T>], dir: Direction) -> Result<Vec<Cplx<T>>> {
    let plan = FftPlan::new(x.len())?;
    let mut buf = x.to_vec();
    plan.run(&mut buf, dir);
    Ok(buf)
}

/// Half spectrum of a real sequence: bins `0..=nfft/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    pub bins: Vec<Cplx<T>>,
    pub nfft: usize,
}

impl<T: Real> Spectrum<T> {
    /// Pointwise product of two spectra of the same length.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.nfft != other.nfft {
            return Err(Error::LengthMismatch {
                op: "spectrum product",
                left: self.nfft,
                right: other.nfft,
            });
        }
        Ok(Self {
            bins: self.bins.iter().zip(&other.bins).map(|(a, b)| a * b).collect(),
            nfft: self.nfft,
        })
    }
}

/// Real-input transform of length `nfft` computed with one complex
/// transform of half the length.
#[derive(Debug, Clone)]
pub struct RealFftPlan<T> {
    nfft: usize,
    half: FftPlan<T>,
    post: Vec<Cplx<T>>,
}

impl<T: Real> RealFftPlan<T> {
    /// `nfft` must be an even power of two (at least 2).
    pub fn new(nfft: usize) -> Result<Self> {
        if nfft < 2 || !nfft.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { op: "rfft", len: nfft });
        }
        let m = nfft / 2;
        Ok(Self {
            nfft,
            half: FftPlan::new(m)?,
            post: (0..=m).map(|k| narrow(twiddle(k, nfft))).collect(),
        })
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Forward transform of `x` zero-padded to `nfft`. `scratch` holds
    /// `nfft/2` values; `out` receives `nfft/2 + 1` bins.
    pub fn forward_into(&self, x: &[T], scratch: &mut Vec<Cplx<T>>, out: &mut [Cplx<T>]) {
        let m = self.nfft / 2;
        debug_assert!(x.len() <= self.nfft);
        debug_assert_eq!(out.len(), m + 1);
        scratch.clear();
        scratch.extend((0..m).map(|k| {
            let re = x.get(2 * k).copied().unwrap_or_else(T::zero);
            let im = x.get(2 * k + 1).copied().unwrap_or_else(T::zero);
            Cplx::new(re, im)
        }));
        self.half.run(scratch, Direction::Forward);
        let half = T::of(0.5);
        for k in 0..=m {
            let zk = scratch[k % m];
            let zc = scratch[(m - k) % m].conj();
            let even = (zk + zc).scale(half);
            // (zk - zc) / 2i
            let d = (zk - zc).scale(half);
            let odd = Cplx::new(d.im, -d.re);
            out[k] = even + self.post[k] * odd;
        }
        // Real signals have real DC and Nyquist bins.
        out[0].im = T::zero();
        out[m].im = T::zero();
    }

    /// Inverse transform; writes the first `out.len()` (`<= nfft`) samples.
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn inverse_into(&self, bins: &[Cplx<T>], scratch: &mut Vec<Cplx<T>>, out: &mut [T]) {
        let m = self.nfft / 2;
        debug_assert_eq!(bins.len(), m + 1);
        debug_assert!(out.len() <= self.nfft);
        let bin = |k: usize| {
            let mut b = bins[k];
            if k == 0 || k == m {
                b.im = T::zero();
            }
            b
        };
        let half = T::of(0.5);
        scratch.clear();
        scratch.extend((0..m).map(|k| {
            let xk = bin(k);
            let xc = bin(m - k).conj();
            let even = (xk + xc).scale(half);
            let odd = (xk - xc).scale(half) * self.post[k].conj();
            // even + i·odd
            Cplx::new(even.re - odd.im, even.im + odd.re)
        }));
        self.half.run(scratch, Direction::Inverse);
        for (i, o) in out.iter_mut().enumerate() {
            let z = scratch[i / 2];
            *o = if i % 2 == 0 { z.re } else { z.im };
        }
    }
}

/// Half-spectrum of `x` zero-padded to `n` (rounded up to a power of two,
/// minimum 2).
pub fn rfft<T: Real>(x: &[T], n: usize) -> Result<Spectrum<T>> {
    if n < x.len() {
        return Err(Error::LengthMismatch {
            op: "rfft (target length shorter than input)",
            left: n,
            right: x.len(),
        });
    }
    let nfft = next_pow2(n).max(2);
    let plan = RealFftPlan::new(nfft)?;
    let mut bins = vec![Cplx::new(T::zero(), T::zero()); plan.bins()];
    plan.forward_into(x, &mut Vec::with_capacity(nfft / 2), &mut bins);
    Ok(Spectrum { bins, nfft })
}

/// Inverse of [`rfft`], returning the first `n` samples of the length-`nfft`
/// signal.
pub fn irfft<T: Real>(s: &Spectrum<T>, n: usize) -> Result<Vec<T>> {
    if s.nfft < 2 || !s.nfft.is_power_of_two() || s.bins.len() != s.nfft / 2 + 1 {
        return Err(Error::InvalidShape {
            op: "irfft",
            reason: format!("{} bins do not describe a length-{} real spectrum", s.bins.len(), s.nfft),
        });
    }
    if n > s.nfft {
        return Err(Error::LengthMismatch {
            op: "irfft (output longer than transform)",
            left: n,
            right: s.nfft,
        });
    }
    let plan = RealFftPlan::new(s.nfft)?;
    let mut out = vec![T::zero(); n];
    plan.inverse_into(&s.bins, &mut Vec::with_capacity(s.nfft / 2), &mut out);
    Ok(out)
}

/// Direct `O(L²)` DFT: `r_t = Σ_j v_j e^{-2πi tj/L}`.
pub fn naive_dft<T: Real>(v: &[Cplx<T>]) -> Vec<Cplx<T>> {
    let n = v.len();
    (0..n)
        .map(|t| {
            let mut acc = Cplx::new(0.0f64, 0.0);
            for (j, x) in v.iter().enumerate() {
                let (c, s) = twiddle((t * j) % n, n);
                let (xr, xi) = (x.re.as_f64(), x.im.as_f64());
                acc += Cplx::new(xr * c - xi * s, xr * s + xi * c);
            }
            Cplx::new(T::of(acc.re), T::of(acc.im))
        })
        .collect()
}

pub fn naive_dft_real<T: Real>(v: &[T]) -> Vec<Cplx<T>> {
    let c: Vec<_> = v.iter().map(|&x| Cplx::new(x, T::zero())).collect();
    naive_dft(&c)
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { op, left: a, right: b });
    }
    Ok(())
}

/// Ground-truth causal convolution `r_t = Σ_{j=0}^{t} v_j g_{t-j}` by direct
/// summation, `j` ascending.
pub fn direct_causal_conv<T: Real>(v: &[T], g: &[T]) -> Result<Vec<T>> {
    same_len("direct_causal_conv", v.len(), g.len())?;
    Ok((0..v.len())
        .map(|t| {
            let mut acc = T::zero();
            for j in 0..=t {
                acc += v[j] * g[t - j];
            }
            acc
        })
        .collect())
}

/// Adjoint of causal convolution in its first argument:
/// `c_j = Σ_{t=j}^{L-1} r_t g_{t-j}`.
pub fn direct_causal_corr<T: Real>(r: &[T], g: &[T]) -> Result<Vec<T>> {
    same_len("direct_causal_corr", r.len(), g.len())?;
    let l = r.len();
    Ok((0..l)
        .map(|j| {
            let mut acc = T::zero();
            for t in j..l {
                acc += r[t] * g[t - j];
            }
            acc
        })
        .collect())
}

/// Circular convolution through an unpadded length-`L` transform.
///
/// This is the non-causal result obtained when the padding step is skipped;
/// it is never used by the model.
pub fn circular_conv<T: Real>(v: &[T], g: &[T]) -> Result<Vec<T>> {
    same_len("circular_conv", v.len(), g.len())?;
    let l = v.len();
    if l == 0 || !l.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { op: "circular_conv", len: l });
    }
    if l == 1 {
        return Ok(vec![v[0] * g[0]]);
    }
    let sv = rfft(v, l)?;
    let sg = rfft(g, l)?;
    irfft(&sv.mul(&sg)?, l)
}

/// Causal convolution via pad–transform–multiply–invert–truncate, padded to
/// the smallest power of two `>= 2L`.
pub fn causal_mix_fft<T: Real>(v: &[T], g: &[T]) -> Result<Vec<T>> {
    causal_mix_fft_with_nfft(v, g, mix_nfft(v.len()))
}

/// [`causal_mix_fft`] with an explicit transform length (`>= 2L`, power of
/// two).
pub fn causal_mix_fft_with_nfft<T: Real>(v: &[T], g: &[T], nfft: usize) -> Result<Vec<T>> {
    same_len("causal_mix_fft", v.len(), g.len())?;
    let l = v.len();
    if nfft < 2 * l || nfft < 2 || !nfft.is_power_of_two() {
        return Err(Error::InvalidShape {
            op: "causal_mix_fft",
            reason: format!("transform length {nfft} must be a power of two >= 2·{l}"),
        });
    }
    let sv = rfft(v, nfft)?;
    let sg = rfft(g, nfft)?;
    irfft(&sv.mul(&sg)?, l)
}

/// Causal correlation (the convolution adjoint) through the same padded
/// transform: `c_j = Σ_{t≥j} r_t g_{t-j}`.
pub fn causal_corr_fft<T: Real>(r: &[T], g: &[T]) -> Result<Vec<T>> {
    let rev: Vec<T> = r.iter().rev().copied().collect();
    let mut out = causal_mix_fft(&rev, g)?;
    out.reverse();
    Ok(out)
}

/// Lower-triangular Toeplitz operator induced by a causal filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzView<T> {
    kernel: Vec<T>,
}

impl<T: Real> ToeplitzView<T> {
    pub fn new(kernel: Vec<T>) -> Self {
        Self { kernel }
    }

    pub fn len(&self) -> usize {
        self.kernel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernel.is_empty()
    }

    /// `A[t][j] = g[t-j]` for `j <= t`, else zero.
    pub fn entry(&self, t: usize, j: usize) -> T {
        if j <= t {
            self.kernel[t - j]
        } else {
            T::zero()
        }
    }

    pub fn materialize(&self) -> Tensor<T> {
        let l = self.len();
        let data = (0..l * l).map(|i| self.entry(i / l, i % l)).collect();
        Tensor::new(vec![l, l], data).expect("square matrix")
    }
}

pub fn toeplitz_materialize<T: Real>(g: &[T]) -> Tensor<T> {
    ToeplitzView::new(g.to_vec()).materialize()
}

/// Row-by-row matrix–vector product, columns summed in ascending order.
pub fn matvec<T: Real>(a: &Tensor<T>, v: &[T]) -> Result<Vec<T>> {
    let [rows, cols] = *a.dims() else {
        return Err(Error::shape("matvec", a.dims(), &[v.len()]));
    };
    if cols != v.len() {
        return Err(Error::shape("matvec", a.dims(), &[v.len()]));
    }
    Ok((0..rows)
        .map(|t| {
            let mut acc = T::zero();
            for (j, x) in v.iter().enumerate() {
                acc += a.data()[t * cols + j] * *x;
            }
            acc
        })
        .collect())
}
