//! Sequence-length scaling benchmark for a single mixer layer.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::attention::{swa_forward, SwaParams};
use crate::error::{Error, Result};
use crate::mhf::{mhf_forward, MhfOptions, MhfParams};
use crate::mix::{MixOptions, MixPath};
use crate::model::INIT_STD;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "seq_len,mixer,wall_ms,tokens_per_s,reps";

pub const DEFAULT_SEQ_LENS: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixerKind {
    /// MHF layer on the batched FFT path.
    Mhf,
    /// Sliding-window attention with the configured window.
    Swa,
    /// Attention with the window widened to the sequence length.
    FullAttention,
    /// MHF layer with the `O(L²)` direct convolution substituted.
    DirectConvOracle,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [Self::Mhf, Self::Swa, Self::FullAttention, Self::DirectConvOracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mhf => "mhf",
            Self::Swa => "swa",
            Self::FullAttention => "full_attention",
            Self::DirectConvOracle => "direct_conv_oracle",
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mixer `{s}` (expected mhf, swa, full_attention or direct_conv_oracle)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub mixers: Vec<MixerKind>,
    pub d_model: usize,
    pub n_heads: usize,
    /// Window of the `swa` mixer.
    pub window: usize,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_lens: DEFAULT_SEQ_LENS.to_vec(),
            mixers: MixerKind::ALL.to_vec(),
            d_model: 256,
            n_heads: 4,
            window: 256,
            batch: 1,
            reps: 5,
            warmup: 2,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            bad.push("sequence lengths must be non-empty and >= 1".to_string());
        }
        if self.mixers.is_empty() {
            bad.push("at least one mixer is required".to_string());
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            bad.push(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.n_heads));
        }
        if self.window == 0 || self.batch == 0 || self.reps == 0 {
            bad.push("window, batch and reps must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

/// One CSV row. `wall_ms` is the median time of one forward pass over
/// `reps` timed repetitions; `tokens_per_s` is the matching throughput.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub seq_len: usize,
    pub mixer: MixerKind,
    pub wall_ms: f64,
    pub tokens_per_s: f64,
    pub reps: usize,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.4},{:.1},{}", self.seq_len, self.mixer, self.wall_ms, self.tokens_per_s, self.reps)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time one mixer at one length on random input.
pub fn bench_mixer<T: Real>(kind: MixerKind, seq_len: usize, cfg: &BenchConfig) -> Result<BenchRecord> {
    cfg.validate()?;
    let mut rng = Rng::derive(cfg.seed, seq_len as u64);
    let d = cfg.d_model;
    let x = Tensor::<T>::new(vec![cfg.batch, seq_len, d], rng.normal_vec(cfg.batch * seq_len * d, 1.0))?;
    let run: Box<dyn Fn() -> Result<Tensor<T>>> = match kind {
        MixerKind::Mhf | MixerKind::DirectConvOracle => {
            let p = MhfParams::init(d, cfg.n_heads, &mut rng, INIT_STD, INIT_STD)?;
            let path = if kind == MixerKind::Mhf { MixPath::Fft } else { MixPath::Direct };
            let opts = MhfOptions {
                mix: MixOptions::with_path(path),
                ..Default::default()
            };
            Box::new(move || mhf_forward(&x, &p, opts))
        }
        MixerKind::Swa | MixerKind::FullAttention => {
            let window = if kind == MixerKind::Swa { cfg.window } else { seq_len };
            let p = SwaParams::init(d, cfg.n_heads, window, &mut rng, INIT_STD, INIT_STD)?;
            Box::new(move || swa_forward(&x, &p))
        }
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        let y = run()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    // Clamp so a sub-resolution timing still satisfies wall_ms > 0.
    let wall_ms = median(times).max(1e-6);
    Ok(BenchRecord {
        seq_len,
        mixer: kind,
        wall_ms,
        tokens_per_s: (seq_len * cfg.batch) as f64 / (wall_ms / 1e3),
        reps: cfg.reps,
    })
}

/// Every `(mixer, seq_len)` pair in order, reporting each record as it lands.
pub fn run_bench<T: Real>(cfg: &BenchConfig, mut on_record: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.mixers.len() * cfg.seq_lens.len());
    for &kind in &cfg.mixers {
        for &l in &cfg.seq_lens {
            let rec = bench_mixer::<T>(kind, l, cfg)?;
            on_record(&rec);
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn write_csv(mut w: impl Write, records: &[BenchRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}
