use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use caracal_core::bench::{self, BenchConfig, MixerKind};
use caracal_core::checkpoint::{self, AnyModel};
use caracal_core::train::{self, Corpus, TrainConfig, TraceRow};
use caracal_core::verify::{self, VerifyOptions};
use caracal_core::{build_model, CaracalModel, ModelConfig, Precision, Real};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "caracal", version, about = "Multi-head Fourier mixer: verification, benchmarks, training and sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every oracle and invariant suite; exit 0 iff all pass.
    Verify(VerifyArgs),
    /// Time single mixer layers across sequence lengths and write a CSV.
    Bench(BenchArgs),
    /// Train a byte-level model on a file.
    Train(TrainArgs),
    /// Sample bytes from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct PrecisionArg {
    /// Numeric precision. CARACAL_PRECISION is used when the flag is absent.
    #[arg(long, env = "CARACAL_PRECISION")]
    precision: Option<Precision>,
}

impl PrecisionArg {
    fn or(&self, default: Precision) -> Precision {
        self.precision.unwrap_or(default)
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Route every mixing call through the unpadded circular transform.
    /// The suite is expected to fail; this checks that it can.
    #[arg(long)]
    fault_inject: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SEQ_LENS)]
    seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "mhf,swa,full_attention,direct_conv_oracle")]
    mixers: Vec<MixerKind>,
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Window of the `swa` mixer.
    #[arg(long, default_value_t = 256)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    /// Worker threads. The kernels are single-threaded, so only 1 is accepted.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    precision: PrecisionArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Tiny,
    Micro,
    Custom,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Size::Micro)]
    size: Size,
    /// Width for `--size custom`.
    #[arg(long)]
    d_model: Option<usize>,
    /// Depth for `--size custom`.
    #[arg(long)]
    layers: Option<usize>,
    /// Heads for `--size custom`.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 2048)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 9e-4)]
    lr: f64,
    #[arg(long, default_value = "model.crcl")]
    out: PathBuf,
    /// Loss trace, one `step<TAB>lr<TAB>loss` line per step.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    precision: PrecisionArg,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt as UTF-8 text.
    #[arg(long, conflicts_with = "prompt_hex")]
    prompt: Option<String>,
    /// Prompt as hex-encoded bytes.
    #[arg(long)]
    prompt_hex: Option<String>,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a).map(|()| true),
        Command::Train(a) => cmd_train(&a).map(|()| true),
        Command::Generate(a) => cmd_generate(&a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        precision: a.precision.or(Precision::F64),
        seed: a.seed,
        fault_inject: a.fault_inject,
    };
    println!("verify: precision {}, seed {}{}", opts.precision, opts.seed, if opts.fault_inject { ", FAULT INJECTED" } else { "" });
    let results = verify::run_suites(&opts, |r| println!("{}", r.row()))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} suites passed", results.len() - failed, results.len());
    Ok(failed == 0)
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.threads != 1 {
        bail!("--threads {}: the kernels are single-threaded; only 1 is supported", a.threads);
    }
    let cfg = BenchConfig {
        seq_lens: a.seq_lens.clone(),
        mixers: a.mixers.clone(),
        d_model: a.d_model,
        n_heads: a.heads,
        window: a.window,
        batch: a.batch,
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
    };
    cfg.validate()?;
    // Fail on an unwritable path before spending minutes timing.
    let file = File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!("{}", bench::CSV_HEADER);
    let report = |r: &bench::BenchRecord| println!("{}", r.csv_row());
    let records = match a.precision.or(Precision::F32) {
        Precision::F32 => bench::run_bench::<f32>(&cfg, report)?,
        Precision::F64 => bench::run_bench::<f64>(&cfg, report)?,
    };
    let mut w = BufWriter::new(file);
    bench::write_csv(&mut w, &records)?;
    w.flush().with_context(|| format!("cannot write {}", a.out.display()))?;
    Ok(())
}

fn model_config(a: &TrainArgs) -> Result<ModelConfig> {
    let cfg = match a.size {
        Size::Tiny => ModelConfig::tiny(),
        Size::Micro => ModelConfig::micro(),
        Size::Custom => match (a.d_model, a.layers, a.heads) {
            (Some(d), Some(l), Some(h)) => ModelConfig::with_dims(d, l, h),
            _ => bail!("--size custom needs --d-model, --layers and --heads"),
        },
    };
    if !matches!(a.size, Size::Custom) && (a.d_model.is_some() || a.layers.is_some() || a.heads.is_some()) {
        bail!("--d-model, --layers and --heads only apply to --size custom");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = model_config(a)?;
    let tc = TrainConfig {
        lr_peak: a.lr,
        total_steps: a.steps,
        seq_len: a.seq_len,
        batch_tokens: a.batch_tokens,
        seed: a.seed,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let corpus = Corpus::load(&a.data).with_context(|| format!("cannot read training data {}", a.data.display()))?;
    match a.precision.or(Precision::F32) {
        Precision::F32 => train_as::<f32>(&cfg, &tc, &corpus, a),
        Precision::F64 => train_as::<f64>(&cfg, &tc, &corpus, a),
    }
}

fn train_as<T: Real>(cfg: &ModelConfig, tc: &TrainConfig, corpus: &Corpus, a: &TrainArgs) -> Result<()> {
    let mut model: CaracalModel<T> = build_model(cfg, a.seed)?;
    eprintln!(
        "training {} parameters ({}), {} steps of {}x{} tokens",
        model.param_count(),
        T::PRECISION,
        tc.total_steps,
        tc.batch_size(),
        tc.seq_len
    );
    let mut trace = match &a.trace {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("cannot write trace {}", p.display()))?)),
        None => None,
    };
    let mut write_err = None;
    let every = (tc.total_steps / 20).max(1);
    let result = train::train_loop(&mut model, corpus, tc, |row: &TraceRow| {
        if let Some(w) = trace.as_mut() {
            if let Err(e) = writeln!(w, "{row}") {
                write_err = Some(e);
                return ControlFlow::Break(());
            }
        }
        if row.step % every == 0 || row.step + 1 == tc.total_steps {
            eprintln!("{row}");
        }
        ControlFlow::Continue(())
    });
    if let Some(w) = trace.as_mut() {
        w.flush().context("cannot write trace")?;
    }
    if let Some(e) = write_err {
        return Err(e).context("cannot write trace");
    }
    let rows = result.context("training halted")?;
    checkpoint::save(&model, &a.out).with_context(|| format!("cannot write checkpoint {}", a.out.display()))?;
    if let Some(last) = rows.last() {
        eprintln!("final loss {:.6}, checkpoint {}", last.loss, a.out.display());
    }
    Ok(())
}

fn prompt_bytes(a: &GenerateArgs) -> Result<Vec<u8>> {
    match (&a.prompt, &a.prompt_hex) {
        (Some(text), None) => Ok(text.as_bytes().to_vec()),
        (None, Some(h)) => hex::decode(h.trim()).context("--prompt-hex is not valid hex"),
        _ => Ok(Vec::new()),
    }
}

fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let prompt = prompt_bytes(a)?;
    let out = match &model {
        AnyModel::F32(m) => train::generate(m, &prompt, a.tokens, a.temperature, a.seed)?,
        AnyModel::F64(m) => train::generate(m, &prompt, a.tokens, a.temperature, a.seed)?,
    };
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&out)?;
    stdout.flush()?;
    Ok(())
}
