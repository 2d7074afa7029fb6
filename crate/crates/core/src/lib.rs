//! Numerical core of the caracal language model: tensors, a radix-2 real
//! FFT with brute-force oracles, the Multi-Head Fourier mixer, sliding-window
//! attention, a tape-based gradient engine, training, checkpoints and
//! benchmarks.

pub mod attention;
pub mod checkpoint;
pub mod autograd;
pub mod bench;
pub mod error;
pub mod mhf;
pub mod mix;
pub mod model;
pub mod param;
pub mod real;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use attention::{swa_forward, SwaParams};
pub use bench::{BenchConfig, BenchRecord, MixerKind};
pub use checkpoint::AnyModel;
pub use autograd::{grad_check, GradCheckOptions, GradCheckReport, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use mhf::{mhf_forward, mhf_param_count, MhfOptions, MhfParams};
pub use mix::{MixOptions, MixPath};
pub use model::{build_model, CaracalModel, LayerKind, ModelConfig, ModelParams};
pub use param::ParamKind;
pub use real::{Precision, Real};
pub use rng::Rng;
pub use spectral::Spectrum;
pub use tensor::Tensor;
pub use train::{Corpus, TraceRow, TrainConfig};
pub use verify::{SuiteResult, VerifyOptions};
