//! Unbiased noise-injection regularization for recurrent neural networks.
//!
//! The crate trains ERNN and LSTM language models whose hidden states are
//! perturbed with scaled noise at every step, so that the noisy transition
//! preserves the deterministic network in expectation. It ships:
//!
//! * [`tensor`] / [`tape`] — dense f64 tensors and a reverse-mode gradient
//!   tape specialized to unrolled recurrent graphs,
//! * [`rng`] — a seedable PCG generator with documented samplers for eight
//!   noise families,
//! * [`noise`] — exact rescaling of the eight families to the spreads used
//!   for injection, with closed-form moments,
//! * [`expfam`] — exponential-family likelihood heads (Bernoulli, Gaussian,
//!   Poisson, categorical) with log-normalizer gradients and Hessians,
//! * [`rnn`] — deterministic cells, layer stacking and the gate-level
//!   dropout LSTM,
//! * [`model`] — the noise-injected model, its Monte Carlo objective,
//!   unbiasedness checks and the training step,
//! * [`regularizer`] — empirical verification that noise injection adds a
//!   nonnegative penalty to the deterministic risk, including the
//!   trace-of-covariance Taylor approximation,
//! * [`data`] / [`train`] — corpus handling, truncated-BPTT batching and the
//!   training/evaluation/diagnostics drivers used by the CLI.

pub mod checkpoint;
pub mod data;
pub mod expfam;
pub mod gradcheck;
pub mod model;
pub mod noise;
pub mod regularizer;
pub mod rng;
pub mod rnn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use expfam::{Family, LikelihoodHead};
pub use model::{LayerInjection, NoisinModel, ObjectiveValue};
pub use noise::{InjectionMode, NoiseFamily, NoiseSpec, ScaledMoments};
pub use rng::Pcg32;
pub use rnn::{CellKind, CellParams, DropoutMasks, RnnState};
pub use tensor::Tensor;
pub use train::TrainConfig;

use std::fmt;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    ShapeMismatch(String),
    /// A parameter is outside its valid domain (negative spread, bad batch size, ...).
    InvalidParameter(String),
    /// An input fell outside a function's mathematical domain (log of a
    /// nonpositive value, observation outside the likelihood support, ...).
    Domain(String),
    /// A value that must be finite came out NaN or infinite.
    NonFinite(String),
    /// The training loss became NaN; training aborts and the last good
    /// checkpoint is retained.
    NanLoss { epoch: usize, window: usize },
    /// Configuration file or flag parsing failure.
    Config(String),
    /// Checkpoint/corpus/vocabulary files that do not belong together.
    VocabMismatch(String),
    /// A reproducibility contract was violated (same inputs, different values).
    NotReproducible(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidParameter(m) => write!(f, "invalid parameter: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::NanLoss { epoch, window } => {
                write!(f, "NaN loss at epoch {epoch}, window {window}")
            }
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::VocabMismatch(m) => write!(f, "vocabulary mismatch: {m}"),
            Error::NotReproducible(m) => write!(f, "not reproducible: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
