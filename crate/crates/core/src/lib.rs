//! Speech denoising and dereverberation in the log-amplitude-spectral domain.
//!
//! The crate is organised as a pipeline:
//!
//! * [`signal`] - waveform and spectral analysis (STFT, log-amplitude
//!   spectra, mel filterbank, F0, WAV I/O).
//! * [`degrade`] - synthesis of noisy-reverberant corpora from clean speech,
//!   noise pools and room impulse responses, with a JSONL manifest.
//! * [`enhance`] - the closed-form spectral operations used at inference
//!   time: joint deconvolution and noise subtraction, band splitting and
//!   merging, frequency-resolution upsampling, Griffin-Lim phase recovery.
//! * [`nn`] - a small reverse-mode autodiff kernel (tape, ops, layers,
//!   Adam, weight serialization, finite-difference gradient checking).
//! * [`losses`] - training losses: spectral regressions, a correlation
//!   loss on impulse responses, a multi-scale STFT loss, and WGAN-GP.
//! * [`model`] - the enhancement network itself plus its three-step
//!   training schedule and the bandwidth/frequency-resolution extensions.
//! * [`metrics`] - objective evaluation (STOI, log-spectral distance,
//!   segmental SNR) over a corpus manifest.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]; the
//! concrete aliases below pin the two instantiations used in practice.
//! Training and verification run in `f64`; weight files store `f32` bit
//! patterns and load into either width.

pub mod degrade;
pub mod enhance;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signal;
pub mod synth;

pub use error::{Error, ErrorCategory, Result};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps};

/// Floating-point scalar the whole crate is generic over.
///
/// `f32` and `f64` implement it. The conversion helpers are infallible for
/// float-to-float casts and avoid `Option` plumbing at every literal.
pub trait Scalar:
    Float + FloatConst + NumAssignOps + FromPrimitive + rustfft::FftNum + Default + std::fmt::Display
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Global amplitude floor applied before any logarithm of a spectrum.
pub const AMP_FLOOR: f64 = 1e-5;
/// Floor on mel filterbank energies before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;
/// An impulse-response magnitude spectrum is floored at this fraction of its
/// own peak magnitude before it divides anything.
pub const R_MAG_FLOOR_RATIO: f64 = 1e-3;
/// Floor on the squared-window overlap-add denominator in [`signal::istfs`].
pub const WOLA_EPS: f64 = 1e-8;

/// Waveform carrying `f32` samples (model-facing instantiation).
pub type Waveform32 = signal::Waveform<f32>;
/// Waveform carrying `f64` samples (analysis-facing instantiation).
pub type Waveform64 = signal::Waveform<f64>;
/// Log-amplitude spectrogram in `f32`.
pub type Las32 = signal::Las<f32>;
/// Log-amplitude spectrogram in `f64`.
pub type Las64 = signal::Las<f64>;
/// Dense tensor of `f32` values, the training instantiation.
pub type Tensor32 = nn::Tensor<f32>;
/// Dense tensor of `f64` values, the verification instantiation.
pub type Tensor64 = nn::Tensor<f64>;
