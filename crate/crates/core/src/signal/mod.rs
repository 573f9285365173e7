//! Waveform containers, STFT analysis/synthesis and acoustic features.

mod f0;
mod fft;
mod mel;
mod stft;
mod wav;
mod window;

pub use f0::{extract_f0, F0Config};
pub use fft::{fft_forward, fft_inverse, RealFft};
pub use mel::{mel_energies, MelFilterbank};
pub use stft::{istfs, las_of, las_with_phase, stft};
pub use wav::{read_wav, write_wav};
pub use window::{window, WindowKind};

use crate::{Error, Result, Scalar};
use num_complex::Complex;

/// Time-domain audio with a known sample rate. Samples are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::numeric(
                "waveform",
                format!("non-finite sample at index {i}"),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    /// Root-mean-square level, zero for an empty waveform.
    pub fn rms(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        let e = self
            .samples
            .iter()
            .fold(T::zero(), |acc, &s| acc + s * s);
        (e / T::of_usize(self.samples.len())).sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|&s| U::of(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Framing and FFT parameters shared by every spectral operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl StftConfig {
    /// 50 ms frames, 12 ms shift, 2048-point FFT: the base analysis setup.
    pub fn base(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            frame_length_ms: 50.0,
            frame_shift_ms: 12.0,
            fft_size: 2048,
            window: WindowKind::Hann,
        }
    }

    /// Same framing with an 8192-point FFT, used for fine frequency
    /// resolution (4097 bins).
    pub fn fine(sample_rate: u32) -> Self {
        Self {
            fft_size: 8192,
            ..Self::base(sample_rate)
        }
    }

    pub fn with_fft_size(self, fft_size: usize) -> Self {
        Self { fft_size, ..self }
    }

    pub fn frame_samples(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// One-sided bin count `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of analysis frames for a waveform of `len` samples:
    /// `ceil(len / shift)`, so the tail is always covered.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.shift_samples())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        let frame = self.frame_samples();
        let shift = self.shift_samples();
        if frame == 0 || shift == 0 {
            return Err(Error::config(format!(
                "degenerate framing: frame={frame} shift={shift} samples"
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::config(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.fft_size < frame {
            return Err(Error::config(format!(
                "fft_size {} is smaller than the {frame}-sample frame",
                self.fft_size
            )));
        }
        Ok(())
    }
}

/// One-sided complex STFT: `frames x bins` with `bins = fft_size/2 + 1`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram<T> {
    pub(crate) values: Vec<Complex<T>>,
    pub(crate) frames: usize,
    pub(crate) bins: usize,
    pub config: StftConfig,
    /// Length of the analysed waveform, when known, so synthesis can
    /// truncate to it.
    pub source_len: Option<usize>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, n: usize) -> &[Complex<T>] {
        &self.values[n * self.bins..(n + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, n: usize) -> &mut [Complex<T>] {
        &mut self.values[n * self.bins..(n + 1) * self.bins]
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }
}

/// Log-amplitude spectrogram: `ln(max(|X|, amp_floor))`, `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Las<T> {
    pub(crate) values: Vec<T>,
    pub(crate) frames: usize,
    pub(crate) bins: usize,
    pub config: StftConfig,
}

impl<T: Scalar> Las<T> {
    pub fn from_values(values: Vec<T>, frames: usize, bins: usize, config: StftConfig) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::shape(
                "las",
                format!("{} values for {frames} frames x {bins} bins", values.len()),
            ));
        }
        Ok(Self {
            values,
            frames,
            bins,
            config,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn row(&self, n: usize) -> &[T] {
        &self.values[n * self.bins..(n + 1) * self.bins]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Keep only the first `bins` frequency bins of every frame.
    pub fn truncate_bins(&self, bins: usize) -> Result<Self> {
        if bins == 0 || bins > self.bins {
            return Err(Error::shape(
                "las truncate",
                format!("cannot keep {bins} of {} bins", self.bins),
            ));
        }
        let mut values = Vec::with_capacity(self.frames * bins);
        for n in 0..self.frames {
            values.extend_from_slice(&self.row(n)[..bins]);
        }
        Ok(Self {
            values,
            frames: self.frames,
            bins,
            config: self.config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Las<U> {
        Las {
            values: self.values.iter().map(|&v| U::of(v.as_f64())).collect(),
            frames: self.frames,
            bins: self.bins,
            config: self.config,
        }
    }
}

/// Per-frame acoustic features driving the enhancement model: log mel
/// energies, fundamental frequency in Hz (0 when unvoiced) and a 0/1
/// voicing flag.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures<T> {
    pub mel: Vec<T>,
    pub n_mels: usize,
    pub f0: Vec<T>,
    pub vuv: Vec<T>,
    pub frames: usize,
}

impl<T: Scalar> AcousticFeatures<T> {
    pub fn new(mel: Vec<T>, n_mels: usize, f0: Vec<T>, vuv: Vec<T>) -> Result<Self> {
        if n_mels == 0 || mel.len() % n_mels != 0 {
            return Err(Error::shape(
                "features",
                format!("{} mel values do not tile {n_mels} bands", mel.len()),
            ));
        }
        let frames = mel.len() / n_mels;
        if f0.len() != frames || vuv.len() != frames {
            return Err(Error::shape(
                "features",
                format!(
                    "{frames} mel frames but {} f0 and {} vuv entries",
                    f0.len(),
                    vuv.len()
                ),
            ));
        }
        for &v in &vuv {
            if v != T::zero() && v != T::one() {
                return Err(Error::numeric("features", "vuv flag outside {0, 1}"));
            }
        }
        for (i, &f) in f0.iter().enumerate() {
            if !f.is_finite() || f < T::zero() {
                return Err(Error::numeric(
                    "features",
                    format!("invalid f0 {f} at frame {i}"),
                ));
            }
            if vuv[i] == T::zero() && f != T::zero() {
                return Err(Error::numeric(
                    "features",
                    format!("unvoiced frame {i} carries nonzero f0"),
                ));
            }
        }
        if mel.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric("features", "non-finite mel energy"));
        }
        Ok(Self {
            mel,
            n_mels,
            f0,
            vuv,
            frames,
        })
    }

    pub fn mel_row(&self, n: usize) -> &[T] {
        &self.mel[n * self.n_mels..(n + 1) * self.n_mels]
    }

    pub fn cast<U: Scalar>(&self) -> AcousticFeatures<U> {
        AcousticFeatures {
            mel: self.mel.iter().map(|&v| U::of(v.as_f64())).collect(),
            n_mels: self.n_mels,
            f0: self.f0.iter().map(|&v| U::of(v.as_f64())).collect(),
            vuv: self.vuv.iter().map(|&v| U::of(v.as_f64())).collect(),
            frames: self.frames,
        }
    }
}
