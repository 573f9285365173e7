//! Corpus degradation: reverberate clean speech with room impulse
//! responses, mix noise at controlled SNRs, and track everything in a
//! line-oriented JSON manifest.

mod corpus;
mod manifest;

pub use corpus::{synthesize_corpus, CorpusConfig, CorpusSummary, SplitSpec};
pub use manifest::{load_manifest, save_manifest, validate_manifest, CorpusEntry, Split};

use crate::signal::{fft_forward, fft_inverse, Waveform};
use crate::{Error, Result, Scalar};
use num_complex::Complex;

/// Number of impulse-response taps carried through the whole pipeline
/// (85 ms at 24 kHz); matches the reverberation estimate the model emits.
pub const RIR_TAPS: usize = 2048;

/// Room impulse response, always exactly [`RIR_TAPS`] samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir<T> {
    taps: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Rir<T> {
    /// Build from measured taps, truncating or zero-padding to [`RIR_TAPS`].
    pub fn from_taps(taps: &[T], sample_rate: u32) -> Result<Self> {
        if let Some(i) = taps.iter().position(|t| !t.is_finite()) {
            return Err(Error::numeric("rir", format!("non-finite tap {i}")));
        }
        let mut fixed = vec![T::zero(); RIR_TAPS];
        let n = taps.len().min(RIR_TAPS);
        fixed[..n].copy_from_slice(&taps[..n]);
        if fixed.iter().all(|&t| t == T::zero()) {
            return Err(Error::numeric("rir", "all taps are zero"));
        }
        Ok(Self {
            taps: fixed,
            sample_rate,
        })
    }

    pub fn from_waveform(wave: &Waveform<T>) -> Result<Self> {
        Self::from_taps(wave.samples(), wave.sample_rate())
    }

    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn to_waveform(&self) -> Waveform<T> {
        Waveform::new(self.taps.clone(), self.sample_rate).expect("rir taps are finite")
    }

    pub fn cast<U: Scalar>(&self) -> Rir<U> {
        Rir {
            taps: self.taps.iter().map(|&t| U::of(t.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// FFT-based linear convolution of `a` and `b`, truncated to `out_len`.
pub fn convolve_full<T: Scalar>(a: &[T], b: &[T], out_len: usize) -> Vec<T> {
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut fa = vec![Complex::new(T::zero(), T::zero()); n];
    let mut fb = vec![Complex::new(T::zero(), T::zero()); n];
    for (dst, &src) in fa.iter_mut().zip(a.iter()) {
        dst.re = src;
    }
    for (dst, &src) in fb.iter_mut().zip(b.iter()) {
        dst.re = src;
    }
    fft_forward(&mut fa);
    fft_forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    fft_inverse(&mut fa);
    let scale = T::one() / T::of_usize(n);
    fa.into_iter()
        .take(out_len.min(full))
        .map(|c| c.re * scale)
        .chain(std::iter::repeat(T::zero()))
        .take(out_len)
        .collect()
}

/// Convolve clean speech with a room impulse response, truncated to the
/// clean length. If the result peaks above 1 it is scaled back to peak 1;
/// the applied gain (1 when untouched) is returned alongside.
pub fn apply_rir<T: Scalar>(clean: &Waveform<T>, rir: &Rir<T>) -> Result<(Waveform<T>, T)> {
    if clean.sample_rate() != rir.sample_rate() {
        return Err(Error::config(format!(
            "clean at {} Hz, RIR at {} Hz",
            clean.sample_rate(),
            rir.sample_rate()
        )));
    }
    if clean.is_empty() {
        return Err(Error::shape("apply_rir", "empty clean waveform"));
    }
    let mut out = convolve_full(clean.samples(), rir.taps(), clean.len());
    let peak = out.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let gain = if peak > T::one() { T::one() / peak } else { T::one() };
    if gain != T::one() {
        for v in out.iter_mut() {
            *v *= gain;
        }
    }
    Ok((Waveform::new(out, clean.sample_rate())?, gain))
}

fn power<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    x.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::of_usize(x.len())
}

/// Scale `noise` so that `10*log10(P_signal / P_noise)` equals `snr_db`,
/// then add it to `signal`. Returns the mixture and the scaled noise that
/// went into it (so `mixed - signal == scaled_noise` bitwise).
pub fn mix_at_snr<T: Scalar>(
    signal: &Waveform<T>,
    noise: &Waveform<T>,
    snr_db: f64,
) -> Result<(Waveform<T>, Waveform<T>)> {
    if signal.sample_rate() != noise.sample_rate() {
        return Err(Error::config(format!(
            "signal at {} Hz, noise at {} Hz",
            signal.sample_rate(),
            noise.sample_rate()
        )));
    }
    if noise.len() < signal.len() {
        return Err(Error::shape(
            "mix_at_snr",
            format!(
                "noise of {} samples cannot cover a {}-sample signal; tile it first",
                noise.len(),
                signal.len()
            ),
        ));
    }
    if !snr_db.is_finite() {
        return Err(Error::config(format!("non-finite SNR {snr_db}")));
    }
    let p_sig = power(signal.samples());
    let noise_head = &noise.samples()[..signal.len()];
    let p_noise = power(noise_head);
    if p_sig <= T::zero() {
        return Err(Error::numeric("mix_at_snr", "silent signal"));
    }
    if p_noise <= T::zero() {
        return Err(Error::numeric("mix_at_snr", "silent noise"));
    }
    let g = (p_sig / (p_noise * T::of(10f64.powf(snr_db / 10.0)))).sqrt();
    let scaled: Vec<T> = noise_head.iter().map(|&v| v * g).collect();
    let mixed: Vec<T> = signal
        .samples()
        .iter()
        .zip(scaled.iter())
        .map(|(&s, &n)| s + n)
        .collect();
    Ok((
        Waveform::new(mixed, signal.sample_rate())?,
        Waveform::new(scaled, signal.sample_rate())?,
    ))
}

/// Measured SNR in dB of `signal` against `noise` (typically `mixed -
/// signal` re-measured).
pub fn measured_snr_db<T: Scalar>(signal: &Waveform<T>, noise: &Waveform<T>) -> Result<f64> {
    let p_sig = power(signal.samples()).as_f64();
    let p_noise = power(noise.samples()).as_f64();
    if p_sig <= 0.0 || p_noise <= 0.0 {
        return Err(Error::numeric("measured_snr_db", "silent input"));
    }
    Ok(10.0 * (p_sig / p_noise).log10())
}

/// Cyclically tile `noise` starting from `offset` until it covers `len`
/// samples.
pub fn tile_noise<T: Scalar>(noise: &Waveform<T>, len: usize, offset: usize) -> Result<Waveform<T>> {
    if noise.is_empty() {
        return Err(Error::shape("tile_noise", "empty noise"));
    }
    let src = noise.samples();
    let out: Vec<T> = (0..len).map(|i| src[(offset + i) % src.len()]).collect();
    Waveform::new(out, noise.sample_rate())
}
