//! Deterministic spectral enhancement operations: joint deconvolution and
//! noise subtraction in the amplitude domain, band split/merge for
//! bandwidth extension, reference frequency-resolution upsampling, and
//! phase recovery.

use crate::degrade::Rir;
use crate::signal::{istfs, las_with_phase, stft, ComplexSpectrogram, Las, RealFft, Waveform};
use crate::{Error, Result, Scalar, AMP_FLOOR, R_MAG_FLOOR_RATIO};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Amplitude-domain noise description: per-bin noise log-amplitude spectra
/// plus a single nonnegative weight.
#[derive(Debug, Clone)]
pub struct NoiseEstimate<T> {
    pub noise_las: Las<T>,
    pub alpha: T,
}

impl<T: Scalar> NoiseEstimate<T> {
    pub fn new(noise_las: Las<T>, alpha: T) -> Result<Self> {
        if !alpha.is_finite() || alpha < T::zero() {
            return Err(Error::numeric(
                "noise estimate",
                format!("alpha {alpha} must be finite and nonnegative"),
            ));
        }
        Ok(Self { noise_las, alpha })
    }
}

/// One-sided magnitude spectrum of an impulse response, floored so it can
/// safely divide amplitude spectra.
#[derive(Debug, Clone)]
pub struct RirMagnitude<T> {
    values: Vec<T>,
}

impl<T: Scalar> RirMagnitude<T> {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn truncate_bins(&self, bins: usize) -> Result<Self> {
        if bins == 0 || bins > self.values.len() {
            return Err(Error::shape(
                "rir magnitude",
                format!("cannot keep {bins} of {} bins", self.values.len()),
            ));
        }
        Ok(Self {
            values: self.values[..bins].to_vec(),
        })
    }
}

/// Magnitude of the full-length FFT of the impulse response, floored at
/// `R_MAG_FLOOR_RATIO` of its own peak so later deconvolution gain is
/// bounded (60 dB).
pub fn rir_magnitude<T: Scalar>(rir: &Rir<T>) -> Result<RirMagnitude<T>> {
    let taps = rir.taps();
    let fft = RealFft::new(taps.len())?;
    let spec = fft.forward(taps)?;
    let mags: Vec<T> = spec.iter().map(|c| c.norm()).collect();
    let peak = mags.iter().fold(T::zero(), |m, &v| m.max(v));
    if !(peak > T::zero()) {
        return Err(Error::numeric("rir_magnitude", "all-zero spectrum"));
    }
    let floor = peak * T::of(R_MAG_FLOOR_RATIO);
    Ok(RirMagnitude {
        values: mags.into_iter().map(|m| m.max(floor)).collect(),
    })
}

/// Saturating helper keeping Eq.-style amplitude arithmetic finite for any
/// finite inputs: exponentials and quotients are capped far below overflow.
fn sat_exp(l: f64) -> f64 {
    l.min(690.0).exp()
}

const SAT_MAX: f64 = 1e300;

/// Initial denoising and dereverberation of a noisy-reverberant LAS.
///
/// Per bin: divide the amplitude spectrum by the RIR magnitude, subtract
/// the weighted noise amplitude, floor at the global amplitude floor, and
/// return to the log domain:
/// `out = ln(max(exp(l_nr)/r - alpha*exp(l_ne), amp_floor))`.
///
/// The arithmetic runs in saturating f64 so *any* finite inputs produce a
/// finite result.
pub fn initial_denoise_dereverb<T: Scalar>(
    l_nr: &Las<T>,
    rm: &RirMagnitude<T>,
    ne: &NoiseEstimate<T>,
) -> Result<Las<T>> {
    let (n, k) = (l_nr.frames(), l_nr.bins());
    if ne.noise_las.frames() != n || ne.noise_las.bins() != k {
        return Err(Error::shape(
            "initial_denoise_dereverb",
            format!(
                "noise LAS {}x{} against input {}x{}",
                ne.noise_las.frames(),
                ne.noise_las.bins(),
                n,
                k
            ),
        ));
    }
    if rm.bins() != k {
        return Err(Error::shape(
            "initial_denoise_dereverb",
            format!("RIR magnitude has {} bins, input {}", rm.bins(), k),
        ));
    }
    if !ne.alpha.is_finite() || ne.alpha < T::zero() {
        return Err(Error::numeric(
            "initial_denoise_dereverb",
            "alpha must be finite and nonnegative",
        ));
    }
    for (name, vals) in [("input LAS", l_nr.values()), ("noise LAS", ne.noise_las.values())] {
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "initial_denoise_dereverb",
                format!("non-finite value in {name}"),
            ));
        }
    }

    let alpha = ne.alpha.as_f64();
    let mut out = Vec::with_capacity(n * k);
    for f in 0..n {
        let nr = l_nr.row(f);
        let nse = ne.noise_las.row(f);
        for b in 0..k {
            let dereverbed = (sat_exp(nr[b].as_f64()) / rm.values[b].as_f64()).min(SAT_MAX);
            let noise_amp = (alpha * sat_exp(nse[b].as_f64())).min(SAT_MAX);
            let cleaned = (dereverbed - noise_amp).max(AMP_FLOOR);
            out.push(T::of(cleaned.ln()));
        }
    }
    Las::from_values(out, n, k, l_nr.config)
}

/// Fixed frequency-band geometry for bandwidth extension and resolution
/// upsampling: 341 narrow-band bins (4 kHz at the 2048-point analysis),
/// 1025 full-band bins, 4097 fine bins. The narrow and high bands share
/// one boundary bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandLayout {
    pub k_nb: usize,
    pub k_full: usize,
    pub k_fine: usize,
}

impl BandLayout {
    pub const fn base() -> Self {
        Self {
            k_nb: 341,
            k_full: 1025,
            k_fine: 4097,
        }
    }

    pub fn new(k_nb: usize, k_full: usize, k_fine: usize) -> Result<Self> {
        if !(1 < k_nb && k_nb < k_full && k_full < k_fine) {
            return Err(Error::config(format!(
                "band layout requires 1 < k_nb < k_full < k_fine, got {k_nb}/{k_full}/{k_fine}"
            )));
        }
        Ok(Self {
            k_nb,
            k_full,
            k_fine,
        })
    }

    /// Bins in the high band, boundary bin included.
    pub fn k_high(&self) -> usize {
        self.k_full - self.k_nb + 1
    }
}

/// Split a full-band LAS into the narrow band (bins `0..k_nb`) and the
/// high band (bins `k_nb-1..k_full`); the boundary bin appears in both.
pub fn band_split<T: Scalar>(l: &Las<T>, layout: &BandLayout) -> Result<(Las<T>, Las<T>)> {
    if l.bins() != layout.k_full {
        return Err(Error::shape(
            "band_split",
            format!("{} bins, layout expects {}", l.bins(), layout.k_full),
        ));
    }
    let n = l.frames();
    let mut narrow = Vec::with_capacity(n * layout.k_nb);
    let mut high = Vec::with_capacity(n * layout.k_high());
    for f in 0..n {
        let row = l.row(f);
        narrow.extend_from_slice(&row[..layout.k_nb]);
        high.extend_from_slice(&row[layout.k_nb - 1..]);
    }
    Ok((
        Las::from_values(narrow, n, layout.k_nb, l.config)?,
        Las::from_values(high, n, layout.k_high(), l.config)?,
    ))
}

/// Inverse of [`band_split`]; the shared boundary bin is taken from the
/// narrow band.
pub fn band_merge<T: Scalar>(narrow: &Las<T>, high: &Las<T>, layout: &BandLayout) -> Result<Las<T>> {
    if narrow.bins() != layout.k_nb || high.bins() != layout.k_high() {
        return Err(Error::shape(
            "band_merge",
            format!(
                "narrow {} / high {} bins, layout expects {} / {}",
                narrow.bins(),
                high.bins(),
                layout.k_nb,
                layout.k_high()
            ),
        ));
    }
    if narrow.frames() != high.frames() {
        return Err(Error::shape(
            "band_merge",
            format!("{} narrow frames, {} high frames", narrow.frames(), high.frames()),
        ));
    }
    let n = narrow.frames();
    let mut out = Vec::with_capacity(n * layout.k_full);
    for f in 0..n {
        out.extend_from_slice(narrow.row(f));
        out.extend_from_slice(&high.row(f)[1..]);
    }
    Las::from_values(out, n, layout.k_full, narrow.config)
}

/// Non-neural reference for frequency-resolution extension: linear
/// interpolation from `k_full` to `k_fine` bins along frequency, with
/// endpoints preserved. Also the additive baseline inside the neural
/// upsampler.
pub fn fre_upsample_reference<T: Scalar>(l: &Las<T>, layout: &BandLayout) -> Result<Las<T>> {
    if l.bins() != layout.k_full {
        return Err(Error::shape(
            "fre_upsample_reference",
            format!("{} bins, layout expects {}", l.bins(), layout.k_full),
        ));
    }
    let n = l.frames();
    let (k_in, k_out) = (layout.k_full, layout.k_fine);
    let step = (k_in - 1) as f64 / (k_out - 1) as f64;
    let mut out = Vec::with_capacity(n * k_out);
    for f in 0..n {
        let row = l.row(f);
        for i in 0..k_out {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(k_in - 1);
            let frac = pos - lo as f64;
            let v = if frac == 0.0 || lo + 1 == k_in {
                row[lo]
            } else {
                row[lo] * T::of(1.0 - frac) + row[lo + 1] * T::of(frac)
            };
            out.push(v);
        }
    }
    Las::from_values(out, n, k_out, l.config)
}

/// Iterative phase recovery: start from seeded random phase and alternate
/// synthesis/analysis projections while holding the target magnitudes
/// `exp(l)` fixed. `iters = 0` returns the random-phase spectrogram.
pub fn griffin_lim_phase<T: Scalar>(l: &Las<T>, iters: usize, seed: u64) -> Result<ComplexSpectrogram<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (l.frames(), l.bins());
    let mut phase_values = Vec::with_capacity(n * k);
    for _ in 0..n * k {
        let ang: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        phase_values.push(Complex::new(T::of(ang.cos()), T::of(ang.sin())));
    }
    let mut phase = ComplexSpectrogram {
        values: phase_values,
        frames: n,
        bins: k,
        config: l.config,
        source_len: None,
    };
    let mut spec = las_with_phase(l, &phase)?;
    for _ in 0..iters {
        let wave = istfs(&spec)?;
        phase = stft(&wave, &l.config)?;
        phase.source_len = None;
        spec = las_with_phase(l, &phase)?;
    }
    Ok(spec)
}

/// Where reconstruction takes its phase spectra from.
#[derive(Debug, Clone)]
pub enum PhaseSource<'a, T> {
    /// Reuse the phase of the degraded input waveform.
    NoisyWaveform(&'a Waveform<T>),
    /// Recover phase iteratively from the magnitudes alone.
    GriffinLim { iters: usize, seed: u64 },
}

/// Turn an enhanced LAS back into a waveform using the chosen phase.
pub fn reconstruct<T: Scalar>(l: &Las<T>, phase_source: PhaseSource<'_, T>) -> Result<Waveform<T>> {
    let spec = match phase_source {
        PhaseSource::NoisyWaveform(wave) => {
            let phase = stft(wave, &l.config)?;
            if phase.frames() < l.frames() {
                return Err(Error::shape(
                    "reconstruct",
                    format!(
                        "phase source yields {} frames, need {}",
                        phase.frames(),
                        l.frames()
                    ),
                ));
            }
            las_with_phase(l, &phase)?
        }
        PhaseSource::GriffinLim { iters, seed } => griffin_lim_phase(l, iters, seed)?,
    };
    istfs(&spec)
}
