use super::{StftConfig, Waveform};
use crate::{Error, Result, Scalar};

/// Fundamental-frequency tracker settings. The search range must fit the
/// analysis frame: `frame_samples > sample_rate / min_hz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Config {
    pub min_hz: f64,
    pub max_hz: f64,
    /// Normalized-correlation peak below which a frame is unvoiced.
    pub voicing_threshold: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            min_hz: 60.0,
            max_hz: 400.0,
            voicing_threshold: 0.3,
        }
    }
}

/// Per-frame F0 (Hz) and voicing via normalized cross-correlation over the
/// same framing as the STFT. Unvoiced frames report `f0 = 0, vuv = 0`.
///
/// Returns `(f0, vuv)`, each `frame_count` long.
pub fn extract_f0<T: Scalar>(
    wave: &Waveform<T>,
    config: &StftConfig,
    f0: &F0Config,
) -> Result<(Vec<T>, Vec<T>)> {
    config.validate()?;
    if wave.is_empty() {
        return Err(Error::shape("extract_f0", "empty waveform"));
    }
    if wave.sample_rate() != config.sample_rate {
        return Err(Error::config(format!(
            "waveform at {} Hz analysed with a {} Hz configuration",
            wave.sample_rate(),
            config.sample_rate
        )));
    }
    if !(0.0 < f0.min_hz && f0.min_hz < f0.max_hz) {
        return Err(Error::config(format!(
            "invalid f0 range {}..{} Hz",
            f0.min_hz, f0.max_hz
        )));
    }
    let rate = config.sample_rate as f64;
    let lag_min = (rate / f0.max_hz).floor().max(1.0) as usize;
    let lag_max = (rate / f0.min_hz).ceil() as usize;
    let frame_len = config.frame_samples();
    if lag_max * 2 > frame_len {
        return Err(Error::config(format!(
            "f0 search needs lags up to {lag_max} samples but frames hold only {frame_len}"
        )));
    }
    let window = frame_len - lag_max;
    let shift = config.shift_samples();
    let frames = config.frame_count(wave.len());
    let x = wave.samples();
    let threshold = T::of(f0.voicing_threshold);

    let mut f0_out = Vec::with_capacity(frames);
    let mut vuv_out = Vec::with_capacity(frames);
    let mut frame = vec![T::zero(); frame_len];
    for n in 0..frames {
        let start = n * shift;
        for (t, f) in frame.iter_mut().enumerate() {
            *f = x.get(start + t).copied().unwrap_or_else(T::zero);
        }
        let e0 = energy(&frame[..window]);
        let mut best_lag = 0usize;
        let mut best = T::neg_infinity();
        let mut best_score = T::neg_infinity();
        let lag_span = (lag_max - lag_min).max(1);
        for lag in lag_min..=lag_max {
            let el = energy(&frame[lag..lag + window]);
            let denom = (e0 * el).sqrt();
            if denom <= T::of(1e-12) {
                continue;
            }
            let mut dot = T::zero();
            for t in 0..window {
                dot += frame[t] * frame[t + lag];
            }
            let ncc = dot / denom;
            // Slight preference for shorter lags so an exact multiple of the
            // true period never wins a roundoff-level tie.
            let score = ncc - T::of(0.015) * T::of_usize(lag - lag_min) / T::of_usize(lag_span);
            if score > best_score {
                best_score = score;
                best = ncc;
                best_lag = lag;
            }
        }
        if best_lag > 0 && best >= threshold {
            f0_out.push(T::of(rate) / T::of_usize(best_lag));
            vuv_out.push(T::one());
        } else {
            f0_out.push(T::zero());
            vuv_out.push(T::zero());
        }
    }
    Ok((f0_out, vuv_out))
}

fn energy<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v * v)
}
