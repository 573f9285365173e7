use super::fft::RealFft;
use super::window::window;
use super::{ComplexSpectrogram, Las, StftConfig, Waveform};
use crate::{Error, Result, Scalar, AMP_FLOOR, WOLA_EPS};
use num_complex::Complex;

/// Short-time Fourier transform.
///
/// Frame `n` covers samples `[n*shift, n*shift + frame_len)`; there are
/// `ceil(len / shift)` frames and samples beyond the end are treated as
/// zero, so every input sample lands in at least one frame. Each frame is
/// windowed, zero-padded to `fft_size` and transformed to `fft_size/2 + 1`
/// one-sided bins.
pub fn stft<T: Scalar>(wave: &Waveform<T>, config: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    config.validate()?;
    if wave.is_empty() {
        return Err(Error::shape("stft", "empty waveform"));
    }
    if wave.sample_rate() != config.sample_rate {
        return Err(Error::config(format!(
            "waveform at {} Hz analysed with a {} Hz configuration",
            wave.sample_rate(),
            config.sample_rate
        )));
    }
    let frame_len = config.frame_samples();
    let shift = config.shift_samples();
    let frames = config.frame_count(wave.len());
    let bins = config.bins();
    let win: Vec<T> = window(config.window, frame_len);
    let fft = RealFft::new(config.fft_size)?;
    let x = wave.samples();

    let mut values = Vec::with_capacity(frames * bins);
    let mut frame = vec![T::zero(); frame_len];
    for n in 0..frames {
        let start = n * shift;
        for (t, f) in frame.iter_mut().enumerate() {
            *f = match x.get(start + t) {
                Some(&s) => s * win[t],
                None => T::zero(),
            };
        }
        values.extend(fft.forward(&frame)?);
    }
    Ok(ComplexSpectrogram {
        values,
        frames,
        bins,
        config: *config,
        source_len: Some(wave.len()),
    })
}

/// Log-amplitude spectrum: `ln(max(|X|, amp_floor))` per bin.
pub fn las_of<T: Scalar>(spec: &ComplexSpectrogram<T>) -> Las<T> {
    let floor = T::of(AMP_FLOOR);
    Las {
        values: spec
            .values
            .iter()
            .map(|c| c.norm().max(floor).ln())
            .collect(),
        frames: spec.frames,
        bins: spec.bins,
        config: spec.config,
    }
}

/// Inverse STFT by weighted overlap-add.
///
/// Each frame is inverse-transformed, truncated to the frame length,
/// windowed again, and overlap-added; the result is normalized by the
/// accumulated squared window, floored at a small epsilon. The output is
/// truncated to `source_len` when the spectrogram carries one.
pub fn istfs<T: Scalar>(spec: &ComplexSpectrogram<T>) -> Result<Waveform<T>> {
    let config = &spec.config;
    config.validate()?;
    if spec.frames == 0 {
        return Err(Error::shape("istfs", "empty spectrogram"));
    }
    if spec.bins != config.bins() {
        return Err(Error::shape(
            "istfs",
            format!("{} bins but config implies {}", spec.bins, config.bins()),
        ));
    }
    let frame_len = config.frame_samples();
    let shift = config.shift_samples();
    let total = (spec.frames - 1) * shift + frame_len;
    let win: Vec<T> = window(config.window, frame_len);
    let fft = RealFft::new(config.fft_size)?;

    let mut num = vec![T::zero(); total];
    let mut den = vec![T::zero(); total];
    for n in 0..spec.frames {
        let time = fft.inverse(spec.frame(n))?;
        let start = n * shift;
        for t in 0..frame_len {
            num[start + t] += win[t] * time[t];
            den[start + t] += win[t] * win[t];
        }
    }

    // A shift/window combination that leaves interior samples essentially
    // uncovered cannot be resynthesised; the epsilon floor would silently
    // zero those samples instead.
    let eps = T::of(WOLA_EPS);
    if total > 2 * frame_len {
        for (t, &d) in den.iter().enumerate().take(total - frame_len).skip(frame_len) {
            if d < eps {
                return Err(Error::config(format!(
                    "degenerate window/shift: squared-window overlap vanishes at sample {t}"
                )));
            }
        }
    }

    let mut out: Vec<T> = num
        .into_iter()
        .zip(den)
        .map(|(n, d)| n / d.max(eps))
        .collect();
    if let Some(len) = spec.source_len {
        if len < out.len() {
            out.truncate(len);
        }
    }
    Waveform::new(out, config.sample_rate)
}

/// Combine a log-amplitude spectrogram with unit-magnitude phase terms into
/// a complex spectrogram ready for [`istfs`].
pub fn las_with_phase<T: Scalar>(
    las: &Las<T>,
    phase: &ComplexSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    if las.frames > phase.frames() || las.bins != phase.bins() {
        return Err(Error::shape(
            "las_with_phase",
            format!(
                "amplitude {}x{} versus phase {}x{}",
                las.frames,
                las.bins,
                phase.frames(),
                phase.bins()
            ),
        ));
    }
    let mut values = Vec::with_capacity(las.frames * las.bins);
    for n in 0..las.frames {
        for (l, p) in las.row(n).iter().zip(phase.frame(n).iter()) {
            let mag = l.exp();
            let norm = p.norm();
            let unit = if norm > T::zero() {
                *p / norm
            } else {
                Complex::new(T::one(), T::zero())
            };
            values.push(unit * mag);
        }
    }
    Ok(ComplexSpectrogram {
        values,
        frames: las.frames,
        bins: las.bins,
        config: las.config,
        source_len: phase.source_len,
    })
}
