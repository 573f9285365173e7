//! Seeded synthetic signals for desk-scale experiments and self-tests:
//! speech-like utterances with voiced/unvoiced structure, noise textures,
//! and exponentially decaying room impulse responses.

use crate::signal::Waveform;
use crate::{Result, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;
use std::f64::consts::PI;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn peak_normalize(x: &mut [f64], peak: f64) {
    let max = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max > 0.0 {
        let g = peak / max;
        for v in x.iter_mut() {
            *v *= g;
        }
    }
}

/// Speech-like utterance: alternating voiced stretches (harmonic stack on a
/// gliding F0 with a slow amplitude contour) and brief fricative-like noise
/// bursts, peak-normalized to 0.3.
pub fn speech_like<T: Scalar>(sample_rate: u32, duration_secs: f64, seed: u64) -> Result<Waveform<T>> {
    let mut rng = rng_for(seed);
    let rate = sample_rate as f64;
    let len = (duration_secs * rate).round() as usize;
    let mut x = vec![0.0f64; len];

    let f0_base = rng.random_range(90.0..160.0);
    let f0_sweep = rng.random_range(-25.0..25.0);
    let vibrato_hz = rng.random_range(3.0..6.0);
    let n_harmonics = 14;
    let voiced_len = (0.24 * rate) as usize;
    let unvoiced_len = (0.06 * rate) as usize;

    let mut t = 0usize;
    let mut phase = 0.0f64;
    let mut voiced = true;
    while t < len {
        let seg = if voiced { voiced_len } else { unvoiced_len }.min(len - t);
        if voiced {
            let amp_lfo = rng.random_range(1.5..4.0);
            let amp_phase = rng.random_range(0.0..2.0 * PI);
            for i in 0..seg {
                let time = (t + i) as f64 / rate;
                let f0 = f0_base + f0_sweep * time + 3.0 * (2.0 * PI * vibrato_hz * time).sin();
                phase += 2.0 * PI * f0 / rate;
                let mut s = 0.0;
                for h in 1..=n_harmonics {
                    // Roll off high harmonics so the spectrum is speech-shaped.
                    s += (phase * h as f64).sin() / (h as f64).powf(1.2);
                }
                let env_edge = taper(i, seg, (0.02 * rate) as usize);
                let env = 0.6 + 0.4 * (2.0 * PI * amp_lfo * time + amp_phase).sin();
                x[t + i] = s * env * env_edge;
            }
        } else {
            for i in 0..seg {
                let env_edge = taper(i, seg, (0.01 * rate) as usize);
                x[t + i] = 0.25 * normal(&mut rng) * env_edge;
            }
        }
        t += seg;
        voiced = !voiced;
    }
    peak_normalize(&mut x, 0.3);
    Waveform::new(x.into_iter().map(T::of).collect(), sample_rate)
}

fn taper(i: usize, seg: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    let up = (i as f64 / ramp as f64).min(1.0);
    let down = ((seg - 1 - i) as f64 / ramp as f64).min(1.0);
    up.min(down)
}

/// White Gaussian noise, peak-normalized to 0.3.
pub fn white_noise<T: Scalar>(sample_rate: u32, duration_secs: f64, seed: u64) -> Result<Waveform<T>> {
    let mut rng = rng_for(seed);
    let len = (duration_secs * sample_rate as f64).round() as usize;
    let mut x: Vec<f64> = (0..len).map(|_| normal(&mut rng)).collect();
    peak_normalize(&mut x, 0.3);
    Waveform::new(x.into_iter().map(T::of).collect(), sample_rate)
}

/// Low-passed noise with a gentle spectral tilt, a stand-in for hum and
/// babble-like backgrounds.
pub fn tilted_noise<T: Scalar>(sample_rate: u32, duration_secs: f64, seed: u64) -> Result<Waveform<T>> {
    let mut rng = rng_for(seed);
    let len = (duration_secs * sample_rate as f64).round() as usize;
    let mut x = vec![0.0f64; len];
    let mut state = 0.0f64;
    let a = 0.92;
    for v in x.iter_mut() {
        state = a * state + (1.0 - a) * normal(&mut rng);
        *v = state + 0.05 * normal(&mut rng);
    }
    peak_normalize(&mut x, 0.3);
    Waveform::new(x.into_iter().map(T::of).collect(), sample_rate)
}

/// Synthetic room impulse response: a unit direct path followed by an
/// exponentially decaying noise tail whose -60 dB time is `t60_secs`.
pub fn room_impulse_response<T: Scalar>(
    sample_rate: u32,
    taps: usize,
    t60_secs: f64,
    seed: u64,
) -> Result<Waveform<T>> {
    let mut rng = rng_for(seed);
    let rate = sample_rate as f64;
    let mut x = vec![0.0f64; taps];
    if taps > 0 {
        x[0] = 1.0;
    }
    let predelay = (0.002 * rate) as usize;
    let decay = (-3.0 * 10f64.ln()) / (t60_secs * rate); // ln amplitude per sample
    for (i, v) in x.iter_mut().enumerate().skip(predelay.min(taps)) {
        let env = ((i - predelay) as f64 * decay).exp();
        *v += 0.45 * env * normal(&mut rng);
    }
    peak_normalize(&mut x, 1.0);
    Waveform::new(x.into_iter().map(T::of).collect(), sample_rate)
}

/// A single-tap unit impulse, the identity element for convolution.
pub fn unit_impulse<T: Scalar>(sample_rate: u32, taps: usize) -> Result<Waveform<T>> {
    let mut x = vec![T::zero(); taps.max(1)];
    x[0] = T::one();
    Waveform::new(x, sample_rate)
}
