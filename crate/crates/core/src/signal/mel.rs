use super::{ComplexSpectrogram, StftConfig};
use crate::{Error, Result, Scalar, ENERGY_FLOOR};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided FFT bins, each filter
/// normalized to unit weight sum so a flat power spectrum yields equal
/// energy in every band.
#[derive(Debug, Clone)]
pub struct MelFilterbank<T> {
    weights: Vec<T>,
    n_mels: usize,
    bins: usize,
}

impl<T: Scalar> MelFilterbank<T> {
    pub fn new(config: &StftConfig, n_mels: usize) -> Result<Self> {
        config.validate()?;
        if n_mels == 0 {
            return Err(Error::config("mel filterbank needs at least one band"));
        }
        let bins = config.bins();
        let nyquist = config.sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let hz_per_bin = config.sample_rate as f64 / config.fft_size as f64;
        // Band edges are n_mels + 2 points equally spaced on the mel scale,
        // expressed in fractional bin coordinates.
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64) / hz_per_bin)
            .collect();

        let mut weights = vec![T::zero(); n_mels * bins];
        for j in 0..n_mels {
            let (left, centre, right) = (edges[j], edges[j + 1], edges[j + 2]);
            let mut sum = 0.0;
            let mut row = vec![0.0f64; bins];
            for (k, r) in row.iter_mut().enumerate() {
                let k = k as f64;
                let rise = (k - left) / (centre - left);
                let fall = (right - k) / (right - centre);
                let w = rise.min(fall).max(0.0);
                *r = w;
                sum += w;
            }
            if sum <= 0.0 {
                return Err(Error::config(format!(
                    "mel band {j} has no FFT-bin support; reduce n_mels or enlarge fft_size"
                )));
            }
            for (k, &r) in row.iter().enumerate() {
                weights[j * bins + k] = T::of(r / sum);
            }
        }
        Ok(Self {
            weights,
            n_mels,
            bins,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn band(&self, j: usize) -> &[T] {
        &self.weights[j * self.bins..(j + 1) * self.bins]
    }

    /// Log band energies of one power-spectrum frame.
    pub fn apply_frame(&self, power: &[T]) -> Result<Vec<T>> {
        if power.len() != self.bins {
            return Err(Error::shape(
                "mel",
                format!("{} power bins, filterbank built for {}", power.len(), self.bins),
            ));
        }
        let floor = T::of(ENERGY_FLOOR);
        Ok((0..self.n_mels)
            .map(|j| {
                let e = self
                    .band(j)
                    .iter()
                    .zip(power.iter())
                    .fold(T::zero(), |acc, (&w, &p)| acc + w * p);
                e.max(floor).ln()
            })
            .collect())
    }
}

/// Log mel energies of a complex spectrogram: power spectrum through the
/// filterbank, floored, then ln. Output is `frames x n_mels` row-major.
pub fn mel_energies<T: Scalar>(spec: &ComplexSpectrogram<T>, n_mels: usize) -> Result<Vec<T>> {
    let fb = MelFilterbank::new(&spec.config, n_mels)?;
    let mut out = Vec::with_capacity(spec.frames() * n_mels);
    let mut power = vec![T::zero(); spec.bins()];
    for n in 0..spec.frames() {
        for (p, c) in power.iter_mut().zip(spec.frame(n).iter()) {
            *p = c.norm_sqr();
        }
        out.extend(fb.apply_frame(&power)?);
    }
    Ok(out)
}
