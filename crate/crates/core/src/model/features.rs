use crate::signal::{extract_f0, las_of, mel_energies, stft};
use crate::signal::{AcousticFeatures, F0Config, Las, StftConfig, Waveform};
use crate::{Result, Scalar};

/// Analysis settings shared by feature extraction and spectral targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f0: F0Config,
}

impl FeatureConfig {
    /// Stock analysis: 50 ms / 12 ms frames, 2048-point transform, 80 mel
    /// bands, pitch search over the speech range.
    pub fn base(sample_rate: u32) -> Self {
        Self {
            stft: StftConfig::base(sample_rate),
            n_mels: 80,
            f0: F0Config::default(),
        }
    }
}

/// Frame-level network inputs from one waveform: mel-band log energies plus
/// pitch and voicing tracks, all on the same frame grid.
pub fn extract_features<T: Scalar>(
    wave: &Waveform<T>,
    cfg: &FeatureConfig,
) -> Result<AcousticFeatures<T>> {
    let spec = stft(wave, &cfg.stft)?;
    let mel = mel_energies(&spec, cfg.n_mels)?;
    let (f0, vuv) = extract_f0(wave, &cfg.stft, &cfg.f0)?;
    AcousticFeatures::new(mel, cfg.n_mels, f0, vuv)
}

/// Log-amplitude spectrogram of a waveform, optionally truncated to the
/// lowest `k_out` bins to match a narrow-band model head.
pub fn las_target<T: Scalar>(
    wave: &Waveform<T>,
    stft_cfg: &StftConfig,
    k_out: usize,
) -> Result<Las<T>> {
    let full = las_of(&stft(wave, stft_cfg)?);
    if k_out == full.bins() {
        Ok(full)
    } else {
        full.truncate_bins(k_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn features_and_targets_share_the_frame_grid() {
        let cfg = FeatureConfig::base(24_000);
        let wave = synth::speech_like::<f64>(24_000, 0.4, 3).unwrap();
        let feats = extract_features(&wave, &cfg).unwrap();
        let las = las_target(&wave, &cfg.stft, 341).unwrap();
        assert_eq!(feats.frames, cfg.stft.frame_count(wave.len()));
        assert_eq!(las.frames(), feats.frames);
        assert_eq!(las.bins(), 341);
        assert_eq!(feats.n_mels, 80);
        // A plainly voiced tone must be detected as voiced somewhere.
        assert!(feats.vuv.iter().any(|&v| v == 1.0));
    }
}
