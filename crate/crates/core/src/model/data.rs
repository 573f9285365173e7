use std::path::Path;

use super::features::{extract_features, las_target, FeatureConfig};
use crate::degrade::{CorpusEntry, Rir, Split};
use crate::signal::{read_wav, AcousticFeatures, Las, Waveform};
use crate::{Error, Result, Scalar};

/// One utterance's training record: network inputs from the degraded
/// signal plus every supervision target the loss schedule consumes.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub id: String,
    /// Mel, pitch and voicing tracks of the degraded waveform.
    pub features: AcousticFeatures<T>,
    /// Degraded (noisy and reverberant) log-amplitude spectrogram.
    pub l_nr: Las<T>,
    /// Log-amplitude spectrogram of the scaled noise actually mixed in.
    pub l_ne: Las<T>,
    /// Clean log-amplitude spectrogram.
    pub l_clean: Las<T>,
    /// Natural impulse response used for the degradation.
    pub rir: Rir<T>,
    /// Reverberation-free noisy waveform (clean plus scaled noise), the
    /// convolution input of the response-shaping loss.
    pub noisy: Waveform<T>,
    /// Natural noisy and reverberant waveform, its target.
    pub degraded: Waveform<T>,
}

/// Load one manifest entry into a training record. Spectral targets are
/// truncated to `k_out` bins to match the model head.
pub fn load_item<T: Scalar>(
    entry: &CorpusEntry,
    manifest_dir: &Path,
    feat: &FeatureConfig,
    k_out: usize,
) -> Result<TrainItem<T>> {
    let rate = feat.stft.sample_rate;
    let clean: Waveform<T> = read_wav(&entry.resolve(manifest_dir, "clean_path"), Some(rate))?;
    let noise: Waveform<T> = read_wav(&entry.resolve(manifest_dir, "noise_path"), Some(rate))?;
    let degraded: Waveform<T> =
        read_wav(&entry.resolve(manifest_dir, "degraded_path"), Some(rate))?;
    let noisy: Waveform<T> = read_wav(&entry.resolve(manifest_dir, "noisy_path"), Some(rate))?;
    let rir_wave: Waveform<T> = read_wav(&entry.resolve(manifest_dir, "rir_path"), Some(rate))?;
    let rir = Rir::from_waveform(&rir_wave)?;

    for (name, w) in [("noise", &noise), ("degraded", &degraded), ("noisy", &noisy)] {
        if w.len() != clean.len() {
            return Err(Error::shape(
                format!("item {}", entry.id),
                format!("{name} length {} against clean length {}", w.len(), clean.len()),
            ));
        }
    }

    Ok(TrainItem {
        id: entry.id.clone(),
        features: extract_features(&degraded, feat)?,
        l_nr: las_target(&degraded, &feat.stft, k_out)?,
        l_ne: las_target(&noise, &feat.stft, k_out)?,
        l_clean: las_target(&clean, &feat.stft, k_out)?,
        rir,
        noisy,
        degraded,
    })
}

/// Load every manifest entry of one split, in manifest (id-sorted) order.
pub fn load_split<T: Scalar>(
    entries: &[CorpusEntry],
    manifest_dir: &Path,
    split: Split,
    feat: &FeatureConfig,
    k_out: usize,
) -> Result<Vec<TrainItem<T>>> {
    let picked: Vec<&CorpusEntry> = entries.iter().filter(|e| e.split == split).collect();
    if picked.is_empty() {
        return Err(Error::config(format!("manifest has no {split:?} entries")));
    }
    picked
        .into_iter()
        .map(|e| load_item(e, manifest_dir, feat, k_out))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{synthesize_corpus, CorpusConfig, SplitSpec};
    use crate::signal::write_wav;
    use crate::synth;

    #[test]
    fn loads_consistent_items_from_a_synthesized_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["clean", "noise", "rir"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        for i in 0..3 {
            let w = synth::speech_like::<f64>(24_000, 0.3, i).unwrap();
            write_wav(&root.join(format!("clean/utt{i}.wav")), &w).unwrap();
        }
        let noise = synth::tilted_noise::<f64>(24_000, 0.5, 99).unwrap();
        write_wav(&root.join("noise/hum.wav"), &noise).unwrap();
        let rir = synth::room_impulse_response::<f64>(24_000, 2048, 0.25, 5).unwrap();
        write_wav(&root.join("rir/room.wav"), &rir).unwrap();

        let out = root.join("corpus");
        let summary = synthesize_corpus(
            &root.join("clean"),
            &root.join("noise"),
            &root.join("rir"),
            &out,
            &CorpusConfig {
                sample_rate: 24_000,
                snr_list: vec![7.5],
                split: SplitSpec::parse("1/0/0").unwrap(),
                seed: 3,
            },
        )
        .unwrap();

        let feat = FeatureConfig::base(24_000);
        let items: Vec<TrainItem<f64>> =
            load_split(&summary.entries, &out, Split::Train, &feat, 341).unwrap();
        assert_eq!(items.len(), 3);
        for item in &items {
            let n = item.features.frames;
            for las in [&item.l_nr, &item.l_ne, &item.l_clean] {
                assert_eq!((las.frames(), las.bins()), (n, 341));
            }
            assert_eq!(item.rir.taps().len(), 2048);
            assert_eq!(item.noisy.len(), item.degraded.len());
            // The degradation model holds on disk: degraded minus the
            // reverberated clean equals the stored scaled noise.
            let clean: Waveform<f64> = read_wav(
                &summary
                    .entries
                    .iter()
                    .find(|e| e.id == item.id)
                    .unwrap()
                    .resolve(&out, "clean_path"),
                Some(24_000),
            )
            .unwrap();
            let noise_from_noisy: Vec<f64> = item
                .noisy
                .samples()
                .iter()
                .zip(clean.samples())
                .map(|(a, b)| a - b)
                .collect();
            let noise: Waveform<f64> = read_wav(
                &summary
                    .entries
                    .iter()
                    .find(|e| e.id == item.id)
                    .unwrap()
                    .resolve(&out, "noise_path"),
                Some(24_000),
            )
            .unwrap();
            for (a, b) in noise_from_noisy.iter().zip(noise.samples()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
        // Split filters really filter.
        assert!(load_split::<f64>(&summary.entries, &out, Split::Test, &feat, 341).is_err());
    }
}
