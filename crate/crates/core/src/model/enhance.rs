use crate::enhance::{band_merge, reconstruct, BandLayout, PhaseSource};
use crate::signal::{Las, StftConfig, Waveform};
use crate::{Error, Result, Scalar};

use super::bwe_fre::BweFreModels;
use super::features::{extract_features, FeatureConfig};
use super::net::DnrAsp;

/// Everything one enhancement run produces: the synthesized waveform, the
/// full-resolution magnitude spectrogram it was synthesized from, and the
/// network's own output before the extension stages.
#[derive(Debug, Clone)]
pub struct Enhanced<T> {
    pub wave: Waveform<T>,
    pub las: Las<T>,
    pub l_hat: Las<T>,
}

/// Run the whole inference pipeline on one degraded waveform: feature
/// extraction, the enhancement network, then (when extension models are
/// given) band extension, band merge and resolution extension, and finally
/// phase recovery plus synthesis.
///
/// A network that emits fewer bins than the analysis grid cannot be
/// synthesized directly, so the extension stages are mandatory for it.
pub fn enhance_waveform<T: Scalar>(
    model: &DnrAsp<T>,
    ext: Option<&BweFreModels<T>>,
    feat: &FeatureConfig,
    degraded: &Waveform<T>,
    phase: PhaseSource<'_, T>,
) -> Result<Enhanced<T>> {
    let features = extract_features(degraded, feat)?;
    let fwd = model.forward(&features, &features.mel, &feat.stft)?;
    let l_hat = fwd.l_hat;
    let full_bins = feat.stft.bins();
    let las = match ext {
        Some(models) => {
            let full = if l_hat.bins() < full_bins {
                let high = models.bwe.forward(&l_hat, feat.stft)?;
                let layout =
                    BandLayout::new(l_hat.bins(), full_bins, models.fre.config().out_bins)?;
                band_merge(&l_hat, &high, &layout)?
            } else {
                l_hat.clone()
            };
            models
                .fre
                .forward(&full, StftConfig::fine(feat.stft.sample_rate))?
        }
        None if l_hat.bins() == full_bins => l_hat.clone(),
        None => {
            return Err(Error::shape(
                "enhance",
                format!(
                    "network emits {} bins but synthesis needs {full_bins}; \
                     supply the extension models",
                    l_hat.bins()
                ),
            ));
        }
    };
    let wave = reconstruct(&las, phase)?;
    Ok(Enhanced { wave, las, l_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bwe_fre::SpectrumMapper;
    use crate::model::ModelConfig;
    use crate::synth;

    fn degraded() -> Waveform<f64> {
        let clean = synth::speech_like(24_000, 0.25, 77).unwrap();
        let noise = synth::tilted_noise(24_000, 0.25, 78).unwrap();
        let (mixed, _) = crate::degrade::mix_at_snr(&clean, &noise, 5.0).unwrap();
        mixed
    }

    #[test]
    fn narrow_network_routes_through_both_extension_stages() {
        let feat = FeatureConfig::base(24_000);
        let model = DnrAsp::<f64>::init(ModelConfig::desk(), 11).unwrap();
        let ext = BweFreModels::init_desk(12).unwrap();
        let wave = degraded();
        let out = enhance_waveform(
            &model,
            Some(&ext),
            &feat,
            &wave,
            PhaseSource::GriffinLim { iters: 1, seed: 0 },
        )
        .unwrap();

        assert_eq!(out.l_hat.bins(), 341);
        assert_eq!(out.las.bins(), 4097);
        assert_eq!(out.las.config.fft_size, 8192);
        assert!(!out.wave.samples().is_empty());
        assert!(out.wave.samples().iter().all(|s| s.is_finite()));

        // The routed result matches composing the stages by hand.
        let high = ext.bwe.forward(&out.l_hat, feat.stft).unwrap();
        let merged = band_merge(&out.l_hat, &high, &BandLayout::base()).unwrap();
        let fine = ext.fre.forward(&merged, StftConfig::fine(24_000)).unwrap();
        for (a, b) in out.las.values().iter().zip(fine.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn full_band_network_synthesizes_directly() {
        let feat = FeatureConfig::base(24_000);
        let model = DnrAsp::<f64>::init(ModelConfig::desk().with_bins(1025), 13).unwrap();
        let wave = degraded();
        let out = enhance_waveform(
            &model,
            None,
            &feat,
            &wave,
            PhaseSource::NoisyWaveform(&wave),
        )
        .unwrap();
        assert_eq!(out.las.bins(), 1025);
        for (a, b) in out.las.values().iter().zip(out.l_hat.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(out.wave.samples().iter().all(|s| s.is_finite()));

        // A full-band network can still feed the resolution extension.
        let ext = BweFreModels {
            bwe: SpectrumMapper::init(crate::model::MapperConfig::bwe_desk(), 14).unwrap(),
            fre: SpectrumMapper::init(crate::model::MapperConfig::fre_desk(), 15).unwrap(),
        };
        let fine = enhance_waveform(
            &model,
            Some(&ext),
            &feat,
            &wave,
            PhaseSource::NoisyWaveform(&wave),
        )
        .unwrap();
        assert_eq!(fine.las.bins(), 4097);
    }

    #[test]
    fn narrow_network_without_extensions_is_rejected() {
        let feat = FeatureConfig::base(24_000);
        let model = DnrAsp::<f64>::init(ModelConfig::desk(), 17).unwrap();
        let wave = degraded();
        let err = enhance_waveform(
            &model,
            None,
            &feat,
            &wave,
            PhaseSource::GriffinLim { iters: 0, seed: 0 },
        )
        .unwrap_err();
        assert!(err.to_string().contains("extension"), "{err}");
    }
}
