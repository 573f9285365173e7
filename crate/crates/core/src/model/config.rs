use crate::degrade::RIR_TAPS;
use crate::{Error, Result};

/// Layer widths and geometry of the enhancement network. `desk()` is the
/// test-sized instantiation (all hidden widths an eighth of `paper()`);
/// both share the same wiring, bin counts and parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Mel bands fed to the token encoder and (with F0/vuv) the converter.
    pub n_mels: usize,
    /// Frequency bins of every predicted log-amplitude spectrogram.
    pub k_out: usize,
    /// Impulse-response length in samples; its FFT supplies the per-bin
    /// reverberation magnitudes, so `rir_len / 2 + 1 >= k_out`.
    pub rir_len: usize,

    /// Token encoder: per-direction GRU width, then a 2-D conv stack that
    /// collapses the frequency axis to 1, then attention over templates.
    pub enc_gru_hidden: usize,
    pub enc_channels: Vec<usize>,
    pub enc_freq_strides: Vec<usize>,
    /// Time extent of the encoder's 2-D kernels (frequency extent is
    /// [`ModelConfig::FREQ_KERNEL`]).
    pub enc_time_width: usize,
    pub templates: usize,
    pub heads: usize,

    /// Feature-to-spectrum converter: two time convolutions and a linear
    /// output head.
    pub converter_channels: usize,
    pub converter_width: usize,

    /// Noise spectrum head (same shape family as the converter).
    pub noise_channels: usize,
    pub noise_width: usize,
    /// Noise weight head: one convolution, a scalar projection, temporal
    /// average pooling, softplus.
    pub alpha_channels: usize,
    pub alpha_width: usize,

    /// Impulse-response head: GRU, convolution, linear projection to
    /// `rir_len`, temporal average pooling.
    pub reverb_gru_hidden: usize,
    pub reverb_channels: usize,
    pub reverb_width: usize,

    /// Refinement stage after the closed-form inverse.
    pub post_gru_hidden: usize,
    pub post_channels: usize,
    pub post_width: usize,
}

impl ModelConfig {
    /// Frequency extent of the token encoder's 2-D kernels.
    pub const FREQ_KERNEL: usize = 5;

    /// Full-scale widths. Not exercised by tests; kept for completeness.
    pub fn paper() -> Self {
        Self {
            n_mels: 80,
            k_out: 1025,
            rir_len: RIR_TAPS,
            enc_gru_hidden: 40,
            enc_channels: vec![32, 64, 64, 128, 256],
            enc_freq_strides: vec![2, 2, 2, 2, 5],
            enc_time_width: 5,
            templates: 16,
            heads: 8,
            converter_channels: 2048,
            converter_width: 7,
            noise_channels: 1024,
            noise_width: 7,
            alpha_channels: 256,
            alpha_width: 5,
            reverb_gru_hidden: 128,
            reverb_channels: 1024,
            reverb_width: 9,
            post_gru_hidden: 512,
            post_channels: 2048,
            post_width: 7,
        }
    }

    /// Desk-scale widths: every hidden size an eighth of [`Self::paper`],
    /// same structure. Trains a handful of short utterances in seconds.
    pub fn desk() -> Self {
        Self {
            enc_gru_hidden: 5,
            enc_channels: vec![4, 8, 8, 16, 32],
            converter_channels: 256,
            noise_channels: 128,
            alpha_channels: 32,
            reverb_gru_hidden: 16,
            reverb_channels: 128,
            post_gru_hidden: 64,
            post_channels: 256,
            ..Self::paper()
        }
    }

    /// Same widths, predicting only the first `k_out` bins (the narrow band
    /// feeding bandwidth extension).
    pub fn with_bins(self, k_out: usize) -> Self {
        Self { k_out, ..self }
    }

    /// Collapse every time-axis kernel to width 1. All convolutions already
    /// use time stride 1, so in this configuration each frame is processed
    /// independently everywhere except the GRUs, and temporally pooled heads
    /// become exactly invariant to frame duplication once the GRUs are
    /// neutralized.
    pub fn pointwise_time(self) -> Self {
        Self {
            enc_time_width: 1,
            converter_width: 1,
            noise_width: 1,
            alpha_width: 1,
            reverb_width: 1,
            post_width: 1,
            ..self
        }
    }

    /// Token width: the last encoder conv channel count.
    pub fn token_dim(&self) -> usize {
        *self.enc_channels.last().expect("validated non-empty")
    }

    fn scalar_fields(&self) -> [(&'static str, usize); 19] {
        [
            ("n_mels", self.n_mels),
            ("k_out", self.k_out),
            ("rir_len", self.rir_len),
            ("enc_gru_hidden", self.enc_gru_hidden),
            ("enc_time_width", self.enc_time_width),
            ("templates", self.templates),
            ("heads", self.heads),
            ("converter_channels", self.converter_channels),
            ("converter_width", self.converter_width),
            ("noise_channels", self.noise_channels),
            ("noise_width", self.noise_width),
            ("alpha_channels", self.alpha_channels),
            ("alpha_width", self.alpha_width),
            ("reverb_gru_hidden", self.reverb_gru_hidden),
            ("reverb_channels", self.reverb_channels),
            ("reverb_width", self.reverb_width),
            ("post_gru_hidden", self.post_gru_hidden),
            ("post_channels", self.post_channels),
            ("post_width", self.post_width),
        ]
    }

    /// Plain-text key=value snapshot, the checkpoint sidecar format.
    pub fn to_kv_text(&self) -> String {
        use std::fmt::Write as _;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        for (k, v) in self.scalar_fields() {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "enc_channels={}", join(&self.enc_channels));
        let _ = writeln!(out, "enc_freq_strides={}", join(&self.enc_freq_strides));
        out
    }

    /// Parse [`Self::to_kv_text`] output. Every key must be present, no
    /// unknown keys, and the result must validate.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: `{line}` is not key=value", i + 1))
            })?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("duplicate config key `{}`", k.trim())));
            }
        }
        let mut take = |k: &str| -> Result<String> {
            map.remove(k)
                .ok_or_else(|| Error::config(format!("missing config key `{k}`")))
        };
        let int = |k: &str, v: String| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("config key `{k}`: `{v}` is not a count")))
        };
        let list = |k: &str, v: String| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::config(format!("config key `{k}`: `{p}` is not a count"))
                    })
                })
                .collect()
        };
        let mut one = |k: &str| -> Result<usize> { int(k, take(k)?) };
        let cfg = Self {
            n_mels: one("n_mels")?,
            k_out: one("k_out")?,
            rir_len: one("rir_len")?,
            enc_gru_hidden: one("enc_gru_hidden")?,
            enc_time_width: one("enc_time_width")?,
            templates: one("templates")?,
            heads: one("heads")?,
            converter_channels: one("converter_channels")?,
            converter_width: one("converter_width")?,
            noise_channels: one("noise_channels")?,
            noise_width: one("noise_width")?,
            alpha_channels: one("alpha_channels")?,
            alpha_width: one("alpha_width")?,
            reverb_gru_hidden: one("reverb_gru_hidden")?,
            reverb_channels: one("reverb_channels")?,
            reverb_width: one("reverb_width")?,
            post_gru_hidden: one("post_gru_hidden")?,
            post_channels: one("post_channels")?,
            post_width: one("post_width")?,
            enc_channels: list("enc_channels", take("enc_channels")?)?,
            enc_freq_strides: list("enc_freq_strides", take("enc_freq_strides")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::config(format!("unknown config key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Converter/noise/reverb input width: mel + F0 + vuv + token.
    pub fn feature_cols(&self) -> usize {
        self.n_mels + 2 + self.token_dim()
    }

    fn conv_out(len: usize, kernel: usize, stride: usize) -> usize {
        let pad = (kernel - 1) / 2;
        (len + 2 * pad).saturating_sub(kernel) / stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.k_out == 0 {
            return Err(Error::config("n_mels and k_out must be positive"));
        }
        if self.rir_len / 2 + 1 < self.k_out {
            return Err(Error::config(format!(
                "impulse response of {} taps yields {} spectrum bins, fewer than k_out {}",
                self.rir_len,
                self.rir_len / 2 + 1,
                self.k_out
            )));
        }
        if self.enc_channels.is_empty() || self.enc_channels.len() != self.enc_freq_strides.len() {
            return Err(Error::config(
                "encoder channel and stride lists must be non-empty and equal length",
            ));
        }
        let token = self.token_dim();
        if self.heads == 0 || token % self.heads != 0 {
            return Err(Error::config(format!(
                "token width {token} not divisible by {} attention heads",
                self.heads
            )));
        }
        if self.templates == 0 {
            return Err(Error::config("at least one template required"));
        }
        for (name, v) in [
            ("enc_gru_hidden", self.enc_gru_hidden),
            ("enc_time_width", self.enc_time_width),
            ("converter_channels", self.converter_channels),
            ("converter_width", self.converter_width),
            ("noise_channels", self.noise_channels),
            ("noise_width", self.noise_width),
            ("alpha_channels", self.alpha_channels),
            ("alpha_width", self.alpha_width),
            ("reverb_gru_hidden", self.reverb_gru_hidden),
            ("reverb_channels", self.reverb_channels),
            ("reverb_width", self.reverb_width),
            ("post_gru_hidden", self.post_gru_hidden),
            ("post_channels", self.post_channels),
            ("post_width", self.post_width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        // The conv stack must collapse the GRU output width to exactly one
        // frequency column so the attention query is a single vector per
        // frame.
        let mut w = 2 * self.enc_gru_hidden;
        for &s in &self.enc_freq_strides {
            if s == 0 {
                return Err(Error::config("encoder stride must be positive"));
            }
            w = Self::conv_out(w, Self::FREQ_KERNEL, s);
        }
        if w != 1 {
            return Err(Error::config(format!(
                "encoder strides reduce the {}-wide feature axis to {w} columns, need exactly 1",
                2 * self.enc_gru_hidden
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_configurations_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::desk().with_bins(341).validate().unwrap();
        ModelConfig::desk().pointwise_time().validate().unwrap();
        assert_eq!(ModelConfig::desk().token_dim(), 32);
        assert_eq!(ModelConfig::paper().token_dim(), 256);
        assert_eq!(ModelConfig::desk().feature_cols(), 80 + 2 + 32);
    }

    #[test]
    fn bad_configurations_rejected() {
        let err = ModelConfig::desk().with_bins(0).validate().unwrap_err();
        assert!(err.to_string().contains("k_out"));

        let mut c = ModelConfig::desk();
        c.heads = 7;
        assert!(c.validate().is_err());

        // Strides that stop short of a single frequency column: the 80-wide
        // recurrent output halves to 5 after four stages, and a final
        // stride of 2 leaves 3 columns.
        let mut c = ModelConfig::paper();
        c.enc_freq_strides = vec![2, 2, 2, 2, 2];
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("exactly 1"), "{err}");

        let mut c = ModelConfig::desk();
        c.k_out = 2000;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_text_round_trips() {
        let cfg = ModelConfig::desk().with_bins(341);
        let text = cfg.to_kv_text();
        assert_eq!(ModelConfig::from_kv_text(&text).unwrap(), cfg);

        assert!(ModelConfig::from_kv_text("nonsense").is_err());
        let err = ModelConfig::from_kv_text(&format!("{text}bogus=3\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let partial: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let err = ModelConfig::from_kv_text(&partial).unwrap_err();
        assert!(err.to_string().contains("n_mels"), "{err}");
    }
}
