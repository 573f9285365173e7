use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::degrade::Rir;
use crate::enhance::NoiseEstimate;
use crate::nn::{
    bigru, dense, init_layer, mha_over_templates, BoundParams, LayerSpec, ParamStore, Tape,
    Tensor, Var,
};
use crate::signal::{AcousticFeatures, Las, StftConfig};
use crate::{Error, Result, Scalar, AMP_FLOOR, R_MAG_FLOOR_RATIO};

/// The five-stage enhancement network: token encoder, feature-to-spectrum
/// converter, noise head, impulse-response head, and refinement stage, glued
/// together by the closed-form inverse of the degradation model.
#[derive(Debug, Clone)]
pub struct DnrAsp<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
}

/// Tape handles for every intermediate output of one forward pass, kept so
/// each training loss can attach to the tensor it supervises.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[1, token_dim]` utterance-level degradation embedding.
    pub token: Var,
    /// `[n, k]` predicted degraded log-amplitude spectrogram.
    pub l_nr: Var,
    /// `[n, k]` predicted noise log-amplitude spectrogram.
    pub l_ne: Var,
    /// Scalar noise weight, softplus-constrained.
    pub alpha: Var,
    /// `[rir_len]` predicted impulse response.
    pub r_hat: Var,
    /// `[n, k]` closed-form denoised/dereverberated spectrogram.
    pub l_tilde: Var,
    /// `[n, k]` refined clean spectrogram.
    pub l_hat: Var,
}

/// Values of one forward pass, repackaged into domain types.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub token: Vec<T>,
    pub l_nr: Las<T>,
    pub noise: NoiseEstimate<T>,
    pub r_hat: Rir<T>,
    pub l_tilde: Las<T>,
    pub l_hat: Las<T>,
}

fn plan(cfg: &ModelConfig) -> Vec<(String, LayerSpec)> {
    let token = cfg.token_dim();
    let cols = cfg.feature_cols();
    let mut p = Vec::new();
    p.push((
        "enc.gru".into(),
        LayerSpec::BiGru {
            inp: cfg.n_mels,
            hidden: cfg.enc_gru_hidden,
        },
    ));
    let mut cin = 1;
    for (i, (&cout, &sw)) in cfg
        .enc_channels
        .iter()
        .zip(&cfg.enc_freq_strides)
        .enumerate()
    {
        p.push((
            format!("enc.conv{i}"),
            LayerSpec::Conv2d {
                cin,
                cout,
                kh: cfg.enc_time_width,
                kw: ModelConfig::FREQ_KERNEL,
                sh: 1,
                sw,
            },
        ));
        cin = cout;
    }
    p.push((
        "enc.attn".into(),
        LayerSpec::MhaTemplates {
            dim: token,
            heads: cfg.heads,
            templates: cfg.templates,
        },
    ));

    for (i, inp) in [cols, cfg.converter_channels].into_iter().enumerate() {
        p.push((
            format!("converter.conv{i}"),
            LayerSpec::Conv1d {
                cin: inp,
                cout: cfg.converter_channels,
                width: cfg.converter_width,
                stride: 1,
            },
        ));
    }
    p.push((
        "converter.out".into(),
        LayerSpec::Dense {
            inp: cfg.converter_channels,
            out: cfg.k_out,
            zero_init: false,
        },
    ));

    for (i, inp) in [cols, cfg.noise_channels].into_iter().enumerate() {
        p.push((
            format!("noise.spec.conv{i}"),
            LayerSpec::Conv1d {
                cin: inp,
                cout: cfg.noise_channels,
                width: cfg.noise_width,
                stride: 1,
            },
        ));
    }
    p.push((
        "noise.spec.out".into(),
        LayerSpec::Dense {
            inp: cfg.noise_channels,
            out: cfg.k_out,
            zero_init: false,
        },
    ));
    p.push((
        "noise.alpha.conv".into(),
        LayerSpec::Conv1d {
            cin: cols,
            cout: cfg.alpha_channels,
            width: cfg.alpha_width,
            stride: 1,
        },
    ));
    p.push((
        "noise.alpha.out".into(),
        LayerSpec::Dense {
            inp: cfg.alpha_channels,
            out: 1,
            zero_init: false,
        },
    ));

    p.push((
        "reverb.gru".into(),
        LayerSpec::BiGru {
            inp: cols,
            hidden: cfg.reverb_gru_hidden,
        },
    ));
    p.push((
        "reverb.conv".into(),
        LayerSpec::Conv1d {
            cin: 2 * cfg.reverb_gru_hidden,
            cout: cfg.reverb_channels,
            width: cfg.reverb_width,
            stride: 1,
        },
    ));
    p.push((
        "reverb.out".into(),
        LayerSpec::Dense {
            inp: cfg.reverb_channels,
            out: cfg.rir_len,
            zero_init: false,
        },
    ));

    p.push((
        "post.gru".into(),
        LayerSpec::BiGru {
            inp: cfg.k_out + token,
            hidden: cfg.post_gru_hidden,
        },
    ));
    p.push((
        "post.mid".into(),
        LayerSpec::Dense {
            inp: 2 * cfg.post_gru_hidden,
            out: cfg.k_out,
            zero_init: false,
        },
    ));
    for (i, inp) in [cfg.k_out, cfg.post_channels].into_iter().enumerate() {
        p.push((
            format!("post.conv{i}"),
            LayerSpec::Conv1d {
                cin: inp,
                cout: cfg.post_channels,
                width: cfg.post_width,
                stride: 1,
            },
        ));
    }
    // Zero-initialized residual head: the refinement stage starts as the
    // identity on its spectrogram input.
    p.push((
        "post.out".into(),
        LayerSpec::Dense {
            inp: cfg.post_channels,
            out: cfg.k_out,
            zero_init: true,
        },
    ));
    p
}

fn names_for(prefix: &str, spec: &LayerSpec) -> Vec<String> {
    match spec {
        LayerSpec::Dense { .. } | LayerSpec::Conv1d { .. } | LayerSpec::Conv2d { .. } => {
            vec![format!("{prefix}.w"), format!("{prefix}.b")]
        }
        LayerSpec::BiGru { .. } => ["fwd", "bwd"]
            .iter()
            .flat_map(|dir| {
                ["w_ih", "w_hh", "b_ih", "b_hh"]
                    .iter()
                    .map(move |t| format!("{prefix}.{dir}.{t}"))
            })
            .collect(),
        LayerSpec::Gru { .. } => ["w_ih", "w_hh", "b_ih", "b_hh"]
            .iter()
            .map(|t| format!("{prefix}.{t}"))
            .collect(),
        LayerSpec::MhaTemplates { .. } => {
            let mut n = vec![format!("{prefix}.templates")];
            for t in ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"] {
                n.push(format!("{prefix}.{t}"));
            }
            n
        }
        _ => Vec::new(),
    }
}

impl<T: Scalar> DnrAsp<T> {
    /// Fresh parameters drawn from a seeded generator in a fixed order.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (prefix, spec) in plan(&cfg) {
            init_layer(&mut params, &mut rng, &prefix, &spec)?;
        }
        Ok(Self { cfg, params })
    }

    /// Wrap existing parameters (e.g. loaded from a checkpoint), verifying
    /// that they name exactly the tensors this configuration requires.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let names = Self::param_names(&cfg);
        params.validate_names(names.iter().map(|s| s.as_str()))?;
        for (prefix, spec) in plan(&cfg) {
            for name in names_for(&prefix, &spec) {
                let got = params.get(&name)?;
                let want = expected_shape(&spec, &name);
                if got.shape() != want.as_slice() {
                    return Err(Error::shape(
                        name,
                        format!("stored {:?}, configuration needs {:?}", got.shape(), want),
                    ));
                }
            }
        }
        Ok(Self { cfg, params })
    }

    /// Every parameter tensor name of this configuration, in layer order.
    pub fn param_names(cfg: &ModelConfig) -> Vec<String> {
        plan(cfg)
            .iter()
            .flat_map(|(prefix, spec)| names_for(prefix, spec))
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Checkpoint path for the plain-text configuration sidecar.
    pub fn sidecar_path(weights: &std::path::Path) -> std::path::PathBuf {
        weights.with_extension("config.txt")
    }

    /// Atomically write weights (as float32) plus the configuration
    /// sidecar: both land under their final names only when complete.
    pub fn save(&self, weights: &std::path::Path) -> Result<()> {
        let tmp = weights.with_extension("dnrw.tmp");
        crate::nn::save_params(&self.params.cast::<f32>(), &tmp)?;
        std::fs::rename(&tmp, weights).map_err(|e| Error::io(weights, e))?;
        let side = Self::sidecar_path(weights);
        let side_tmp = side.with_extension("txt.tmp");
        std::fs::write(&side_tmp, self.cfg.to_kv_text()).map_err(|e| Error::io(&side_tmp, e))?;
        std::fs::rename(&side_tmp, &side).map_err(|e| Error::io(side, e))?;
        Ok(())
    }

    /// Load a checkpoint written by [`Self::save`], checking the stored
    /// tensors against the sidecar configuration.
    pub fn load(weights: &std::path::Path) -> Result<Self> {
        let side = Self::sidecar_path(weights);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(side, e))?;
        let cfg = ModelConfig::from_kv_text(&text)?;
        let params = crate::nn::load_params(weights)?.cast::<T>();
        Self::from_params(cfg, params)
    }

    /// Inference-only forward pass: runs the graph with frozen parameters
    /// and repackages every stage output. `stft` stamps the returned
    /// spectrograms with their analysis geometry.
    pub fn forward(
        &self,
        features: &AcousticFeatures<T>,
        mel_for_token: &[T],
        stft: &StftConfig,
    ) -> Result<ForwardPass<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let vars = forward_on_tape(&mut tape, &bound, &self.cfg, features, mel_for_token)?;
        let n = features.frames;
        let k = self.cfg.k_out;
        let las = |tape: &Tape<T>, v: Var| -> Result<Las<T>> {
            Las::from_values(tape.value(v).data().to_vec(), n, k, *stft)
        };
        Ok(ForwardPass {
            token: tape.value(vars.token).data().to_vec(),
            l_nr: las(&tape, vars.l_nr)?,
            noise: NoiseEstimate::new(
                las(&tape, vars.l_ne)?,
                tape.value(vars.alpha).data()[0],
            )?,
            r_hat: Rir::from_taps(tape.value(vars.r_hat).data(), stft.sample_rate)?,
            l_tilde: las(&tape, vars.l_tilde)?,
            l_hat: las(&tape, vars.l_hat)?,
        })
    }
}

fn expected_shape(spec: &LayerSpec, name: &str) -> Vec<usize> {
    let is = |suffix: &str| name.ends_with(suffix);
    match *spec {
        LayerSpec::Dense { inp, out, .. } => {
            if is(".w") {
                vec![out, inp]
            } else {
                vec![1, out]
            }
        }
        LayerSpec::Conv1d { cin, cout, width, .. } => {
            if is(".w") {
                vec![cout, cin, width]
            } else {
                vec![1, cout]
            }
        }
        LayerSpec::Conv2d { cin, cout, kh, kw, .. } => {
            if is(".w") {
                vec![cout, cin, kh, kw]
            } else {
                vec![1, cout]
            }
        }
        LayerSpec::Gru { inp, hidden } | LayerSpec::BiGru { inp, hidden } => {
            if is(".w_ih") {
                vec![3 * hidden, inp]
            } else if is(".w_hh") {
                vec![3 * hidden, hidden]
            } else {
                vec![1, 3 * hidden]
            }
        }
        LayerSpec::MhaTemplates { dim, templates, .. } => {
            if is(".templates") {
                vec![templates, dim]
            } else if name.ends_with('q') || name.ends_with('k') || name.ends_with('v') || name.ends_with('o') {
                let tag = &name[name.len() - 2..];
                if tag.starts_with('w') {
                    vec![dim, dim]
                } else {
                    vec![1, dim]
                }
            } else {
                vec![]
            }
        }
        _ => vec![],
    }
}

fn scoped<T: Scalar, R>(
    tape: &mut Tape<T>,
    name: &str,
    f: impl FnOnce(&mut Tape<T>) -> Result<R>,
) -> Result<R> {
    tape.push_scope(name);
    let r = f(tape);
    tape.pop_scope();
    r
}

/// Full differentiable forward pass. `mel_for_token` feeds the token
/// encoder and may be framed independently of `features` (it is pooled
/// away); it must tile the configured mel width.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    features: &AcousticFeatures<T>,
    mel_for_token: &[T],
) -> Result<ForwardVars> {
    if features.n_mels != cfg.n_mels {
        return Err(Error::shape(
            "forward",
            format!("{} mel bands, configured {}", features.n_mels, cfg.n_mels),
        ));
    }
    let n = features.frames;
    if n == 0 {
        return Err(Error::shape("forward", "no frames"));
    }
    if mel_for_token.is_empty() || mel_for_token.len() % cfg.n_mels != 0 {
        return Err(Error::shape(
            "forward",
            format!(
                "{} token-path mel values do not tile {} bands",
                mel_for_token.len(),
                cfg.n_mels
            ),
        ));
    }
    let nt = mel_for_token.len() / cfg.n_mels;
    let mel_tok = tape.constant(Tensor::from_vec(&[nt, cfg.n_mels], mel_for_token.to_vec())?);

    let token = scoped(tape, "enc", |t| {
        let g = bigru(t, params, "enc.gru", mel_tok)?;
        let w0 = 2 * cfg.enc_gru_hidden;
        let mut h = t.reshape(g, &[1, nt, w0])?;
        for i in 0..cfg.enc_channels.len() {
            let w = params.var(&format!("enc.conv{i}.w"))?;
            let b = params.var(&format!("enc.conv{i}.b"))?;
            h = t.conv2d(h, w, b, (1, cfg.enc_freq_strides[i]))?;
            h = t.relu(h)?;
        }
        // [c, nt, 1] -> frame-major sequence -> pooled query.
        let c = cfg.token_dim();
        let flat = t.reshape(h, &[c, nt])?;
        let seq = t.transpose(flat)?;
        let q = t.mean_rows(seq)?;
        Ok(mha_over_templates(t, params, "enc.attn", q, cfg.heads)?.0)
    })?;

    let mel = tape.constant(Tensor::from_vec(&[n, cfg.n_mels], features.mel.clone())?);
    let f0 = tape.constant(Tensor::from_vec(&[n, 1], features.f0.clone())?);
    let vuv = tape.constant(Tensor::from_vec(&[n, 1], features.vuv.clone())?);
    let tok_rows = tape.repeat_rows(token, n)?;
    let base = tape.concat_cols(&[mel, f0, vuv, tok_rows])?;

    let l_nr = scoped(tape, "converter", |t| {
        let mut h = base;
        for i in 0..2 {
            let w = params.var(&format!("converter.conv{i}.w"))?;
            let b = params.var(&format!("converter.conv{i}.b"))?;
            h = t.conv1d(h, w, b, cfg.converter_width, 1)?;
            h = t.relu(h)?;
        }
        dense(t, params, "converter.out", h)
    })?;

    let (l_ne, alpha) = scoped(tape, "noise", |t| {
        let mut h = base;
        for i in 0..2 {
            let w = params.var(&format!("noise.spec.conv{i}.w"))?;
            let b = params.var(&format!("noise.spec.conv{i}.b"))?;
            h = t.conv1d(h, w, b, cfg.noise_width, 1)?;
            h = t.relu(h)?;
        }
        let l_ne = dense(t, params, "noise.spec.out", h)?;

        let w = params.var("noise.alpha.conv.w")?;
        let b = params.var("noise.alpha.conv.b")?;
        let a = t.conv1d(base, w, b, cfg.alpha_width, 1)?;
        let a = t.relu(a)?;
        let a = dense(t, params, "noise.alpha.out", a)?;
        let pooled = t.mean_rows(a)?;
        Ok((l_ne, t.softplus(pooled)?))
    })?;

    let r_hat = scoped(tape, "reverb", |t| {
        let g = bigru(t, params, "reverb.gru", base)?;
        let w = params.var("reverb.conv.w")?;
        let b = params.var("reverb.conv.b")?;
        let h = t.conv1d(g, w, b, cfg.reverb_width, 1)?;
        let h = t.relu(h)?;
        let per_frame = dense(t, params, "reverb.out", h)?;
        let pooled = t.mean_rows(per_frame)?;
        t.reshape(pooled, &[cfg.rir_len])
    })?;

    let l_tilde = scoped(tape, "inverse", |t| {
        initial_inverse_on_tape(t, l_nr, l_ne, alpha, r_hat, cfg.k_out)
    })?;

    let l_hat = scoped(tape, "post", |t| {
        let pin = t.concat_cols(&[l_tilde, tok_rows])?;
        let g = bigru(t, params, "post.gru", pin)?;
        let mut h = dense(t, params, "post.mid", g)?;
        for i in 0..2 {
            let w = params.var(&format!("post.conv{i}.w"))?;
            let b = params.var(&format!("post.conv{i}.b"))?;
            h = t.conv1d(h, w, b, cfg.post_width, 1)?;
            h = t.relu(h)?;
        }
        let res = dense(t, params, "post.out", h)?;
        t.add(l_tilde, res)
    })?;

    Ok(ForwardVars {
        token,
        l_nr,
        l_ne,
        alpha,
        r_hat,
        l_tilde,
        l_hat,
    })
}

/// Differentiable inverse of the degradation model, composed in the log
/// domain so that a unit-impulse response and a zero noise weight leave the
/// input spectrogram bitwise unchanged:
///
/// `out = d + ln(max(1 - alpha*exp(l_ne - d), amp_floor*exp(-d)))` with
/// `d = l_nr - ln(max(|FFT(r_hat)|, peak*ratio))`, algebraically equal to
/// `ln(max(exp(l_nr)/R - alpha*exp(l_ne), amp_floor))`.
///
/// Exponent arguments are clamped just under the scalar type's overflow
/// threshold; the clamps are inactive for any plausible spectra.
pub fn initial_inverse_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    l_nr: Var,
    l_ne: Var,
    alpha: Var,
    r_hat: Var,
    k_out: usize,
) -> Result<Var> {
    let rir_len = tape.value(r_hat).numel();
    if tape.value(r_hat).rank() != 1 || !rir_len.is_power_of_two() {
        return Err(Error::shape(
            "initial inverse",
            format!(
                "impulse response must be rank 1 with power-of-two length, found {:?}",
                tape.value(r_hat).shape()
            ),
        ));
    }
    let bins = rir_len / 2 + 1;
    if k_out > bins {
        return Err(Error::shape(
            "initial inverse",
            format!("{k_out} bins requested from a {bins}-bin response spectrum"),
        ));
    }
    let exp_cap = T::max_value().ln().as_f64().floor() - 2.0;

    // Response magnitudes floored at a fixed fraction of their own peak.
    // The tiny transform floor only guards exactly-zero bins; those pass no
    // gradient, which is correct since the relative floor wins there anyway.
    let row = tape.reshape(r_hat, &[1, rir_len])?;
    let mags = tape.rfft_mag(row, rir_len, 1e-300)?;
    let peak = tape.max_all(mags)?;
    let floor = tape.affine(peak, R_MAG_FLOOR_RATIO, 0.0)?;
    let ones = tape.constant(Tensor::filled(&[1, bins], T::one()));
    let floor_row = tape.mul_scalar(ones, floor)?;
    let floored = tape.maximum(mags, floor_row)?;
    let kept = tape.slice_cols(floored, 0, k_out)?;
    let ln_r = tape.ln(kept)?;

    // d = dereverberated spectrum, still in the log domain.
    let neg_ln_r = tape.affine(ln_r, -1.0, 0.0)?;
    let d = tape.add_row(l_nr, neg_ln_r)?;

    // 1 - alpha * exp(l_ne - d): the noise-subtraction ratio.
    let diff = tape.sub(l_ne, d)?;
    let neg = tape.affine(diff, -1.0, 0.0)?;
    let capped = tape.clamp_min(neg, -exp_cap)?;
    let sat = tape.affine(capped, -1.0, 0.0)?;
    let ratio = tape.exp(sat)?;
    let scaled = tape.mul_scalar(ratio, alpha)?;
    let factor = tape.affine(scaled, -1.0, 1.0)?;

    // The absolute amplitude floor expressed in ratio units.
    let shifted = tape.affine(d, -1.0, AMP_FLOOR.ln())?;
    let shifted = tape.clamp_min(shifted, -exp_cap)?;
    let floor_ratio = tape.exp(shifted)?;

    let kept_factor = tape.maximum(factor, floor_ratio)?;
    let ln_factor = tape.ln(kept_factor)?;
    tape.add(d, ln_factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn test_stft() -> StftConfig {
        StftConfig::base(24_000)
    }

    fn fixture_features(n: usize, seed: u64) -> AcousticFeatures<f64> {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mel: Vec<f64> = (0..n * 80).map(|_| rng.random_range(-12.0..2.0)).collect();
        let mut f0 = Vec::with_capacity(n);
        let mut vuv = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.random_bool(0.6) {
                f0.push(rng.random_range(80.0..300.0));
                vuv.push(1.0);
            } else {
                f0.push(0.0);
                vuv.push(0.0);
            }
        }
        AcousticFeatures::new(mel, 80, f0, vuv).unwrap()
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let cfg = ModelConfig::desk().with_bins(341);
        let model = DnrAsp::<f64>::init(cfg, 7).unwrap();
        let feats = fixture_features(9, 1);
        let out = model.forward(&feats, &feats.mel, &test_stft()).unwrap();
        assert_eq!(out.token.len(), 32);
        for las in [&out.l_nr, &out.noise.noise_las, &out.l_tilde, &out.l_hat] {
            assert_eq!((las.frames(), las.bins()), (9, 341));
            assert!(las.values().iter().all(|v| v.is_finite()));
        }
        assert!(out.noise.alpha >= 0.0 && out.noise.alpha.is_finite());
        assert_eq!(out.r_hat.taps().len(), 2048);
        assert!(out.token.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn refinement_stage_is_identity_at_init() {
        let cfg = ModelConfig::desk().with_bins(341);
        let model = DnrAsp::<f64>::init(cfg, 11).unwrap();
        let feats = fixture_features(6, 2);
        let out = model.forward(&feats, &feats.mel, &test_stft()).unwrap();
        for (a, b) in out.l_hat.values().iter().zip(out.l_tilde.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// With the noise weight forced to zero and the impulse-response head
    /// forced to a unit impulse, the closed-form inverse must return the
    /// converter output bitwise: division by an all-ones spectrum and
    /// subtraction of a zero noise term are exact in the log domain.
    #[test]
    fn inverse_is_exact_identity_at_impulse_and_zero_weight() {
        let cfg = ModelConfig::desk().with_bins(341);
        let mut model = DnrAsp::<f64>::init(cfg.clone(), 13).unwrap();
        {
            let p = model.params_mut();
            p.get_mut("noise.alpha.out.w").unwrap().data_mut().fill(0.0);
            p.get_mut("noise.alpha.out.b").unwrap().data_mut()[0] = -1e4;
            p.get_mut("reverb.out.w").unwrap().data_mut().fill(0.0);
            let b = p.get_mut("reverb.out.b").unwrap().data_mut();
            b.fill(0.0);
            b[0] = 1.0;
        }
        let feats = fixture_features(7, 3);
        let out = model.forward(&feats, &feats.mel, &test_stft()).unwrap();
        assert_eq!(out.noise.alpha, 0.0);
        let mut impulse = vec![0.0; 2048];
        impulse[0] = 1.0;
        assert_eq!(out.r_hat.taps(), &impulse[..]);
        assert_eq!(out.l_tilde.values().len(), out.l_nr.values().len());
        for (i, (a, b)) in out
            .l_tilde
            .values()
            .iter()
            .zip(out.l_nr.values())
            .enumerate()
        {
            assert_eq!(a.to_bits(), b.to_bits(), "bin {i}: {a} vs {b}");
        }
    }

    /// The inverse agrees with the saturating reference implementation on
    /// random inputs (same algebra, different rounding order).
    #[test]
    fn inverse_matches_reference_operation() {
        use crate::enhance::{initial_denoise_dereverb, rir_magnitude, NoiseEstimate};
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, k) = (4usize, 1025usize);
        let stft = test_stft();
        let l_nr: Vec<f64> = (0..n * k).map(|_| rng.random_range(-8.0..3.0)).collect();
        let l_ne: Vec<f64> = (0..n * k).map(|_| rng.random_range(-8.0..3.0)).collect();
        let alpha = 0.37;
        let rir_wave = synth::room_impulse_response::<f64>(24_000, 2048, 0.3, 19).unwrap();
        let rir = Rir::from_taps(rir_wave.samples(), 24_000).unwrap();

        let mut tape = Tape::<f64>::new();
        let l_nr_v = tape.constant(Tensor::from_vec(&[n, k], l_nr.clone()).unwrap());
        let l_ne_v = tape.constant(Tensor::from_vec(&[n, k], l_ne.clone()).unwrap());
        let a_v = tape.constant(Tensor::filled(&[1, 1], alpha));
        let r_v = tape.constant(Tensor::from_vec(&[2048], rir.taps().to_vec()).unwrap());
        let got = initial_inverse_on_tape(&mut tape, l_nr_v, l_ne_v, a_v, r_v, k).unwrap();

        let reference = initial_denoise_dereverb(
            &Las::from_values(l_nr, n, k, stft).unwrap(),
            &rir_magnitude(&rir).unwrap(),
            &NoiseEstimate::new(Las::from_values(l_ne, n, k, stft).unwrap(), alpha).unwrap(),
        )
        .unwrap();
        for (g, r) in tape.value(got).data().iter().zip(reference.values()) {
            assert!((g - r).abs() < 1e-9, "{g} vs {r}");
        }
    }

    /// In the frame-wise configuration with neutralized recurrences,
    /// duplicating every input frame leaves the pooled outputs (noise
    /// weight, impulse response, token) unchanged up to the update-gate
    /// leak, far below 1e-6.
    #[test]
    fn pooled_outputs_invariant_to_frame_duplication() {
        let cfg = ModelConfig::desk().with_bins(341).pointwise_time();
        let mut model = DnrAsp::<f64>::init(cfg, 23).unwrap();
        for gru in ["enc.gru", "reverb.gru", "post.gru"] {
            for dir in ["fwd", "bwd"] {
                let p = model.params_mut();
                p.get_mut(&format!("{gru}.{dir}.w_hh")).unwrap().data_mut().fill(0.0);
                p.get_mut(&format!("{gru}.{dir}.b_hh")).unwrap().data_mut().fill(0.0);
                let b = p.get_mut(&format!("{gru}.{dir}.b_ih")).unwrap();
                let h = b.shape()[1] / 3;
                b.data_mut()[h..2 * h].fill(-50.0);
                let w = p.get_mut(&format!("{gru}.{dir}.w_ih")).unwrap();
                let (_, inp) = (w.shape()[0], w.shape()[1]);
                w.data_mut()[h * inp..2 * h * inp].fill(0.0);
            }
        }
        let feats = fixture_features(5, 4);
        let mut mel2 = Vec::new();
        let mut f02 = Vec::new();
        let mut vuv2 = Vec::new();
        for i in 0..feats.frames {
            for _ in 0..2 {
                mel2.extend_from_slice(feats.mel_row(i));
                f02.push(feats.f0[i]);
                vuv2.push(feats.vuv[i]);
            }
        }
        let doubled = AcousticFeatures::new(mel2, 80, f02, vuv2).unwrap();

        let stft = test_stft();
        let once = model.forward(&feats, &feats.mel, &stft).unwrap();
        let twice = model.forward(&doubled, &doubled.mel, &stft).unwrap();

        let da = (once.noise.alpha - twice.noise.alpha).abs();
        assert!(da < 1e-6, "noise weight drifted by {da}");
        for (a, b) in once.r_hat.taps().iter().zip(twice.r_hat.taps()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in once.token.iter().zip(&twice.token) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_mismatched_features_and_checkpoints() {
        let cfg = ModelConfig::desk().with_bins(341);
        let model = DnrAsp::<f64>::init(cfg.clone(), 5).unwrap();
        let bad = AcousticFeatures::new(vec![0.0; 40], 40, vec![0.0], vec![0.0]).unwrap();
        let err = model.forward(&bad, &bad.mel, &test_stft()).unwrap_err();
        assert!(err.to_string().contains("mel bands"), "{err}");

        // A store missing one tensor is rejected by name.
        let mut params = model.params().clone();
        let mut pruned = ParamStore::new();
        let victim = "post.out.w";
        for (name, t) in params.iter() {
            if name != victim {
                pruned.insert(name.clone(), t.clone()).unwrap();
            }
        }
        let err = DnrAsp::from_params(cfg.clone(), pruned).unwrap_err();
        assert!(err.to_string().contains(victim), "{err}");

        // A tensor with the right name but wrong shape is rejected too.
        *params.get_mut(victim).unwrap() = Tensor::zeros(&[3, 3]);
        let err = DnrAsp::from_params(cfg, params).unwrap_err();
        assert!(err.to_string().contains(victim), "{err}");
    }

    #[test]
    fn seeded_init_is_reproducible_and_named_completely() {
        let cfg = ModelConfig::desk();
        let a = DnrAsp::<f64>::init(cfg.clone(), 99).unwrap();
        let b = DnrAsp::<f64>::init(cfg.clone(), 99).unwrap();
        for (name, t) in a.params().iter() {
            let u = b.params().get(name).unwrap();
            assert_eq!(t.data(), u.data(), "{name}");
        }
        let names = DnrAsp::<f64>::param_names(&cfg);
        assert_eq!(names.len(), a.params().len());
        for n in &names {
            assert!(a.params().contains(n), "{n} missing");
        }
    }
}
