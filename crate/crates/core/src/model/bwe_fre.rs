use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{accumulate, las_tensor};
use crate::enhance::{band_split, fre_upsample_reference, BandLayout};
use crate::losses::{
    mse_on_tape, wgan_g_loss_on_tape, wgan_gp_d_loss_on_tape, LossWeights, SpectralCritic,
};
use crate::nn::{
    adam_step, bigru, dense, init_layer, AdamConfig, AdamState, BoundParams, CriticAxis,
    CriticSpec, LayerSpec, ParamStore, Tape, Var,
};
use crate::signal::{Las, StftConfig, Waveform};
use crate::{Error, Result, Scalar};

/// Shape of one spectrum-to-spectrum network: two bidirectional recurrent
/// layers, two time convolutions, and a linear output head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapperConfig {
    pub in_bins: usize,
    pub out_bins: usize,
    /// Per-direction recurrent width.
    pub gru_hidden: usize,
    pub channels: usize,
    pub width: usize,
    /// Start at the linear-interpolation baseline: zero-initialized output
    /// head plus an interpolated skip of the input (resolution extension).
    pub residual_upsample: bool,
}

impl MapperConfig {
    /// Band extension, desk widths: lowest 341 bins to the 685 high bins.
    pub fn bwe_desk() -> Self {
        Self {
            in_bins: 341,
            out_bins: 685,
            gru_hidden: 64,
            channels: 256,
            width: 9,
            residual_upsample: false,
        }
    }

    pub fn bwe_paper() -> Self {
        Self {
            gru_hidden: 512,
            channels: 2048,
            ..Self::bwe_desk()
        }
    }

    /// Resolution extension, desk widths: 1025 bins to 4097.
    pub fn fre_desk() -> Self {
        Self {
            in_bins: 1025,
            out_bins: 4097,
            gru_hidden: 64,
            channels: 256,
            width: 9,
            residual_upsample: true,
        }
    }

    pub fn fre_paper() -> Self {
        Self {
            gru_hidden: 512,
            channels: 2048,
            ..Self::fre_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_bins", self.in_bins),
            ("out_bins", self.out_bins),
            ("gru_hidden", self.gru_hidden),
            ("channels", self.channels),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn plan(&self) -> Vec<(String, LayerSpec)> {
        vec![
            (
                "gru0".into(),
                LayerSpec::BiGru {
                    inp: self.in_bins,
                    hidden: self.gru_hidden,
                },
            ),
            (
                "gru1".into(),
                LayerSpec::BiGru {
                    inp: 2 * self.gru_hidden,
                    hidden: self.gru_hidden,
                },
            ),
            (
                "conv0".into(),
                LayerSpec::Conv1d {
                    cin: 2 * self.gru_hidden,
                    cout: self.channels,
                    width: self.width,
                    stride: 1,
                },
            ),
            (
                "conv1".into(),
                LayerSpec::Conv1d {
                    cin: self.channels,
                    cout: self.channels,
                    width: self.width,
                    stride: 1,
                },
            ),
            (
                "out".into(),
                LayerSpec::Dense {
                    inp: self.channels,
                    out: self.out_bins,
                    zero_init: self.residual_upsample,
                },
            ),
        ]
    }
}

/// One spectral mapping network (band extension or resolution extension).
#[derive(Debug, Clone)]
pub struct SpectrumMapper<T> {
    cfg: MapperConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> SpectrumMapper<T> {
    pub fn init(cfg: MapperConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (prefix, spec) in cfg.plan() {
            init_layer(&mut params, &mut rng, &prefix, &spec)?;
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Differentiable forward pass. When the configuration carries the
    /// interpolated skip, `residual` must hold it (shape `[n, out_bins]`).
    pub fn forward_on_tape(
        tape: &mut Tape<T>,
        params: &BoundParams,
        cfg: &MapperConfig,
        x: Var,
        residual: Option<Var>,
    ) -> Result<Var> {
        let (_, cols) = tape.value(x).dims2()?;
        if cols != cfg.in_bins {
            return Err(Error::shape(
                "spectrum mapper",
                format!("{cols} input bins, configured {}", cfg.in_bins),
            ));
        }
        let mut h = bigru(tape, params, "gru0", x)?;
        h = bigru(tape, params, "gru1", h)?;
        for i in 0..2 {
            let w = params.var(&format!("conv{i}.w"))?;
            let b = params.var(&format!("conv{i}.b"))?;
            h = tape.conv1d(h, w, b, cfg.width, 1)?;
            h = tape.relu(h)?;
        }
        let y = dense(tape, params, "out", h)?;
        match (cfg.residual_upsample, residual) {
            (true, Some(r)) => tape.add(y, r),
            (true, None) => Err(Error::shape(
                "spectrum mapper",
                "configuration carries an interpolated skip but none was supplied",
            )),
            (false, Some(_)) => Err(Error::shape(
                "spectrum mapper",
                "interpolated skip supplied to a configuration without one",
            )),
            (false, None) => Ok(y),
        }
    }

    /// Inference: map a spectrogram, stamping the result with `out_config`
    /// (the analysis geometry the output bins correspond to).
    pub fn forward(&self, las: &Las<T>, out_config: StftConfig) -> Result<Las<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(las_tensor(las)?);
        let residual = if self.cfg.residual_upsample {
            let layout = BandLayout {
                k_nb: 0,
                k_full: self.cfg.in_bins,
                k_fine: self.cfg.out_bins,
            };
            let reference = fre_upsample_reference(las, &layout)?;
            Some(tape.constant(las_tensor(&reference)?))
        } else {
            None
        };
        let y = Self::forward_on_tape(&mut tape, &bound, &self.cfg, x, residual)?;
        Las::from_values(
            tape.value(y).data().to_vec(),
            las.frames(),
            self.cfg.out_bins,
            out_config,
        )
    }
}

/// The two spectral extension stages, trained together.
#[derive(Debug, Clone)]
pub struct BweFreModels<T> {
    pub bwe: SpectrumMapper<T>,
    pub fre: SpectrumMapper<T>,
}

impl<T: Scalar> BweFreModels<T> {
    pub fn init_desk(seed: u64) -> Result<Self> {
        Ok(Self {
            bwe: SpectrumMapper::init(MapperConfig::bwe_desk(), seed)?,
            fre: SpectrumMapper::init(MapperConfig::fre_desk(), seed ^ 0x5157_4d21)?,
        })
    }
}

/// One band-extension training pair: narrow-band input and high-band target.
#[derive(Debug, Clone)]
pub struct BwePair<T> {
    pub narrow: Las<T>,
    pub high: Las<T>,
}

/// One resolution-extension training pair: full-band input and fine target.
#[derive(Debug, Clone)]
pub struct FrePair<T> {
    pub full: Las<T>,
    pub fine: Las<T>,
}

/// Build both training pairs from one clean waveform: band targets from
/// the standard analysis, the fine target from the 8192-point analysis on
/// the same frame grid.
pub fn ext_pairs_from_clean<T: Scalar>(
    clean: &Waveform<T>,
    stft: &StftConfig,
) -> Result<(BwePair<T>, FrePair<T>)> {
    let layout = BandLayout::base();
    let full = super::features::las_target(clean, stft, layout.k_full)?;
    let (narrow, high) = band_split(&full, &layout)?;
    let fine_cfg = StftConfig::fine(stft.sample_rate);
    let fine = super::features::las_target(clean, &fine_cfg, layout.k_fine)?;
    Ok((BwePair { narrow, high }, FrePair { full, fine }))
}

/// Schedule for the extension stages: band extension runs a mean-squared
/// phase then an adversarial phase; resolution extension is mean-squared
/// only.
#[derive(Debug, Clone)]
pub struct ExtTrainConfig {
    pub bwe_mse_epochs: usize,
    pub bwe_adv_epochs: usize,
    pub fre_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub gp_gamma: f64,
    pub seed: u64,
}

impl Default for ExtTrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            bwe_mse_epochs: 30,
            bwe_adv_epochs: 5,
            fre_epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            lambda_c: w.lambda_c,
            gp_gamma: w.gp_gamma,
            seed: 0,
        }
    }
}

impl ExtTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.lambda_c.is_finite() && self.lambda_c >= 0.0) {
            return Err(Error::config("lambda_c must be nonnegative"));
        }
        if !(self.gp_gamma.is_finite() && self.gp_gamma >= 0.0) {
            return Err(Error::config("gp_gamma must be nonnegative"));
        }
        Ok(())
    }
}

/// One extension-training optimizer step's losses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExtLossRow {
    pub step: u64,
    /// "bwe_mse", "bwe_adv", or "fre".
    pub phase: &'static str,
    pub mse: f64,
    pub d_time: f64,
    pub d_freq: f64,
    pub g_adv: f64,
}

impl ExtLossRow {
    pub const CSV_HEADER: &'static str = "step,phase,mse,d_time,d_freq,g_adv";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.phase, self.mse, self.d_time, self.d_freq, self.g_adv
        )
    }
}

fn mse_batch_step<T: Scalar>(
    mapper: &mut SpectrumMapper<T>,
    batch: &[(Var, Var, Var)],
    tape: &mut Tape<T>,
    bound: &BoundParams,
    opt: &mut AdamState<T>,
    adam: &AdamConfig,
) -> Result<f64> {
    // batch entries: (input, residual-or-input, target); residual unused
    // when the configuration has no skip.
    let inv = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    let mut logged = 0.0;
    for &(x, residual, target) in batch {
        let res = mapper.cfg.residual_upsample.then_some(residual);
        let y = SpectrumMapper::forward_on_tape(tape, bound, &mapper.cfg, x, res)?;
        let l = mse_on_tape(tape, target, y)?;
        logged += tape.value(l).data()[0].as_f64() * inv;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let mean = tape.affine(total.expect("nonempty batch"), inv, 0.0)?;
    let grads = tape.backward(mean)?;
    let mut acc = BTreeMap::new();
    accumulate(&mut acc, bound, &grads, 1.0, |_| true);
    adam_step(&mut mapper.params, &acc, opt, adam)?;
    Ok(logged)
}

/// Train both extension stages. Band extension first minimizes the
/// high-band MSE, then alternates critic and generator updates under the
/// gradient-penalty objective; resolution extension minimizes MSE against
/// the fine spectrogram only. Returns the per-step loss log.
pub fn train_bwe_fre<T: Scalar>(
    models: &mut BweFreModels<T>,
    bwe_data: &[BwePair<T>],
    fre_data: &[FrePair<T>],
    cfg: &ExtTrainConfig,
) -> Result<Vec<ExtLossRow>> {
    cfg.validate()?;
    if bwe_data.is_empty() || fre_data.is_empty() {
        return Err(Error::config("extension training needs data for both stages"));
    }
    for p in bwe_data {
        if p.narrow.bins() != models.bwe.cfg.in_bins || p.high.bins() != models.bwe.cfg.out_bins {
            return Err(Error::shape(
                "band extension data",
                format!(
                    "{}->{} bins, model maps {}->{}",
                    p.narrow.bins(),
                    p.high.bins(),
                    models.bwe.cfg.in_bins,
                    models.bwe.cfg.out_bins
                ),
            ));
        }
    }
    for p in fre_data {
        if p.full.bins() != models.fre.cfg.in_bins || p.fine.bins() != models.fre.cfg.out_bins {
            return Err(Error::shape(
                "resolution extension data",
                format!(
                    "{}->{} bins, model maps {}->{}",
                    p.full.bins(),
                    p.fine.bins(),
                    models.fre.cfg.in_bins,
                    models.fre.cfg.out_bins
                ),
            ));
        }
    }

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut step = 0u64;

    // Band extension, mean-squared phase.
    let mut opt_bwe = AdamState::new();
    for _ in 0..cfg.bwe_mse_epochs {
        for batch in bwe_data.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = models.bwe.params.bind(&mut tape, |_| true);
            let vars: Vec<(Var, Var, Var)> = batch
                .iter()
                .map(|p| -> Result<_> {
                    let x = tape.constant(las_tensor(&p.narrow)?);
                    let t = tape.constant(las_tensor(&p.high)?);
                    Ok((x, x, t))
                })
                .collect::<Result<_>>()?;
            let mse = mse_batch_step(&mut models.bwe, &vars, &mut tape, &bound, &mut opt_bwe, &adam)?;
            step += 1;
            rows.push(ExtLossRow {
                step,
                phase: "bwe_mse",
                mse,
                ..ExtLossRow::default()
            });
        }
    }

    // Band extension, adversarial phase: per batch one critic update on
    // (natural high band, predicted high band), then one generator update
    // on the summed critic score plus the weighted MSE.
    let k_high = models.bwe.cfg.out_bins;
    let critic_time = CriticSpec::new("bwe_critic_time", CriticAxis::Time, k_high);
    let critic_freq = CriticSpec::new("bwe_critic_freq", CriticAxis::Freq, k_high);
    let mut critic_params = ParamStore::new();
    critic_time.init(&mut critic_params, &mut rng)?;
    critic_freq.init(&mut critic_params, &mut rng)?;
    let mut opt_critic = AdamState::new();
    for _ in 0..cfg.bwe_adv_epochs {
        for batch in bwe_data.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;

            let (mut dt, mut df) = (0.0, 0.0);
            let mut acc = BTreeMap::new();
            for p in batch {
                let e_time = T::of(rng.random::<f64>());
                let e_freq = T::of(rng.random::<f64>());
                let mut tape = Tape::new();
                let gen_bound = models.bwe.params.bind(&mut tape, |_| false);
                let crit_bound = critic_params.bind(&mut tape, |_| true);
                let x = tape.constant(las_tensor(&p.narrow)?);
                let fake = SpectrumMapper::forward_on_tape(
                    &mut tape,
                    &gen_bound,
                    &models.bwe.cfg,
                    x,
                    None,
                )?;
                let real = tape.constant(las_tensor(&p.high)?);
                let pair = [(real, fake)];
                let time = wgan_gp_d_loss_on_tape(
                    &mut tape,
                    &critic_time,
                    &crit_bound,
                    &pair,
                    cfg.gp_gamma,
                    &[e_time],
                )?;
                let freq = wgan_gp_d_loss_on_tape(
                    &mut tape,
                    &critic_freq,
                    &crit_bound,
                    &pair,
                    cfg.gp_gamma,
                    &[e_freq],
                )?;
                let total = tape.add(time.total, freq.total)?;
                let grads = tape.backward(total)?;
                accumulate(&mut acc, &crit_bound, &grads, inv, |_| true);
                dt += tape.value(time.total).data()[0].as_f64() * inv;
                df += tape.value(freq.total).data()[0].as_f64() * inv;
            }
            adam_step(&mut critic_params, &acc, &mut opt_critic, &adam)?;

            let mut acc = BTreeMap::new();
            let (mut g_adv_sum, mut mse_sum) = (0.0, 0.0);
            for p in batch {
                let mut tape = Tape::new();
                let gen_bound = models.bwe.params.bind(&mut tape, |_| true);
                let crit_bound = critic_params.bind(&mut tape, |_| false);
                let x = tape.constant(las_tensor(&p.narrow)?);
                let fake = SpectrumMapper::forward_on_tape(
                    &mut tape,
                    &gen_bound,
                    &models.bwe.cfg,
                    x,
                    None,
                )?;
                let critics: [(&dyn SpectralCritic<T>, &BoundParams); 2] = [
                    (&critic_time, &crit_bound),
                    (&critic_freq, &crit_bound),
                ];
                let g_adv = wgan_g_loss_on_tape(&mut tape, &critics, &[fake])?;
                let target = tape.constant(las_tensor(&p.high)?);
                let l = mse_on_tape(&mut tape, target, fake)?;
                let weighted = tape.affine(l, cfg.lambda_c, 0.0)?;
                let g_total = tape.add(g_adv, weighted)?;
                let grads = tape.backward(g_total)?;
                accumulate(&mut acc, &gen_bound, &grads, inv, |_| true);
                g_adv_sum += tape.value(g_adv).data()[0].as_f64() * inv;
                mse_sum += tape.value(l).data()[0].as_f64() * inv;
            }
            adam_step(&mut models.bwe.params, &acc, &mut opt_bwe, &adam)?;

            step += 1;
            rows.push(ExtLossRow {
                step,
                phase: "bwe_adv",
                mse: mse_sum,
                d_time: dt,
                d_freq: df,
                g_adv: g_adv_sum,
            });
        }
    }

    // Resolution extension, mean-squared only.
    let mut opt_fre = AdamState::new();
    let layout = BandLayout {
        k_nb: 0,
        k_full: models.fre.cfg.in_bins,
        k_fine: models.fre.cfg.out_bins,
    };
    for _ in 0..cfg.fre_epochs {
        for batch in fre_data.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = models.fre.params.bind(&mut tape, |_| true);
            let vars: Vec<(Var, Var, Var)> = batch
                .iter()
                .map(|p| -> Result<_> {
                    let x = tape.constant(las_tensor(&p.full)?);
                    let reference = fre_upsample_reference(&p.full, &layout)?;
                    let r = tape.constant(las_tensor(&reference)?);
                    let t = tape.constant(las_tensor(&p.fine)?);
                    Ok((x, r, t))
                })
                .collect::<Result<_>>()?;
            let mse = mse_batch_step(&mut models.fre, &vars, &mut tape, &bound, &mut opt_fre, &adam)?;
            step += 1;
            rows.push(ExtLossRow {
                step,
                phase: "fre",
                mse,
                ..ExtLossRow::default()
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::mse_las;
    use crate::synth;

    fn clean() -> Waveform<f64> {
        synth::speech_like(24_000, 0.25, 41).unwrap()
    }

    #[test]
    fn extension_shapes_follow_the_band_layout() {
        let stft = StftConfig::base(24_000);
        let (bp, fp) = ext_pairs_from_clean(&clean(), &stft).unwrap();
        assert_eq!(bp.narrow.bins(), 341);
        assert_eq!(bp.high.bins(), 685);
        assert_eq!(fp.full.bins(), 1025);
        assert_eq!(fp.fine.bins(), 4097);
        assert_eq!(bp.narrow.frames(), fp.fine.frames());

        let models = BweFreModels::<f64>::init_desk(1).unwrap();
        let high = models.bwe.forward(&bp.narrow, stft).unwrap();
        assert_eq!(high.bins(), 685);
        let merged = crate::enhance::band_merge(&bp.narrow, &high, &BandLayout::base()).unwrap();
        assert_eq!(merged.bins(), 1025);
        let fine = models
            .fre
            .forward(&merged, StftConfig::fine(24_000))
            .unwrap();
        assert_eq!(fine.bins(), 4097);
        assert!(fine.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn resolution_extension_starts_at_the_interpolation_baseline() {
        let stft = StftConfig::base(24_000);
        let (_, fp) = ext_pairs_from_clean(&clean(), &stft).unwrap();
        let models = BweFreModels::<f64>::init_desk(3).unwrap();
        let out = models.fre.forward(&fp.full, StftConfig::fine(24_000)).unwrap();
        let layout = BandLayout {
            k_nb: 0,
            k_full: 1025,
            k_fine: 4097,
        };
        let reference = fre_upsample_reference(&fp.full, &layout).unwrap();
        for (a, b) in out.values().iter().zip(reference.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_improves_both_stages() {
        let stft = StftConfig::base(24_000);
        let (bp, fp) = ext_pairs_from_clean(&clean(), &stft).unwrap();
        let mut models = BweFreModels::<f64>::init_desk(5).unwrap();
        let cfg = ExtTrainConfig {
            bwe_mse_epochs: 12,
            bwe_adv_epochs: 2,
            fre_epochs: 80,
            batch_size: 1,
            lr: 2e-3,
            seed: 5,
            ..ExtTrainConfig::default()
        };
        let rows = train_bwe_fre(
            &mut models,
            std::slice::from_ref(&bp),
            std::slice::from_ref(&fp),
            &cfg,
        )
        .unwrap();

        let bwe_rows: Vec<&ExtLossRow> = rows.iter().filter(|r| r.phase == "bwe_mse").collect();
        assert!(bwe_rows.last().unwrap().mse < bwe_rows[0].mse);
        let fre_rows: Vec<&ExtLossRow> = rows.iter().filter(|r| r.phase == "fre").collect();
        assert!(fre_rows.last().unwrap().mse < fre_rows[0].mse);
        assert!(rows.iter().any(|r| r.phase == "bwe_adv" && r.g_adv != 0.0));

        // The trained upsampler beats the interpolation it started from.
        let trained = models.fre.forward(&fp.full, StftConfig::fine(24_000)).unwrap();
        let layout = BandLayout {
            k_nb: 0,
            k_full: 1025,
            k_fine: 4097,
        };
        let reference = fre_upsample_reference(&fp.full, &layout).unwrap();
        let trained_mse = mse_las(&fp.fine, &trained).unwrap();
        let baseline_mse = mse_las(&fp.fine, &reference).unwrap();
        assert!(
            trained_mse < 0.2 * baseline_mse,
            "trained {trained_mse} vs baseline {baseline_mse}"
        );
    }
}
