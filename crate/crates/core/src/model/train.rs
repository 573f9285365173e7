use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::data::TrainItem;
use super::net::{forward_on_tape, DnrAsp, ForwardVars};
use crate::losses::{
    l_rs_on_tape, mse_on_tape, neg_correlation_on_tape, wgan_g_loss_on_tape,
    wgan_gp_d_loss_on_tape, LossWeights, SpectralCritic, StftScale,
};
use crate::nn::{
    adam_step, save_params, AdamConfig, AdamState, BoundParams, CriticAxis, CriticSpec,
    Gradients, ParamStore, Tape, Tensor, Var,
};
use crate::signal::Las;
use crate::{Error, Result, Scalar};

/// Which width family the run uses; recorded in logs and summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelScale {
    Desk,
    Paper,
}

impl ModelScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::config(format!(
                "scale must be `desk` or `paper`, found `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }

    pub fn model_config(self) -> ModelConfig {
        match self {
            Self::Desk => ModelConfig::desk(),
            Self::Paper => ModelConfig::paper(),
        }
    }
}

/// Schedule and optimizer settings for the three training steps.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    pub step3_epochs: usize,
    /// Utterances per optimizer step; batches are whole utterances.
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub gp_gamma: f64,
    pub seed: u64,
    pub scale: ModelScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            step1_epochs: 40,
            step2_epochs: 5,
            step3_epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            lambda_c: w.lambda_c,
            gp_gamma: w.gp_gamma,
            seed: 0,
            scale: ModelScale::Desk,
        }
    }
}

impl TrainConfig {
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

/// Per-optimizer-step loss components, averaged over the batch. Fields
/// outside the step's phase stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub phase: u8,
    pub l_nr: f64,
    pub l_ne: f64,
    pub l_rc: f64,
    pub l_rs: f64,
    pub l_i: f64,
    pub l_c: f64,
    pub total: f64,
    pub d_time: f64,
    pub d_freq: f64,
    pub g_adv: f64,
    pub g_total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,phase,l_nr,l_ne,l_rc,l_rs,l_i,l_c,total,d_time,d_freq,g_adv,g_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.l_nr,
            self.l_ne,
            self.l_rc,
            self.l_rs,
            self.l_i,
            self.l_c,
            self.total,
            self.d_time,
            self.d_freq,
            self.g_adv,
            self.g_total
        )
    }
}

/// Tape handles for the six step-1 loss components and their sum.
#[derive(Debug, Clone, Copy)]
pub struct Step1Graph {
    pub forward: ForwardVars,
    pub l_nr: Var,
    pub l_ne: Var,
    pub l_rc: Var,
    pub l_rs: Var,
    pub l_i: Var,
    pub l_c: Var,
    pub total: Var,
}

pub(super) fn las_tensor<T: Scalar>(las: &Las<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(&[las.frames(), las.bins()], las.values().to_vec())
}

/// Full step-1 graph for one utterance: forward pass plus the unit-weighted
/// sum of the six supervision losses, each attached to the stage output it
/// supervises.
pub fn step1_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    item: &TrainItem<T>,
    scales: &[StftScale],
) -> Result<Step1Graph> {
    let forward = forward_on_tape(tape, params, cfg, &item.features, &item.features.mel)?;

    let t_nr = tape.constant(las_tensor(&item.l_nr)?);
    let t_ne = tape.constant(las_tensor(&item.l_ne)?);
    let t_clean = tape.constant(las_tensor(&item.l_clean)?);
    let t_rir = tape.constant(Tensor::from_vec(
        &[item.rir.taps().len()],
        item.rir.taps().to_vec(),
    )?);
    let noisy = tape.constant(Tensor::from_vec(
        &[item.noisy.len()],
        item.noisy.samples().to_vec(),
    )?);

    let l_nr = mse_on_tape(tape, t_nr, forward.l_nr)?;
    let l_ne = mse_on_tape(tape, t_ne, forward.l_ne)?;
    let l_rc = neg_correlation_on_tape(tape, t_rir, forward.r_hat)?;
    let l_rs = l_rs_on_tape(tape, item.degraded.samples(), noisy, forward.r_hat, scales)?;
    let l_i = mse_on_tape(tape, t_clean, forward.l_tilde)?;
    let l_c = mse_on_tape(tape, t_clean, forward.l_hat)?;

    let mut total = tape.add(l_nr, l_ne)?;
    for part in [l_rc, l_rs, l_i, l_c] {
        total = tape.add(total, part)?;
    }
    Ok(Step1Graph {
        forward,
        l_nr,
        l_ne,
        l_rc,
        l_rs,
        l_i,
        l_c,
        total,
    })
}

fn scalar_value<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

/// Add `scale * grad` into the accumulator for every bound parameter whose
/// name passes the filter.
pub(super) fn accumulate<T: Scalar>(
    acc: &mut BTreeMap<String, Tensor<T>>,
    bound: &BoundParams,
    grads: &Gradients<T>,
    scale: f64,
    keep: impl Fn(&str) -> bool,
) {
    let s = T::of(scale);
    for (name, var) in bound.iter() {
        if !keep(name) {
            continue;
        }
        if let Some(g) = grads.get(var) {
            let slot = acc
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b * s;
            }
        }
    }
}

/// Three-step training driver. Holds the model, the two spectral critics,
/// one Adam state per update group (whole model, critics, refinement stage
/// alone), and the seeded stream for gradient-penalty interpolation draws.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    model: DnrAsp<T>,
    critic_time: CriticSpec,
    critic_freq: CriticSpec,
    critic_params: ParamStore<T>,
    cfg: TrainConfig,
    scales: Vec<StftScale>,
    opt_model: AdamState<T>,
    opt_critic: AdamState<T>,
    opt_post: AdamState<T>,
    rng: ChaCha8Rng,
    global_step: u64,
    step1_done: bool,
    history: Vec<LossBreakdown>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DnrAsp<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let k = model.config().k_out;
        let critic_time = CriticSpec::new("critic_time", CriticAxis::Time, k);
        let critic_freq = CriticSpec::new("critic_freq", CriticAxis::Freq, k);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut critic_params = ParamStore::new();
        critic_time.init(&mut critic_params, &mut rng)?;
        critic_freq.init(&mut critic_params, &mut rng)?;
        Ok(Self {
            model,
            critic_time,
            critic_freq,
            critic_params,
            scales: LossWeights::default().stft_scales,
            cfg,
            opt_model: AdamState::new(),
            opt_critic: AdamState::new(),
            opt_post: AdamState::new(),
            rng,
            global_step: 0,
            step1_done: false,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &DnrAsp<T> {
        &self.model
    }

    pub fn into_model(self) -> DnrAsp<T> {
        self.model
    }

    pub fn critic_params(&self) -> &ParamStore<T> {
        &self.critic_params
    }

    pub fn critic_time(&self) -> &CriticSpec {
        &self.critic_time
    }

    pub fn critic_freq(&self) -> &CriticSpec {
        &self.critic_freq
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.cfg.lr,
            ..AdamConfig::default()
        }
    }

    /// Mark joint training finished, unlocking the adversarial steps.
    pub fn complete_step1(&mut self) {
        self.step1_done = true;
    }

    pub fn step1_complete(&self) -> bool {
        self.step1_done
    }

    /// One joint optimizer step on the unit-weighted six-loss sum over a
    /// batch of utterances; every model parameter updates.
    pub fn step1_batch(&mut self, batch: &[TrainItem<T>]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut acc = BTreeMap::new();
        let mut out = LossBreakdown::default();
        for item in batch {
            let mut tape = Tape::new();
            let bound = self.model.params().bind(&mut tape, |_| true);
            let g = step1_loss_on_tape(&mut tape, &bound, self.model.config(), item, &self.scales)?;
            let grads = tape.backward(g.total)?;
            accumulate(&mut acc, &bound, &grads, inv, |_| true);
            out.l_nr += scalar_value(&tape, g.l_nr) * inv;
            out.l_ne += scalar_value(&tape, g.l_ne) * inv;
            out.l_rc += scalar_value(&tape, g.l_rc) * inv;
            out.l_rs += scalar_value(&tape, g.l_rs) * inv;
            out.l_i += scalar_value(&tape, g.l_i) * inv;
            out.l_c += scalar_value(&tape, g.l_c) * inv;
            out.total += scalar_value(&tape, g.total) * inv;
        }
        let adam = self.adam();
        adam_step(self.model.params_mut(), &acc, &mut self.opt_model, &adam)?;
        self.global_step += 1;
        out.step = self.global_step;
        out.phase = 1;
        self.history.push(out);
        Ok(out)
    }

    /// One critic-only optimizer step: both critics score (natural clean
    /// LAS, refined LAS) pairs under the gradient-penalty objective; model
    /// parameters are bound as constants and cannot move.
    fn critic_batch(&mut self, batch: &[TrainItem<T>]) -> Result<(f64, f64)> {
        let inv = 1.0 / batch.len() as f64;
        let mut acc = BTreeMap::new();
        let (mut dt, mut df) = (0.0, 0.0);
        for item in batch {
            let e_time = T::of(self.rng.random::<f64>());
            let e_freq = T::of(self.rng.random::<f64>());
            let mut tape = Tape::new();
            let model_bound = self.model.params().bind(&mut tape, |_| false);
            let crit_bound = self.critic_params.bind(&mut tape, |_| true);
            let fwd = forward_on_tape(
                &mut tape,
                &model_bound,
                self.model.config(),
                &item.features,
                &item.features.mel,
            )?;
            let real = tape.constant(las_tensor(&item.l_clean)?);
            let pair = [(real, fwd.l_hat)];
            let time = wgan_gp_d_loss_on_tape(
                &mut tape,
                &self.critic_time,
                &crit_bound,
                &pair,
                self.cfg.gp_gamma,
                &[e_time],
            )?;
            let freq = wgan_gp_d_loss_on_tape(
                &mut tape,
                &self.critic_freq,
                &crit_bound,
                &pair,
                self.cfg.gp_gamma,
                &[e_freq],
            )?;
            let total = tape.add(time.total, freq.total)?;
            let grads = tape.backward(total)?;
            accumulate(&mut acc, &crit_bound, &grads, inv, |_| true);
            dt += scalar_value(&tape, time.total) * inv;
            df += scalar_value(&tape, freq.total) * inv;
        }
        let adam = self.adam();
        adam_step(&mut self.critic_params, &acc, &mut self.opt_critic, &adam)?;
        Ok((dt, df))
    }

    /// One step-2 optimizer step (critic warm-up; requires step 1 done).
    pub fn step2_batch(&mut self, batch: &[TrainItem<T>]) -> Result<LossBreakdown> {
        self.require_step1("step 2")?;
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let (dt, df) = self.critic_batch(batch)?;
        self.global_step += 1;
        let out = LossBreakdown {
            step: self.global_step,
            phase: 2,
            d_time: dt,
            d_freq: df,
            ..LossBreakdown::default()
        };
        self.history.push(out);
        Ok(out)
    }

    /// One step-3 iteration: a critic update, then a generator update in
    /// which only refinement-stage (`post.*`) parameters may move. The
    /// generator objective is the summed critic loss plus `lambda_c` times
    /// the refined-spectrogram MSE.
    pub fn step3_batch(&mut self, batch: &[TrainItem<T>]) -> Result<LossBreakdown> {
        self.require_step1("step 3")?;
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let (dt, df) = self.critic_batch(batch)?;

        let inv = 1.0 / batch.len() as f64;
        let mut acc = BTreeMap::new();
        let (mut g_adv_sum, mut g_total_sum, mut l_c_sum) = (0.0, 0.0, 0.0);
        let is_post = |name: &str| name.starts_with("post.");
        for item in batch {
            let mut tape = Tape::new();
            let model_bound = self.model.params().bind(&mut tape, is_post);
            let crit_bound = self.critic_params.bind(&mut tape, |_| false);
            let fwd = forward_on_tape(
                &mut tape,
                &model_bound,
                self.model.config(),
                &item.features,
                &item.features.mel,
            )?;
            let critics: [(&dyn SpectralCritic<T>, &BoundParams); 2] = [
                (&self.critic_time, &crit_bound),
                (&self.critic_freq, &crit_bound),
            ];
            let g_adv = wgan_g_loss_on_tape(&mut tape, &critics, &[fwd.l_hat])?;
            let t_clean = tape.constant(las_tensor(&item.l_clean)?);
            let l_c = mse_on_tape(&mut tape, t_clean, fwd.l_hat)?;
            let weighted = tape.affine(l_c, self.cfg.lambda_c, 0.0)?;
            let g_total = tape.add(g_adv, weighted)?;
            let grads = tape.backward(g_total)?;
            accumulate(&mut acc, &model_bound, &grads, inv, is_post);
            g_adv_sum += scalar_value(&tape, g_adv) * inv;
            g_total_sum += scalar_value(&tape, g_total) * inv;
            l_c_sum += scalar_value(&tape, l_c) * inv;
        }

        // The optimizer touches a store holding only refinement-stage
        // tensors: everything else stays bitwise untouched even under
        // Adam's zero-gradient moment decay.
        let mut post_store = ParamStore::new();
        for (name, t) in self.model.params().iter() {
            if is_post(name) {
                post_store.insert(name.clone(), t.clone())?;
            }
        }
        let adam = self.adam();
        adam_step(&mut post_store, &acc, &mut self.opt_post, &adam)?;
        for (name, t) in post_store.iter() {
            *self.model.params_mut().get_mut(name)? = t.clone();
        }

        self.global_step += 1;
        let out = LossBreakdown {
            step: self.global_step,
            phase: 3,
            l_c: l_c_sum,
            d_time: dt,
            d_freq: df,
            g_adv: g_adv_sum,
            g_total: g_total_sum,
            ..LossBreakdown::default()
        };
        self.history.push(out);
        Ok(out)
    }

    fn require_step1(&self, what: &str) -> Result<()> {
        if self.step1_done {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{what} requested before step 1 completed"
            )))
        }
    }

    /// Run the whole schedule over the given items in manifest order,
    /// optionally writing checkpoints and the loss log under `out`.
    pub fn fit(&mut self, items: &[TrainItem<T>], out: Option<&Path>) -> Result<()> {
        if items.is_empty() {
            return Err(Error::config("no training items"));
        }
        let bs = self.cfg.batch_size;
        for _ in 0..self.cfg.step1_epochs {
            for batch in items.chunks(bs) {
                self.step1_batch(batch)?;
            }
        }
        self.complete_step1();
        if let Some(dir) = out {
            self.model.save(&dir.join("dnr_asp.step1.dnrw"))?;
        }
        for _ in 0..self.cfg.step2_epochs {
            for batch in items.chunks(bs) {
                self.step2_batch(batch)?;
            }
        }
        for _ in 0..self.cfg.step3_epochs {
            for batch in items.chunks(bs) {
                self.step3_batch(batch)?;
            }
        }
        if let Some(dir) = out {
            self.model.save(&dir.join("dnr_asp.dnrw"))?;
            save_critics(&self.critic_params, &dir.join("critics.dnrw"))?;
            self.write_log(&dir.join("train_log.csv"))?;
        }
        Ok(())
    }

    /// Write the accumulated loss log as CSV, atomically.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut text = String::from(LossBreakdown::CSV_HEADER);
        text.push('\n');
        for row in &self.history {
            text.push_str(&row.csv_row());
            text.push('\n');
        }
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn save_critics<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("dnrw.tmp");
    save_params(&params.cast::<f32>(), &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
