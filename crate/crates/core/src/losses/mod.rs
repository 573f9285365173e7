//! Training objectives: spectral MSE, the negative-correlation impulse
//! response loss, the multi-resolution STFT loss, and the Wasserstein
//! adversarial pair with gradient penalty. Every loss exists as a pure
//! evaluation and as a tape construction whose gradients are
//! finite-difference verified.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::degrade::{apply_rir, Rir};
use crate::nn::store::{BoundParams, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::nn::CriticSpec;
use crate::signal::{window, Las, Waveform, WindowKind};
use crate::{Error, Result, Scalar, AMP_FLOOR};

/// One analysis scale of the multi-resolution STFT loss, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftScale {
    pub fft_len: usize,
    pub shift: usize,
    pub frame_len: usize,
}

impl StftScale {
    pub fn new(fft_len: usize, shift: usize, frame_len: usize) -> Self {
        Self {
            fft_len,
            shift,
            frame_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_len == 0
            || !self.fft_len.is_power_of_two()
            || self.frame_len == 0
            || self.frame_len > self.fft_len
            || self.shift == 0
            || self.shift > self.frame_len
        {
            return Err(Error::config(format!("invalid analysis scale {self:?}")));
        }
        Ok(())
    }
}

/// Loss weighting and the analysis scales shared by both adversarial steps.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub gp_gamma: f64,
    pub stft_scales: Vec<StftScale>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 500.0,
            gp_gamma: 10.0,
            stft_scales: vec![
                StftScale::new(512, 128, 480),
                StftScale::new(1024, 256, 960),
                StftScale::new(2048, 512, 1920),
            ],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_c <= 0.0 || !self.lambda_c.is_finite() {
            return Err(Error::config("lambda_c must be positive"));
        }
        if self.gp_gamma < 0.0 || !self.gp_gamma.is_finite() {
            return Err(Error::config("gp_gamma must be nonnegative"));
        }
        if self.stft_scales.is_empty() {
            return Err(Error::config("at least one analysis scale required"));
        }
        for s in &self.stft_scales {
            s.validate()?;
        }
        Ok(())
    }
}

/// Mean squared error over all frames and bins of two equally shaped
/// log-amplitude spectrograms.
pub fn mse_las<T: Scalar>(target: &Las<T>, pred: &Las<T>) -> Result<T> {
    if target.frames != pred.frames || target.bins != pred.bins {
        return Err(Error::shape(
            "mse_las",
            format!(
                "{}x{} against {}x{}",
                target.frames, target.bins, pred.frames, pred.bins
            ),
        ));
    }
    let mut acc = 0.0f64;
    for (a, b) in target.values.iter().zip(&pred.values) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    Ok(T::of(acc / target.values.len() as f64))
}

fn correlation_stats<T: Scalar>(x: &[T], y: &[T]) -> Result<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let my = y.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut ex = 0.0;
    let mut ey = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (av, bv) = (a.as_f64(), b.as_f64());
        let da = av - mx;
        let db = bv - my;
        cov += da * db;
        vx += da * da;
        vy += db * db;
        ex += av * av;
        ey += bv * bv;
    }
    // A constant signal leaves only rounding noise in the centered energy;
    // compare against the raw energy so fp constants are still rejected.
    if vx <= 1e-28 * ex || vy <= 1e-28 * ey {
        return Err(Error::numeric(
            "neg_correlation",
            "zero-variance impulse response (constant prediction)",
        ));
    }
    Ok((cov, vx, vy))
}

/// Negative Pearson correlation between two impulse responses; minimized
/// (at -1) when they agree up to positive affine scaling.
pub fn neg_correlation<T: Scalar>(r: &Rir<T>, r_hat: &Rir<T>) -> Result<T> {
    let (cov, vx, vy) = correlation_stats(r.taps(), r_hat.taps())?;
    Ok(T::of(-cov / (vx * vy).sqrt()))
}

fn check_same_len<T: Scalar>(x: &Waveform<T>, y: &Waveform<T>) -> Result<()> {
    if x.len() != y.len() || x.sample_rate() != y.sample_rate() {
        return Err(Error::shape(
            "stft loss",
            format!(
                "{} samples @ {} against {} samples @ {}",
                x.len(),
                x.sample_rate(),
                y.len(),
                y.sample_rate()
            ),
        ));
    }
    Ok(())
}

fn scale_mags<T: Scalar>(wave: &[T], scale: &StftScale) -> Result<Tensor<T>> {
    let win = window::<T>(WindowKind::Hann, scale.frame_len);
    crate::nn::dsp_scale_magnitudes(
        wave,
        scale.frame_len,
        scale.shift,
        scale.fft_len,
        &win,
        AMP_FLOOR,
    )
}

/// Mean over scales of spectral convergence plus log-magnitude L1 distance.
/// `x` is the reference; a silent reference has no spectral-convergence
/// denominator and is rejected.
pub fn multiscale_stft_loss<T: Scalar>(
    x: &Waveform<T>,
    y: &Waveform<T>,
    scales: &[StftScale],
) -> Result<T> {
    check_same_len(x, y)?;
    if scales.is_empty() {
        return Err(Error::config("at least one analysis scale required"));
    }
    if x.samples().iter().all(|v| *v == T::zero()) {
        return Err(Error::numeric("multiscale_stft_loss", "silent reference"));
    }
    let mut total = 0.0f64;
    for scale in scales {
        scale.validate()?;
        let xm = scale_mags(x.samples(), scale)?;
        let ym = scale_mags(y.samples(), scale)?;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut log_l1 = 0.0f64;
        for (a, b) in xm.data().iter().zip(ym.data()) {
            let (av, bv) = (a.as_f64(), b.as_f64());
            num += (av - bv) * (av - bv);
            den += av * av;
            log_l1 += (av.ln() - bv.ln()).abs();
        }
        total += (num / den).sqrt() + log_l1 / xm.numel() as f64;
    }
    Ok(T::of(total / scales.len() as f64))
}

/// Waveform-domain reverberation loss: convolve `noisy` with the predicted
/// impulse response and compare against the natural noisy-reverberant
/// waveform under the multi-scale STFT loss.
pub fn l_rs<T: Scalar>(
    natural_noisy_reverberant: &Waveform<T>,
    noisy: &Waveform<T>,
    r_hat: &Rir<T>,
    scales: &[StftScale],
) -> Result<T> {
    let (pred, _gain) = apply_rir(noisy, r_hat)?;
    multiscale_stft_loss(natural_noisy_reverberant, &pred, scales)
}

/// MSE between a constant target and a prediction, on the tape.
pub fn mse_on_tape<T: Scalar>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    if tape.value(target).shape() != tape.value(pred).shape() {
        return Err(Error::shape(
            "mse",
            format!(
                "{:?} against {:?}",
                tape.value(target).shape(),
                tape.value(pred).shape()
            ),
        ));
    }
    let d = tape.sub(target, pred)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Negative correlation coefficient on the tape (rank-1 operands).
pub fn neg_correlation_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    r: Var,
    r_hat: Var,
) -> Result<Var> {
    let (rv, hv) = (tape.value(r), tape.value(r_hat));
    if rv.rank() != 1 || rv.shape() != hv.shape() {
        return Err(Error::shape(
            "neg_correlation",
            format!("{:?} against {:?}", rv.shape(), hv.shape()),
        ));
    }
    correlation_stats(rv.data(), hv.data())?;
    let n = rv.numel();
    let ones = tape.constant(Tensor::filled(&[n], T::one()));
    let mr = tape.mean_all(r)?;
    let mh = tape.mean_all(r_hat)?;
    let mrb = tape.mul_scalar(ones, mr)?;
    let mhb = tape.mul_scalar(ones, mh)?;
    let rc = tape.sub(r, mrb)?;
    let hc = tape.sub(r_hat, mhb)?;
    let prod = tape.mul(rc, hc)?;
    let cov = tape.mean_all(prod)?;
    let rsq = tape.mul(rc, rc)?;
    let hsq = tape.mul(hc, hc)?;
    let vr = tape.mean_all(rsq)?;
    let vh = tape.mean_all(hsq)?;
    let vv = tape.mul(vr, vh)?;
    let den = tape.sqrt(vv)?;
    let rho = tape.div(cov, den)?;
    tape.affine(rho, -1.0, 0.0)
}

/// Multi-scale STFT loss of a waveform var against a constant reference.
/// The spectral-convergence numerator is floored before its square root so
/// the gradient stays finite at exact equality.
pub fn multiscale_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    reference: &[T],
    y: Var,
    scales: &[StftScale],
) -> Result<Var> {
    if scales.is_empty() {
        return Err(Error::config("at least one analysis scale required"));
    }
    if tape.value(y).rank() != 1 || tape.value(y).numel() != reference.len() {
        return Err(Error::shape(
            "multiscale stft",
            format!(
                "waveform {:?} against reference length {}",
                tape.value(y).shape(),
                reference.len()
            ),
        ));
    }
    if reference.iter().all(|v| *v == T::zero()) {
        return Err(Error::numeric("multiscale_stft_loss", "silent reference"));
    }
    let mut acc: Option<Var> = None;
    for scale in scales {
        scale.validate()?;
        let xm = scale_mags(reference, scale)?;
        let fro_x = xm
            .data()
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let lnx = xm.map(|v| v.ln());
        let numel = xm.numel();
        let xc = tape.constant(xm);
        let lc = tape.constant(lnx);
        let win = window::<T>(WindowKind::Hann, scale.frame_len);
        let frames = tape.frames_windowed(y, scale.frame_len, scale.shift, win)?;
        let ym = tape.rfft_mag(frames, scale.fft_len, AMP_FLOOR)?;
        let d = tape.sub(xc, ym)?;
        let sq = tape.mul(d, d)?;
        let ssq = tape.sum_all(sq)?;
        let safe = tape.clamp_min(ssq, 1e-24)?;
        let root = tape.sqrt(safe)?;
        let sc = tape.affine(root, 1.0 / fro_x, 0.0)?;
        let lny = tape.ln(ym)?;
        let ld = tape.sub(lc, lny)?;
        let la = tape.abs(ld)?;
        let lsum = tape.sum_all(la)?;
        let lmean = tape.affine(lsum, 1.0 / numel as f64, 0.0)?;
        let term = tape.add(sc, lmean)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.affine(acc.expect("scales nonempty"), 1.0 / scales.len() as f64, 0.0)
}

/// Reverberation loss on the tape: `noisy` convolved with the predicted
/// taps against the natural noisy-reverberant waveform. No peak
/// renormalization here (unlike the file-producing path), so the loss is
/// exactly zero when the predicted taps equal the ones that built the
/// reference.
pub fn l_rs_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    natural_noisy_reverberant: &[T],
    noisy: Var,
    r_hat: Var,
    scales: &[StftScale],
) -> Result<Var> {
    let pred = tape.conv_trunc(noisy, r_hat)?;
    multiscale_on_tape(tape, natural_noisy_reverberant, pred, scales)
}

/// A critic scoring a spectrogram, differentiable enough for the gradient
/// penalty: implementations provide the score and an input-space gradient
/// built from first-class ops.
pub trait SpectralCritic<T: Scalar> {
    fn score(&self, tape: &mut Tape<T>, params: &BoundParams, las: Var) -> Result<Var>;
    fn score_and_input_grad(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        las: Var,
    ) -> Result<(Var, Var)>;
}

impl<T: Scalar> SpectralCritic<T> for CriticSpec {
    fn score(&self, tape: &mut Tape<T>, params: &BoundParams, las: Var) -> Result<Var> {
        CriticSpec::score(self, tape, params, las)
    }

    fn score_and_input_grad(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        las: Var,
    ) -> Result<(Var, Var)> {
        CriticSpec::score_and_input_grad(self, tape, params, las)
    }
}

/// Reference critic `d(x) = sum(w . x)`: its input gradient is the weight
/// tensor itself, so the gradient penalty vanishes exactly at unit weight
/// norm. Used to pin down the penalty's analytic behavior in tests.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    pub weight_name: String,
}

impl<T: Scalar> SpectralCritic<T> for LinearCritic {
    fn score(&self, tape: &mut Tape<T>, params: &BoundParams, las: Var) -> Result<Var> {
        let w = params.var(&self.weight_name)?;
        let prod = tape.mul(w, las)?;
        tape.sum_all(prod)
    }

    fn score_and_input_grad(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        las: Var,
    ) -> Result<(Var, Var)> {
        let score = SpectralCritic::score(self, tape, params, las)?;
        Ok((score, params.var(&self.weight_name)?))
    }
}

/// Critic-loss components (means over the batch).
#[derive(Debug, Clone, Copy)]
pub struct GanDLossParts {
    pub total: Var,
    pub wasserstein: Var,
    pub penalty: Var,
}

fn to_scalar<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    if tape.value(v).is_scalar() && tape.value(v).rank() == 0 {
        Ok(v)
    } else {
        tape.mean_all(v)
    }
}

/// Critic objective: mean d(fake) - mean d(real) plus gamma times the mean
/// squared deviation of the interpolate gradient norm from 1. One epsilon
/// per (real, fake) pair.
pub fn wgan_gp_d_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &dyn SpectralCritic<T>,
    params: &BoundParams,
    pairs: &[(Var, Var)],
    gamma: f64,
    eps: &[T],
) -> Result<GanDLossParts> {
    if pairs.is_empty() || eps.len() != pairs.len() {
        return Err(Error::shape(
            "wgan_gp_d_loss",
            format!("{} pairs against {} epsilons", pairs.len(), eps.len()),
        ));
    }
    let mut wass: Option<Var> = None;
    let mut pen: Option<Var> = None;
    for (&(real, fake), &e) in pairs.iter().zip(eps) {
        if tape.value(real).shape() != tape.value(fake).shape() {
            return Err(Error::shape(
                "wgan_gp_d_loss",
                format!(
                    "real {:?} against fake {:?}",
                    tape.value(real).shape(),
                    tape.value(fake).shape()
                ),
            ));
        }
        let d_real = critic.score(tape, params, real)?;
        let d_real = to_scalar(tape, d_real)?;
        let d_fake = critic.score(tape, params, fake)?;
        let d_fake = to_scalar(tape, d_fake)?;
        let w = tape.sub(d_fake, d_real)?;
        wass = Some(match wass {
            None => w,
            Some(a) => tape.add(a, w)?,
        });

        let ef = e.as_f64();
        let re = tape.affine(real, ef, 0.0)?;
        let fe = tape.affine(fake, 1.0 - ef, 0.0)?;
        let x_hat = tape.add(re, fe)?;
        let (_, gx) = critic.score_and_input_grad(tape, params, x_hat)?;
        let sq = tape.mul(gx, gx)?;
        let ssq = tape.sum_all(sq)?;
        let safe = tape.clamp_min(ssq, 1e-24)?;
        let norm = tape.sqrt(safe)?;
        let dev = tape.affine(norm, 1.0, -1.0)?;
        let p = tape.mul(dev, dev)?;
        pen = Some(match pen {
            None => p,
            Some(a) => tape.add(a, p)?,
        });
    }
    let inv = 1.0 / pairs.len() as f64;
    let wasserstein = tape.affine(wass.expect("nonempty batch"), inv, 0.0)?;
    let penalty = tape.affine(pen.expect("nonempty batch"), inv, 0.0)?;
    let scaled = tape.affine(penalty, gamma, 0.0)?;
    let total = tape.add(wasserstein, scaled)?;
    Ok(GanDLossParts {
        total,
        wasserstein,
        penalty,
    })
}

/// Generator-side adversarial loss: negative mean critic score of the
/// fakes, summed over the supplied critics.
pub fn wgan_g_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    critics: &[(&dyn SpectralCritic<T>, &BoundParams)],
    fakes: &[Var],
) -> Result<Var> {
    if critics.is_empty() || fakes.is_empty() {
        return Err(Error::shape("wgan_g_loss", "no critics or no fakes"));
    }
    let mut acc: Option<Var> = None;
    for &(critic, params) in critics {
        for &fake in fakes {
            let s = critic.score(tape, params, fake)?;
            let s = to_scalar(tape, s)?;
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
    }
    tape.affine(acc.expect("nonempty"), -1.0 / fakes.len() as f64, 0.0)
}

/// Critic-loss values evaluated off-tape (fresh graph, seeded epsilons).
#[derive(Debug, Clone, Copy)]
pub struct GanDLoss<T> {
    pub total: T,
    pub wasserstein: T,
    pub penalty: T,
}

pub fn wgan_gp_d_loss<T: Scalar>(
    critic: &dyn SpectralCritic<T>,
    store: &ParamStore<T>,
    reals: &[&Tensor<T>],
    fakes: &[&Tensor<T>],
    gamma: f64,
    seed: u64,
) -> Result<GanDLoss<T>> {
    if reals.len() != fakes.len() {
        return Err(Error::shape(
            "wgan_gp_d_loss",
            format!("{} reals against {} fakes", reals.len(), fakes.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<T> = (0..reals.len())
        .map(|_| T::of(rng.random_range(0.0..1.0)))
        .collect();
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, |_| false);
    let pairs: Vec<(Var, Var)> = reals
        .iter()
        .zip(fakes)
        .map(|(r, f)| {
            (
                tape.constant((*r).clone()),
                tape.constant((*f).clone()),
            )
        })
        .collect();
    let parts = wgan_gp_d_loss_on_tape(&mut tape, critic, &params, &pairs, gamma, &eps)?;
    Ok(GanDLoss {
        total: tape.value(parts.total).scalar_value()?,
        wasserstein: tape.value(parts.wasserstein).scalar_value()?,
        penalty: tape.value(parts.penalty).scalar_value()?,
    })
}

pub fn wgan_g_loss<T: Scalar>(
    critics: &[(&dyn SpectralCritic<T>, &ParamStore<T>)],
    fakes: &[&Tensor<T>],
) -> Result<T> {
    let mut tape = Tape::new();
    let bound: Vec<BoundParams> = critics
        .iter()
        .map(|(_, store)| store.bind(&mut tape, |_| false))
        .collect();
    let with_params: Vec<(&dyn SpectralCritic<T>, &BoundParams)> = critics
        .iter()
        .zip(&bound)
        .map(|(&(c, _), p)| (c, p))
        .collect();
    let fake_vars: Vec<Var> = fakes.iter().map(|f| tape.constant((*f).clone())).collect();
    let loss = wgan_g_loss_on_tape(&mut tape, &with_params, &fake_vars)?;
    tape.value(loss).scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::RIR_TAPS;
    use crate::nn::CriticAxis;
    use crate::signal::StftConfig;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_las(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Las<f64> {
        let values = (0..frames * bins)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Las::from_values(values, frames, bins, StftConfig::base(24_000)).unwrap()
    }

    fn random_wave(rng: &mut ChaCha8Rng, len: usize) -> Waveform<f64> {
        let s = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
        Waveform::new(s, 24_000).unwrap()
    }

    fn random_rir(rng: &mut ChaCha8Rng) -> Rir<f64> {
        let taps: Vec<f64> = (0..RIR_TAPS)
            .map(|i| rng.random_range(-1.0..1.0) * (-3.0 * i as f64 / RIR_TAPS as f64).exp())
            .collect();
        Rir::from_taps(&taps, 24_000).unwrap()
    }

    #[test]
    fn mse_las_matches_double_loop_oracle() {
        let mut r = rng(11);
        let a = random_las(&mut r, 3, 4);
        let b = random_las(&mut r, 3, 4);
        let mut acc = 0.0;
        for n in 0..3 {
            for k in 0..4 {
                let d = a.row(n)[k] - b.row(n)[k];
                acc += d * d;
            }
        }
        let oracle = acc / 12.0;
        let got = mse_las(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        assert_eq!(mse_las(&a, &b).unwrap(), mse_las(&b, &a).unwrap());
        assert_eq!(mse_las(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_las_constant_offset_is_its_square() {
        let values = vec![0.25, -0.5, 0.75, 1.0, -1.25, 0.0];
        let a = Las::from_values(values.clone(), 2, 3, StftConfig::base(24_000)).unwrap();
        let shifted = values.iter().map(|v| v + 0.5).collect();
        let b = Las::from_values(shifted, 2, 3, StftConfig::base(24_000)).unwrap();
        assert_eq!(mse_las(&a, &b).unwrap(), 0.25);
    }

    #[test]
    fn mse_las_rejects_shape_mismatch() {
        let mut r = rng(12);
        let a = random_las(&mut r, 3, 4);
        let b = random_las(&mut r, 4, 3);
        assert!(mse_las(&a, &b).is_err());
    }

    #[test]
    fn neg_correlation_extremes() {
        let mut r = rng(21);
        let rir = random_rir(&mut r);
        let same = neg_correlation(&rir, &rir).unwrap();
        assert!((same + 1.0).abs() < 1e-12, "self-correlation {same}");
        let negated: Vec<f64> = rir.taps().iter().map(|t| -t).collect();
        let anti = Rir::from_taps(&negated, 24_000).unwrap();
        let flipped = neg_correlation(&rir, &anti).unwrap();
        assert!((flipped - 1.0).abs() < 1e-12, "anti-correlation {flipped}");
    }

    #[test]
    fn neg_correlation_affine_invariant_and_symmetric() {
        let mut r = rng(22);
        let rir = random_rir(&mut r);
        let scaled: Vec<f64> = rir.taps().iter().map(|t| 2.5 * t + 0.1).collect();
        let affine = Rir::from_taps(&scaled, 24_000).unwrap();
        let v = neg_correlation(&rir, &affine).unwrap();
        assert!((v + 1.0).abs() < 1e-12, "affine invariance {v}");
        assert_eq!(
            neg_correlation(&rir, &affine).unwrap(),
            neg_correlation(&affine, &rir).unwrap()
        );
    }

    #[test]
    fn neg_correlation_rejects_constant_prediction() {
        let mut r = rng(23);
        let rir = random_rir(&mut r);
        let flat = Rir::from_taps(&vec![0.3; RIR_TAPS], 24_000).unwrap();
        assert!(neg_correlation(&rir, &flat).is_err());
    }

    /// Independent magnitude oracle: naive framing, Hann window, direct DFT
    /// of the zero-padded frame, clamped at the amplitude floor.
    fn oracle_mags(x: &[f64], scale: &StftScale) -> Vec<Vec<f64>> {
        let win: Vec<f64> = window(WindowKind::Hann, scale.frame_len);
        let n_frames = x.len().div_ceil(scale.shift);
        let bins = scale.fft_len / 2 + 1;
        let mut out = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = f * scale.shift;
            let mut frame = vec![0.0; scale.frame_len];
            for (i, slot) in frame.iter_mut().enumerate() {
                if start + i < x.len() {
                    *slot = x[start + i] * win[i];
                }
            }
            let mut mags = Vec::with_capacity(bins);
            for k in 0..bins {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / scale.fft_len as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                mags.push((re * re + im * im).sqrt().max(AMP_FLOOR));
            }
            out.push(mags);
        }
        out
    }

    fn oracle_loss(x: &[f64], y: &[f64], scales: &[StftScale]) -> f64 {
        let mut total = 0.0;
        for scale in scales {
            let xm = oracle_mags(x, scale);
            let ym = oracle_mags(y, scale);
            let (mut num, mut den, mut l1, mut count) = (0.0, 0.0, 0.0, 0usize);
            for (xr, yr) in xm.iter().zip(&ym) {
                for (&a, &b) in xr.iter().zip(yr) {
                    num += (a - b) * (a - b);
                    den += a * a;
                    l1 += (a.ln() - b.ln()).abs();
                    count += 1;
                }
            }
            total += (num / den).sqrt() + l1 / count as f64;
        }
        total / scales.len() as f64
    }

    #[test]
    fn multiscale_zero_at_equality() {
        let mut r = rng(31);
        let x = random_wave(&mut r, 4096);
        let scales = LossWeights::default().stft_scales;
        assert_eq!(multiscale_stft_loss(&x, &x, &scales).unwrap(), 0.0);
    }

    #[test]
    fn multiscale_doubling_matches_closed_form_log_term() {
        let mut r = rng(32);
        let x = random_wave(&mut r, 4096);
        let y = Waveform::new(x.samples().iter().map(|v| 2.0 * v).collect(), 24_000).unwrap();
        let scales = LossWeights::default().stft_scales;

        let got = multiscale_stft_loss(&x, &y, &scales).unwrap();
        let oracle = oracle_loss(x.samples(), y.samples(), &scales);
        assert!(
            (got - oracle).abs() < 1e-9,
            "library {got} vs oracle {oracle}"
        );

        // With every magnitude above the floor, |2X| = 2|X| so the log term
        // is exactly ln 2 and the spectral-convergence term is exactly
        // ||X - 2X||_F / ||X||_F = 1, for every scale.
        for scale in &scales {
            let min_mag = oracle_mags(x.samples(), scale)
                .iter()
                .flat_map(|r| r.iter())
                .fold(f64::INFINITY, |m, &v| m.min(v));
            assert!(min_mag > 10.0 * AMP_FLOOR, "floor clamp would distort ln 2");
        }
        let expected = 1.0 + std::f64::consts::LN_2;
        assert!(
            (got - expected).abs() < 1e-9,
            "library {got} vs closed form {expected}"
        );
    }

    #[test]
    fn multiscale_time_reversal_symmetry_on_aligned_lengths() {
        // Exact frame-set bijection under reversal needs len = m*shift +
        // frame_len and silent margins of one frame at both ends; checked
        // per scale because the three default grids cannot align at once.
        for &(fft, shift, frame) in &[(512usize, 128usize, 480usize), (1024, 256, 960), (2048, 512, 1920)] {
            let scale = [StftScale::new(fft, shift, frame)];
            // 2*frame + 8.25*shift is frame mod shift because frame is
            // 3.75 shifts for all three default scales.
            let len = 2 * frame + 8 * shift + shift / 4;
            assert_eq!(len % shift, frame % shift);
            let mut r = rng(fft as u64);
            let build = |r: &mut ChaCha8Rng| {
                let mut s = vec![0.0f64; len];
                for v in s.iter_mut().take(len - frame).skip(frame) {
                    *v = r.random_range(-0.5..0.5);
                }
                Waveform::new(s, 24_000).unwrap()
            };
            let x = build(&mut r);
            let y = build(&mut r);
            let rev = |w: &Waveform<f64>| {
                let mut s = w.samples().to_vec();
                s.reverse();
                Waveform::new(s, 24_000).unwrap()
            };
            let fwd = multiscale_stft_loss(&x, &y, &scale).unwrap();
            let bwd = multiscale_stft_loss(&rev(&x), &rev(&y), &scale).unwrap();
            assert!(
                (fwd - bwd).abs() < 1e-9,
                "scale {fft}: forward {fwd} vs reversed {bwd}"
            );
        }
    }

    #[test]
    fn multiscale_rejects_silent_reference_and_length_mismatch() {
        let mut r = rng(33);
        let x = random_wave(&mut r, 2000);
        let silent = Waveform::new(vec![0.0; 2000], 24_000).unwrap();
        let scales = LossWeights::default().stft_scales;
        assert!(multiscale_stft_loss(&silent, &x, &scales).is_err());
        let short = random_wave(&mut r, 1999);
        assert!(multiscale_stft_loss(&x, &short, &scales).is_err());
    }

    #[test]
    fn l_rs_zero_at_true_rir_and_larger_at_impulse() {
        let mut r = rng(41);
        let noisy = random_wave(&mut r, 6000);
        let true_rir = random_rir(&mut r);
        let (natural, _gain) = apply_rir(&noisy, &true_rir).unwrap();
        let scales = LossWeights::default().stft_scales;

        let at_truth = l_rs(&natural, &noisy, &true_rir, &scales).unwrap();
        assert_eq!(at_truth, 0.0);

        let mut impulse = vec![0.0; RIR_TAPS];
        impulse[0] = 1.0;
        let impulse = Rir::from_taps(&impulse, 24_000).unwrap();
        let at_impulse = l_rs(&natural, &noisy, &impulse, &scales).unwrap();
        assert!(at_impulse > at_truth, "impulse {at_impulse} vs truth {at_truth}");
    }

    #[test]
    fn all_zero_rir_is_rejected_at_construction() {
        assert!(Rir::<f64>::from_taps(&[0.0; 16], 24_000).is_err());
    }

    fn tiny_critic(axis: CriticAxis, k: usize) -> CriticSpec {
        let mut c = CriticSpec::new("d", axis, k);
        c.channels = vec![2, 3];
        c.width = 3;
        c
    }

    #[test]
    fn gp_vanishes_exactly_for_unit_norm_linear_critic() {
        let critic = LinearCritic {
            weight_name: "w".into(),
        };
        let mut store = ParamStore::<f64>::new();
        let mut w = Tensor::zeros(&[3, 4]);
        w.data_mut()[5] = 1.0;
        store.insert("w", w).unwrap();

        let mut r = rng(51);
        let mk = |r: &mut ChaCha8Rng| {
            Tensor::from_vec(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let real = mk(&mut r);
        let fake = mk(&mut r);
        let loss = wgan_gp_d_loss(&critic, &store, &[&real], &[&fake], 10.0, 7).unwrap();
        assert_eq!(loss.penalty, 0.0);

        let mut wn = Tensor::from_vec(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap();
        let norm = wn.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in wn.data_mut() {
            *v /= norm;
        }
        let mut store2 = ParamStore::<f64>::new();
        store2.insert("w", wn).unwrap();
        let loss2 = wgan_gp_d_loss(&critic, &store2, &[&real], &[&fake], 10.0, 7).unwrap();
        assert!(loss2.penalty.abs() < 1e-12, "penalty {}", loss2.penalty);
    }

    #[test]
    fn wasserstein_term_cancels_when_real_equals_fake() {
        let critic = tiny_critic(CriticAxis::Time, 4);
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(52);
        critic.init(&mut store, &mut r).unwrap();
        let x = Tensor::from_vec(&[5, 4], (0..20).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap();
        let loss = wgan_gp_d_loss(&critic, &store, &[&x], &[&x], 10.0, 3).unwrap();
        assert_eq!(loss.wasserstein, 0.0);
        assert_eq!(loss.total, 10.0 * loss.penalty);
    }

    #[test]
    fn wgan_d_matches_finite_difference_gradient_norm_oracle() {
        let critic = tiny_critic(CriticAxis::Time, 3);
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(53);
        critic.init(&mut store, &mut r).unwrap();

        let mk = |r: &mut ChaCha8Rng| {
            Tensor::from_vec(&[4, 3], (0..12).map(|_| r.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let pairs_data: Vec<(Tensor<f64>, Tensor<f64>)> =
            (0..2).map(|_| (mk(&mut r), mk(&mut r))).collect();
        let eps = [0.3, 0.7];
        let gamma = 10.0;

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let pairs: Vec<(Var, Var)> = pairs_data
            .iter()
            .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
            .collect();
        let parts =
            wgan_gp_d_loss_on_tape(&mut tape, &critic, &bound, &pairs, gamma, &eps).unwrap();
        let got = tape.value(parts.total).scalar_value().unwrap();

        let score_of = |x: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let b = store.bind(&mut t, |_| false);
            let v = t.constant(x.clone());
            let s = critic.score(&mut t, &b, v).unwrap();
            t.value(s).scalar_value().unwrap()
        };

        let mut wass = 0.0;
        let mut pen = 0.0;
        for ((real, fake), &e) in pairs_data.iter().zip(&eps) {
            wass += score_of(fake) - score_of(real);
            let mut x_hat = real.clone();
            for (slot, (&rv, &fv)) in x_hat
                .data_mut()
                .iter_mut()
                .zip(real.data().iter().zip(fake.data()))
            {
                *slot = e * rv + (1.0 - e) * fv;
            }
            let h = 1e-6;
            let mut sq = 0.0;
            for i in 0..x_hat.numel() {
                let mut plus = x_hat.clone();
                plus.data_mut()[i] += h;
                let mut minus = x_hat.clone();
                minus.data_mut()[i] -= h;
                let g = (score_of(&plus) - score_of(&minus)) / (2.0 * h);
                sq += g * g;
            }
            let dev = sq.sqrt() - 1.0;
            pen += dev * dev;
        }
        let oracle = wass / 2.0 + gamma * pen / 2.0;
        assert!(
            (got - oracle).abs() < 1e-4 * got.abs().max(1.0),
            "library {got} vs finite-difference oracle {oracle}"
        );
    }

    #[test]
    fn g_loss_constant_critics() {
        let critic = tiny_critic(CriticAxis::Time, 4);
        let mut zero_store = ParamStore::<f64>::new();
        let mut r = rng(54);
        critic.init(&mut zero_store, &mut r).unwrap();
        for name in critic.param_names() {
            let t = zero_store.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut r = rng(55);
        let fakes: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::from_vec(&[5, 4], (0..20).map(|_| r.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let fake_refs: Vec<&Tensor<f64>> = fakes.iter().collect();

        let zero = wgan_g_loss(&[(&critic as &dyn SpectralCritic<f64>, &zero_store)], &fake_refs)
            .unwrap();
        assert_eq!(zero, 0.0);

        let mut const_store = zero_store.clone();
        const_store.get_mut("d.out.b").unwrap().data_mut()[0] = 1.5;
        let c = wgan_g_loss(&[(&critic as &dyn SpectralCritic<f64>, &const_store)], &fake_refs)
            .unwrap();
        assert!((c + 1.5).abs() < 1e-12, "constant critic {c}");

        let mut second = zero_store.clone();
        second.get_mut("d.out.b").unwrap().data_mut()[0] = -0.25;
        let both = wgan_g_loss(
            &[
                (&critic as &dyn SpectralCritic<f64>, &const_store),
                (&critic as &dyn SpectralCritic<f64>, &second),
            ],
            &fake_refs,
        )
        .unwrap();
        assert!((both + 1.25).abs() < 1e-12, "sum over critics {both}");
    }

    #[test]
    fn g_loss_matches_direct_evaluation_of_linear_critic() {
        let critic = LinearCritic {
            weight_name: "w".into(),
        };
        let mut r = rng(56);
        let w: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::from_vec(&[3, 4], w.clone()).unwrap())
            .unwrap();
        let fakes: Vec<Tensor<f64>> = (0..2)
            .map(|_| {
                Tensor::from_vec(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let fake_refs: Vec<&Tensor<f64>> = fakes.iter().collect();
        let got = wgan_g_loss(&[(&critic as &dyn SpectralCritic<f64>, &store)], &fake_refs)
            .unwrap();
        let mut oracle = 0.0;
        for f in &fakes {
            oracle += f.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        }
        oracle = -oracle / fakes.len() as f64;
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn weights_validate_bounds() {
        assert!(LossWeights::default().validate().is_ok());
        let mut w = LossWeights::default();
        w.lambda_c = 0.0;
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.gp_gamma = -1.0;
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.stft_scales.clear();
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.stft_scales[0].fft_len = 500;
        assert!(w.validate().is_err());
    }
}
