use crate::{Error, Result, Scalar};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

type PlanKey = (TypeId, usize, bool);

/// Process-wide FFT plan cache. Plans are immutable and shared; planning
/// twiddle tables per call would dominate small transforms.
fn plan_cache() -> &'static Mutex<HashMap<PlanKey, Box<dyn Any + Send + Sync>>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Box<dyn Any + Send + Sync>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn plan<T: Scalar>(len: usize, forward: bool) -> Arc<dyn Fft<T>> {
    let key = (TypeId::of::<T>(), len, forward);
    let mut cache = plan_cache().lock().expect("fft plan cache poisoned");
    if let Some(p) = cache.get(&key) {
        return p
            .downcast_ref::<Arc<dyn Fft<T>>>()
            .expect("fft plan type mismatch")
            .clone();
    }
    let mut planner = FftPlanner::<T>::new();
    let p = if forward {
        planner.plan_fft_forward(len)
    } else {
        planner.plan_fft_inverse(len)
    };
    cache.insert(key, Box::new(p.clone()));
    p
}

/// In-place complex FFT, unnormalized (`X_k = sum_t x_t e^{-2pi i k t / N}`).
pub fn fft_forward<T: Scalar>(buf: &mut [Complex<T>]) {
    plan::<T>(buf.len(), true).process(buf);
}

/// In-place complex inverse FFT, unnormalized
/// (`x_t = sum_k X_k e^{+2pi i k t / N}`); divide by `N` to invert
/// [`fft_forward`].
pub fn fft_inverse<T: Scalar>(buf: &mut [Complex<T>]) {
    plan::<T>(buf.len(), false).process(buf);
}

/// Real-input FFT of a fixed power-of-two length, returning the one-sided
/// spectrum of `len/2 + 1` bins, plus the matching inverse.
pub struct RealFft<T> {
    len: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> RealFft<T> {
    pub fn new(len: usize) -> Result<Self> {
        if !len.is_power_of_two() {
            return Err(Error::config(format!(
                "FFT length {len} is not a power of two"
            )));
        }
        Ok(Self {
            len,
            fwd: plan::<T>(len, true),
            inv: plan::<T>(len, false),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// One-sided spectrum of `input`; shorter inputs are zero-padded.
    pub fn forward(&self, input: &[T]) -> Result<Vec<Complex<T>>> {
        if input.len() > self.len {
            return Err(Error::shape(
                "real fft",
                format!("input of {} exceeds FFT length {}", input.len(), self.len),
            ));
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.len];
        for (b, &x) in buf.iter_mut().zip(input.iter()) {
            b.re = x;
        }
        self.fwd.process(&mut buf);
        buf.truncate(self.bins());
        Ok(buf)
    }

    /// Real signal whose one-sided spectrum is `bins` (conjugate symmetry is
    /// imposed, so the imaginary parts of bins 0 and `len/2` are ignored).
    pub fn inverse(&self, bins: &[Complex<T>]) -> Result<Vec<T>> {
        if bins.len() != self.bins() {
            return Err(Error::shape(
                "real inverse fft",
                format!("{} bins, expected {}", bins.len(), self.bins()),
            ));
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.len];
        buf[..bins.len()].copy_from_slice(bins);
        buf[0].im = T::zero();
        buf[self.len / 2].im = T::zero();
        for k in self.bins()..self.len {
            buf[k] = buf[self.len - k].conj();
        }
        self.inv.process(&mut buf);
        let scale = T::one() / T::of_usize(self.len);
        Ok(buf.into_iter().map(|c| c.re * scale).collect())
    }
}
