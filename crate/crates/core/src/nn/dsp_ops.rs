//! Signal-processing primitives on the tape: framing, magnitude spectra,
//! and full convolution, each with analytic adjoints. These are the bridge
//! between the waveform/spectral domain and the differentiable graph.

use num_complex::Complex;

use super::tape::{BackwardCtx, GradSink, Tape, TapeOp, Var};
use super::tensor::Tensor;
use crate::signal::{fft_forward, fft_inverse, RealFft};
use crate::{Error, Result, Scalar};

/// Slice a waveform `[n]` into `ceil(n/shift)` windowed frames `[f, len]`,
/// zero-padding past the end (same framing rule as the spectral front end).
#[derive(Debug)]
struct FramesWindowed<T> {
    x: Var,
    frame_len: usize,
    shift: usize,
    window: Vec<T>,
}

fn frame_count(n: usize, shift: usize) -> usize {
    n.div_ceil(shift)
}

fn frames_forward<T: Scalar>(
    x: &Tensor<T>,
    frame_len: usize,
    shift: usize,
    window: &[T],
) -> Result<Tensor<T>> {
    if x.rank() != 1 || x.numel() == 0 {
        return Err(Error::shape(
            "frames",
            format!("need a non-empty rank-1 waveform, found {:?}", x.shape()),
        ));
    }
    if shift == 0 || frame_len == 0 || window.len() != frame_len {
        return Err(Error::config("frames: frame/shift/window sizes inconsistent"));
    }
    let n = x.numel();
    let f = frame_count(n, shift);
    let xd = x.data();
    let mut out = vec![T::zero(); f * frame_len];
    for fi in 0..f {
        let start = fi * shift;
        for t in 0..frame_len.min(n.saturating_sub(start)) {
            out[fi * frame_len + t] = xd[start + t] * window[t];
        }
    }
    Tensor::from_vec(&[f, frame_len], out)
}

impl<T: Scalar> TapeOp<T> for FramesWindowed<T> {
    fn name(&self) -> &'static str {
        "frames_windowed"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let n = ctx.value(self.x).numel();
        let f = frame_count(n, self.shift);
        let gd = g.data();
        let mut dx = vec![T::zero(); n];
        for fi in 0..f {
            let start = fi * self.shift;
            for t in 0..self.frame_len.min(n.saturating_sub(start)) {
                dx[start + t] += gd[fi * self.frame_len + t] * self.window[t];
            }
        }
        sink.add(self.x, Tensor::from_vec(&[n], dx)?)
    }
}

/// Per-row real-FFT magnitude, floored: rows `[f, len]` are zero-padded to
/// `fft_len` and mapped to `max(|X_k|, floor)` for k = 0..fft_len/2.
///
/// Adjoint: bins at the floor pass no gradient; above it,
/// d|X_k|/dx_t = Re(conj(X_k)/|X_k| . e^{-2 pi i k t / fft_len}), summed over
/// kept bins via one unnormalized inverse FFT per row.
#[derive(Debug)]
struct RfftMagClamped {
    x: Var,
    fft_len: usize,
    floor: f64,
}

fn rfft_mag_forward<T: Scalar>(x: &Tensor<T>, fft_len: usize, floor: f64) -> Result<Tensor<T>> {
    let (f, len) = x.dims2()?;
    if len > fft_len {
        return Err(Error::shape(
            "rfft_mag",
            format!("frame length {len} exceeds fft size {fft_len}"),
        ));
    }
    let plan = RealFft::<T>::new(fft_len)?;
    let bins = plan.bins();
    let floor_t = T::of(floor);
    let mut out = Vec::with_capacity(f * bins);
    for fi in 0..f {
        let spec = plan.forward(&x.data()[fi * len..(fi + 1) * len])?;
        out.extend(spec.iter().map(|c| c.norm().max(floor_t)));
    }
    Tensor::from_vec(&[f, bins], out)
}

impl<T: Scalar> TapeOp<T> for RfftMagClamped {
    fn name(&self) -> &'static str {
        "rfft_mag"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let x = ctx.value(self.x);
        let (f, len) = x.dims2()?;
        let plan = RealFft::<T>::new(self.fft_len)?;
        let bins = plan.bins();
        let floor_t = T::of(self.floor);
        let gd = g.data();
        let mut dx = Vec::with_capacity(f * len);
        let mut full = vec![Complex::new(T::zero(), T::zero()); self.fft_len];
        for fi in 0..f {
            let spec = plan.forward(&x.data()[fi * len..(fi + 1) * len])?;
            for v in full.iter_mut() {
                *v = Complex::new(T::zero(), T::zero());
            }
            for (k, c) in spec.iter().enumerate() {
                let mag = c.norm();
                if mag > floor_t {
                    let gv = gd[fi * bins + k];
                    full[k] = Complex::new(c.re / mag * gv, c.im / mag * gv);
                }
            }
            fft_inverse(&mut full);
            dx.extend(full[..len].iter().map(|c| c.re));
        }
        sink.add(self.x, Tensor::from_vec(&[f, len], dx)?)
    }
}

/// Truncated full convolution: `y[t] = sum_tau r[tau] * x[t - tau]` for
/// t = 0..x.len(). Both operands are rank-1 vars; adjoints are the matching
/// cross-correlations. Forward and backward run through one complex FFT of
/// the next power of two covering `n + m - 1`.
#[derive(Debug)]
struct ConvTrunc {
    x: Var,
    r: Var,
}

fn conv_fft_len(n: usize, m: usize) -> usize {
    (n + m - 1).next_power_of_two()
}

fn conv_trunc_forward<T: Scalar>(x: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 1 || r.rank() != 1 || x.numel() == 0 || r.numel() == 0 {
        return Err(Error::shape(
            "conv_trunc",
            format!("need rank-1 operands, found {:?} and {:?}", x.shape(), r.shape()),
        ));
    }
    let (n, m) = (x.numel(), r.numel());
    let size = conv_fft_len(n, m);
    let mut fx: Vec<Complex<T>> = x
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(size)
        .collect();
    let mut fr: Vec<Complex<T>> = r
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(size)
        .collect();
    fft_forward(&mut fx);
    fft_forward(&mut fr);
    for (a, b) in fx.iter_mut().zip(fr.iter()) {
        *a *= *b;
    }
    fft_inverse(&mut fx);
    let scale = T::one() / T::of_usize(size);
    Tensor::from_vec(&[n], fx[..n].iter().map(|c| c.re * scale).collect())
}

/// Linear cross-correlation `c[tau] = sum_t g[t] * h[t - tau]` for
/// tau = 0..out_len, with g of length `gn` and h of length `hn`.
fn correlate<T: Scalar>(g: &[T], h: &[T], out_len: usize) -> Vec<T> {
    let size = conv_fft_len(g.len(), h.len());
    let mut fg: Vec<Complex<T>> = g
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(size)
        .collect();
    let mut fh: Vec<Complex<T>> = h
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(size)
        .collect();
    fft_forward(&mut fg);
    fft_forward(&mut fh);
    for (a, b) in fg.iter_mut().zip(fh.iter()) {
        *a *= b.conj();
    }
    fft_inverse(&mut fg);
    let scale = T::one() / T::of_usize(size);
    fg[..out_len].iter().map(|c| c.re * scale).collect()
}

impl<T: Scalar> TapeOp<T> for ConvTrunc {
    fn name(&self) -> &'static str {
        "conv_trunc"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x, self.r]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let x = ctx.value(self.x);
        let r = ctx.value(self.r);
        let (n, m) = (x.numel(), r.numel());
        if sink.wants(self.r) {
            // dr[tau] = sum_t g[t] x[t - tau]
            let dr = correlate(g.data(), x.data(), m);
            sink.add(self.r, Tensor::from_vec(&[m], dr)?)?;
        }
        if sink.wants(self.x) {
            // dx[s] = sum_t g[t] r[t - s]
            let dx = correlate(g.data(), r.data(), n);
            sink.add(self.x, Tensor::from_vec(&[n], dx)?)?;
        }
        Ok(())
    }
}

/// Reverse row order of a `[n, c]` tensor; self-adjoint.
#[derive(Debug)]
struct ReverseRows {
    x: Var,
}

fn reverse_rows_data<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    for i in (0..n).rev() {
        out.extend_from_slice(&xd[i * c..(i + 1) * c]);
    }
    Tensor::from_vec(&[n, c], out)
}

impl<T: Scalar> TapeOp<T> for ReverseRows {
    fn name(&self) -> &'static str {
        "reverse_rows"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(
        &self,
        _ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        sink.add(self.x, reverse_rows_data(g)?)
    }
}

/// Windowed, zero-padded, floored magnitude spectrogram of one waveform at
/// one analysis scale. The tape path (`frames_windowed` + `rfft_mag`)
/// computes exactly this, so the loss's constant reference side and its pure
/// evaluation stay consistent with the differentiable side.
pub(crate) fn scale_magnitudes<T: Scalar>(
    wave: &[T],
    frame_len: usize,
    shift: usize,
    fft_len: usize,
    window: &[T],
    floor: f64,
) -> Result<Tensor<T>> {
    let x = Tensor::from_vec(&[wave.len()], wave.to_vec())?;
    let framed = frames_forward(&x, frame_len, shift, window)?;
    rfft_mag_forward(&framed, fft_len, floor)
}

impl<T: Scalar> Tape<T> {
    pub fn frames_windowed(
        &mut self,
        x: Var,
        frame_len: usize,
        shift: usize,
        window: Vec<T>,
    ) -> Result<Var> {
        let value = frames_forward(self.value(x), frame_len, shift, &window)?;
        self.push_op(
            value,
            Box::new(FramesWindowed {
                x,
                frame_len,
                shift,
                window,
            }),
        )
    }

    pub fn rfft_mag(&mut self, x: Var, fft_len: usize, floor: f64) -> Result<Var> {
        if floor <= 0.0 {
            return Err(Error::config("rfft_mag floor must be positive"));
        }
        let value = rfft_mag_forward(self.value(x), fft_len, floor)?;
        self.push_op(value, Box::new(RfftMagClamped { x, fft_len, floor }))
    }

    pub fn conv_trunc(&mut self, x: Var, r: Var) -> Result<Var> {
        let value = conv_trunc_forward(self.value(x), self.value(r))?;
        self.push_op(value, Box::new(ConvTrunc { x, r }))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let value = reverse_rows_data(self.value(x))?;
        self.push_op(value, Box::new(ReverseRows { x }))
    }
}
