use super::tape::{BackwardCtx, GradSink, Tape, TapeOp, Var};
use super::tensor::{matmul, Tensor};
use crate::{Error, Result, Scalar};

/// Geometry of a 1-D convolution along the row (time or frequency) axis.
/// Padding is `(width-1)/2` on both sides, so stride 1 preserves length.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dGeom {
    pub width: usize,
    pub stride: usize,
}

impl Conv1dGeom {
    pub fn pad(&self) -> usize {
        (self.width - 1) / 2
    }

    pub fn out_len(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.pad();
        if self.stride == 0 || self.width == 0 {
            return Err(Error::config("conv1d stride/width must be positive"));
        }
        if padded < self.width {
            return Err(Error::shape(
                "conv1d",
                format!("{n} rows too short for width {}", self.width),
            ));
        }
        Ok((padded - self.width) / self.stride + 1)
    }
}

/// `[n, cin] -> [out_len, cin*width]` patch matrix; out-of-range rows are
/// zero.
fn im2col<T: Scalar>(x: &[T], n: usize, cin: usize, geom: Conv1dGeom) -> Result<Tensor<T>> {
    let out = geom.out_len(n)?;
    let pad = geom.pad() as isize;
    let w = geom.width;
    let mut cols = vec![T::zero(); out * cin * w];
    for o in 0..out {
        let base = o * cin * w;
        let start = (o * geom.stride) as isize - pad;
        for t in 0..w {
            let r = start + t as isize;
            if r < 0 || r >= n as isize {
                continue;
            }
            let src = &x[r as usize * cin..(r as usize + 1) * cin];
            for ci in 0..cin {
                cols[base + ci * w + t] = src[ci];
            }
        }
    }
    Tensor::from_vec(&[out, cin * w], cols)
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto rows.
fn col2im<T: Scalar>(cols: &[T], n: usize, cin: usize, geom: Conv1dGeom, out: usize) -> Vec<T> {
    let pad = geom.pad() as isize;
    let w = geom.width;
    let mut x = vec![T::zero(); n * cin];
    for o in 0..out {
        let base = o * cin * w;
        let start = (o * geom.stride) as isize - pad;
        for t in 0..w {
            let r = start + t as isize;
            if r < 0 || r >= n as isize {
                continue;
            }
            for ci in 0..cin {
                x[r as usize * cin + ci] += cols[base + ci * w + t];
            }
        }
    }
    x
}

/// Rows/batches view of a rank-2 or rank-3 input: `(batches, rows, cols)`.
fn batched_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((1, n, c)),
        [b, n, c] => Ok((b, n, c)),
        _ => Err(Error::shape(
            "conv1d",
            format!("need rank 2 or 3 input, found {:?}", x.shape()),
        )),
    }
}

fn weight_matrix<T: Scalar>(w: &Tensor<T>) -> Result<(Tensor<T>, usize, usize, usize)> {
    let (cout, cin, width) = w.dims3().map_err(|_| {
        Error::shape(
            "conv1d",
            format!("weights must be [cout, cin, width], found {:?}", w.shape()),
        )
    })?;
    Ok((w.reshaped(&[cout, cin * width])?, cout, cin, width))
}

fn bias_vector<T: Scalar>(b: &Tensor<T>, cout: usize) -> Result<()> {
    let (r, c) = b.as_rows();
    if r != 1 || c != cout {
        return Err(Error::shape(
            "conv1d",
            format!("bias {:?} against {cout} output channels", b.shape()),
        ));
    }
    Ok(())
}

#[derive(Debug)]
struct Conv1d {
    x: Var,
    w: Var,
    b: Var,
    geom: Conv1dGeom,
}

fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geom: Conv1dGeom,
) -> Result<Tensor<T>> {
    let (batches, n, cin_x) = batched_dims(x)?;
    let (w2, cout, cin, _) = weight_matrix(w)?;
    bias_vector(b, cout)?;
    if cin_x != cin {
        return Err(Error::shape(
            "conv1d",
            format!("input has {cin_x} channels, weights expect {cin}"),
        ));
    }
    let out = geom.out_len(n)?;
    let mut data = Vec::with_capacity(batches * out * cout);
    for bi in 0..batches {
        let xb = &x.data()[bi * n * cin..(bi + 1) * n * cin];
        let cols = im2col(xb, n, cin, geom)?;
        let y = matmul(&cols, false, &w2, true)?;
        let bd = b.data();
        for (i, &v) in y.data().iter().enumerate() {
            data.push(v + bd[i % cout]);
        }
    }
    if x.rank() == 2 {
        Tensor::from_vec(&[out, cout], data)
    } else {
        Tensor::from_vec(&[batches, out, cout], data)
    }
}

impl<T: Scalar> TapeOp<T> for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x, self.w, self.b]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let x = ctx.value(self.x);
        let w = ctx.value(self.w);
        let (batches, n, cin) = batched_dims(x)?;
        let (w2, cout, _, width) = weight_matrix(w)?;
        let out = self.geom.out_len(n)?;

        let mut dw2 = Tensor::zeros(&[cout, cin * width]);
        let mut db = vec![T::zero(); cout];
        let mut dx = Vec::with_capacity(x.numel());
        for bi in 0..batches {
            let gb = Tensor::from_vec(
                &[out, cout],
                g.data()[bi * out * cout..(bi + 1) * out * cout].to_vec(),
            )?;
            if sink.wants(self.x) {
                let dcols = matmul(&gb, false, &w2, false)?;
                dx.extend(col2im(dcols.data(), n, cin, self.geom, out));
            }
            if sink.wants(self.w) {
                let xb = &x.data()[bi * n * cin..(bi + 1) * n * cin];
                let cols = im2col(xb, n, cin, self.geom)?;
                dw2.add_in_place(&matmul(&gb, true, &cols, false)?)?;
            }
            if sink.wants(self.b) {
                for (i, &gv) in gb.data().iter().enumerate() {
                    db[i % cout] += gv;
                }
            }
        }
        if sink.wants(self.x) {
            sink.add(self.x, Tensor::from_vec(x.shape(), dx)?)?;
        }
        if sink.wants(self.w) {
            sink.add(self.w, dw2.reshaped(w.shape())?)?;
        }
        if sink.wants(self.b) {
            sink.add(
                self.b,
                Tensor::from_vec(ctx.value(self.b).shape(), db)?,
            )?;
        }
        Ok(())
    }
}

/// Maps an output-space gradient back to input space through a conv's
/// weights: the vector-Jacobian product of [`Tape::conv1d`] with respect to
/// its input, expressed as a first-class differentiable op so gradient
/// penalties can be trained.
#[derive(Debug)]
struct Conv1dInputAdjoint {
    gy: Var,
    w: Var,
    geom: Conv1dGeom,
    n_in: usize,
}

fn conv1d_input_adjoint_forward<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    geom: Conv1dGeom,
    n_in: usize,
) -> Result<Tensor<T>> {
    let (batches, out, cout_g) = batched_dims(gy)?;
    let (w2, cout, cin, _) = weight_matrix(w)?;
    if cout_g != cout {
        return Err(Error::shape(
            "conv1d_input_adjoint",
            format!("gradient has {cout_g} channels, weights {cout}"),
        ));
    }
    if out != geom.out_len(n_in)? {
        return Err(Error::shape(
            "conv1d_input_adjoint",
            format!("{out} gradient rows against conv output {}", geom.out_len(n_in)?),
        ));
    }
    let mut data = Vec::with_capacity(batches * n_in * cin);
    for bi in 0..batches {
        let gb = Tensor::from_vec(
            &[out, cout],
            gy.data()[bi * out * cout..(bi + 1) * out * cout].to_vec(),
        )?;
        let dcols = matmul(&gb, false, &w2, false)?;
        data.extend(col2im(dcols.data(), n_in, cin, geom, out));
    }
    if gy.rank() == 2 {
        Tensor::from_vec(&[n_in, cin], data)
    } else {
        Tensor::from_vec(&[batches, n_in, cin], data)
    }
}

impl<T: Scalar> TapeOp<T> for Conv1dInputAdjoint {
    fn name(&self) -> &'static str {
        "conv1d_input_adjoint"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.gy, self.w]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        h: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let gy = ctx.value(self.gy);
        let w = ctx.value(self.w);
        let (batches, out, cout) = batched_dims(gy)?;
        let (w2, _, cin, width) = weight_matrix(w)?;

        let mut dw2 = Tensor::zeros(&[cout, cin * width]);
        let mut dgy = Vec::with_capacity(gy.numel());
        for bi in 0..batches {
            let hb = &h.data()[bi * self.n_in * cin..(bi + 1) * self.n_in * cin];
            let hcols = im2col(hb, self.n_in, cin, self.geom)?;
            if sink.wants(self.gy) {
                dgy.extend(matmul(&hcols, false, &w2, true)?.into_data());
            }
            if sink.wants(self.w) {
                let gb = Tensor::from_vec(
                    &[out, cout],
                    gy.data()[bi * out * cout..(bi + 1) * out * cout].to_vec(),
                )?;
                dw2.add_in_place(&matmul(&gb, true, &hcols, false)?)?;
            }
        }
        if sink.wants(self.gy) {
            sink.add(self.gy, Tensor::from_vec(gy.shape(), dgy)?)?;
        }
        if sink.wants(self.w) {
            sink.add(self.w, dw2.reshaped(w.shape())?)?;
        }
        Ok(())
    }
}

/// 2-D convolution over `[cin, h, w]` maps with `[cout, cin, kh, kw]`
/// filters; padding `(kh-1)/2, (kw-1)/2`.
#[derive(Debug)]
struct Conv2d {
    x: Var,
    w: Var,
    b: Var,
    stride: (usize, usize),
}

fn conv2d_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (cin, h, wd) = x.dims3()?;
    let &[cout, cin_w, kh, kw] = &w.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be [cout, cin, kh, kw], found {:?}", w.shape()),
        ));
    };
    if cin_w != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weights expect {cin_w}"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::config("conv2d stride must be positive"));
    }
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let oh = (h + 2 * ph).checked_sub(kh).map(|v| v / stride.0 + 1);
    let ow = (wd + 2 * pw).checked_sub(kw).map(|v| v / stride.1 + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((cin, h, wd, cout, kh, kw, oh, ow)),
        _ => Err(Error::shape(
            "conv2d",
            format!("{h}x{wd} input too small for {kh}x{kw} kernel"),
        )),
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (cin, h, wd, cout, kh, kw, oh, ow) = conv2d_dims(x, w, stride)?;
    bias_vector(b, cout)?;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bd[co];
                for ci in 0..cin {
                    for u in 0..kh {
                        let r = (i * stride.0 + u) as isize - ph as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let c = (j * stride.1 + v) as isize - pw as isize;
                            if c < 0 || c >= wd as isize {
                                continue;
                            }
                            acc += xd[ci * h * wd + r as usize * wd + c as usize]
                                * wdta[((co * cin + ci) * kh + u) * kw + v];
                        }
                    }
                }
                out[co * oh * ow + i * ow + j] = acc;
            }
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

impl<T: Scalar> TapeOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x, self.w, self.b]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let x = ctx.value(self.x);
        let w = ctx.value(self.w);
        let (cin, h, wd, cout, kh, kw, oh, ow) = conv2d_dims(x, w, self.stride)?;
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let xd = x.data();
        let wdta = w.data();
        let gd = g.data();
        let mut dx = vec![T::zero(); x.numel()];
        let mut dw = vec![T::zero(); w.numel()];
        let mut db = vec![T::zero(); cout];
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let gv = gd[co * oh * ow + i * ow + j];
                    db[co] += gv;
                    for ci in 0..cin {
                        for u in 0..kh {
                            let r = (i * self.stride.0 + u) as isize - ph as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let c = (j * self.stride.1 + v) as isize - pw as isize;
                                if c < 0 || c >= wd as isize {
                                    continue;
                                }
                                let xi = ci * h * wd + r as usize * wd + c as usize;
                                let wi = ((co * cin + ci) * kh + u) * kw + v;
                                dx[xi] += gv * wdta[wi];
                                dw[wi] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
        if sink.wants(self.x) {
            sink.add(self.x, Tensor::from_vec(x.shape(), dx)?)?;
        }
        if sink.wants(self.w) {
            sink.add(self.w, Tensor::from_vec(w.shape(), dw)?)?;
        }
        if sink.wants(self.b) {
            sink.add(self.b, Tensor::from_vec(ctx.value(self.b).shape(), db)?)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tape<T> {
    /// 1-D convolution along rows: `[n, cin]` (or batched `[b, n, cin]`)
    /// with `[cout, cin, width]` weights and `[cout]` bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, width: usize, stride: usize) -> Result<Var> {
        let geom = Conv1dGeom { width, stride };
        let wv = self.value(w);
        if wv.shape().last() != Some(&width) {
            return Err(Error::shape(
                "conv1d",
                format!("weights {:?} against declared width {width}", wv.shape()),
            ));
        }
        let value = conv1d_forward(self.value(x), wv, self.value(b), geom)?;
        self.push_op(value, Box::new(Conv1d { x, w, b, geom }))
    }

    /// Differentiable vector-Jacobian product of a conv1d with respect to
    /// its input: routes `gy` (an output-space gradient) back to the
    /// `n_in`-row input space through weights `w`.
    pub fn conv1d_input_adjoint(
        &mut self,
        gy: Var,
        w: Var,
        width: usize,
        stride: usize,
        n_in: usize,
    ) -> Result<Var> {
        let geom = Conv1dGeom { width, stride };
        let value = conv1d_input_adjoint_forward(self.value(gy), self.value(w), geom, n_in)?;
        self.push_op(value, Box::new(Conv1dInputAdjoint { gy, w, geom, n_in }))
    }

    /// 2-D convolution: `[cin, h, w]` with `[cout, cin, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        self.push_op(value, Box::new(Conv2d { x, w, b, stride }))
    }
}
