use super::tape::{BackwardCtx, GradSink, Tape, TapeOp, Var};
use super::tensor::{matmul, Tensor};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug)]
struct Bin {
    kind: BinKind,
    a: Var,
    b: Var,
}

impl<T: Scalar> TapeOp<T> for Bin {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
            BinKind::Max => "maximum",
        }
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        match self.kind {
            BinKind::Add => {
                sink.add(self.a, g.clone())?;
                sink.add(self.b, g.clone())?;
            }
            BinKind::Sub => {
                sink.add(self.a, g.clone())?;
                sink.add(self.b, g.map(|v| -v))?;
            }
            BinKind::Mul => {
                if sink.wants(self.a) {
                    sink.add(self.a, g.zip_map(ctx.value(self.b), |gv, bv| gv * bv)?)?;
                }
                if sink.wants(self.b) {
                    sink.add(self.b, g.zip_map(ctx.value(self.a), |gv, av| gv * av)?)?;
                }
            }
            BinKind::Div => {
                let b = ctx.value(self.b);
                if sink.wants(self.a) {
                    sink.add(self.a, g.zip_map(b, |gv, bv| gv / bv)?)?;
                }
                if sink.wants(self.b) {
                    let y = ctx.out_value();
                    let gy = g.zip_map(y, |gv, yv| gv * yv)?;
                    sink.add(self.b, gy.zip_map(b, |v, bv| -v / bv)?)?;
                }
            }
            BinKind::Max => {
                // Subgradient routed to the winning side, ties to `a`.
                let a = ctx.value(self.a);
                let b = ctx.value(self.b);
                if sink.wants(self.a) {
                    let mut da = g.clone();
                    for ((v, &av), &bv) in
                        da.data_mut().iter_mut().zip(a.data()).zip(b.data())
                    {
                        if av < bv {
                            *v = T::zero();
                        }
                    }
                    sink.add(self.a, da)?;
                }
                if sink.wants(self.b) {
                    let mut db = g.clone();
                    for ((v, &av), &bv) in
                        db.data_mut().iter_mut().zip(a.data()).zip(b.data())
                    {
                        if av >= bv {
                            *v = T::zero();
                        }
                    }
                    sink.add(self.b, db)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum RowKind {
    Add,
    Mul,
    Div,
}

/// Elementwise op between `[rows, c]` and a broadcast `[1, c]` (or `[c]`)
/// row vector.
#[derive(Debug)]
struct RowBin {
    kind: RowKind,
    a: Var,
    r: Var,
}

impl<T: Scalar> TapeOp<T> for RowBin {
    fn name(&self) -> &'static str {
        match self.kind {
            RowKind::Add => "add_row",
            RowKind::Mul => "mul_row",
            RowKind::Div => "div_row",
        }
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.a, self.r]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let a = ctx.value(self.a);
        let r = ctx.value(self.r);
        let (_, c) = a.as_rows();
        let rd = r.data();
        if sink.wants(self.a) {
            let da = match self.kind {
                RowKind::Add => g.clone(),
                RowKind::Mul => {
                    let mut da = g.clone();
                    for (i, v) in da.data_mut().iter_mut().enumerate() {
                        *v = *v * rd[i % c];
                    }
                    da
                }
                RowKind::Div => {
                    let mut da = g.clone();
                    for (i, v) in da.data_mut().iter_mut().enumerate() {
                        *v = *v / rd[i % c];
                    }
                    da
                }
            };
            sink.add(self.a, da)?;
        }
        if sink.wants(self.r) {
            let mut dr = vec![T::zero(); c];
            let ad = a.data();
            let gd = g.data();
            match self.kind {
                RowKind::Add => {
                    for (i, &gv) in gd.iter().enumerate() {
                        dr[i % c] += gv;
                    }
                }
                RowKind::Mul => {
                    for (i, &gv) in gd.iter().enumerate() {
                        dr[i % c] += gv * ad[i];
                    }
                }
                RowKind::Div => {
                    for (i, &gv) in gd.iter().enumerate() {
                        let j = i % c;
                        dr[j] -= gv * ad[i] / (rd[j] * rd[j]);
                    }
                }
            }
            sink.add(self.r, Tensor::from_vec(r.shape(), dr)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Abs,
    ClampMin(f64),
    Affine { mul: f64, add: f64 },
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn apply_unary<T: Scalar>(kind: UnaryKind, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = match kind {
        UnaryKind::Relu => x.map(|v| v.max(T::zero())),
        UnaryKind::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        UnaryKind::Tanh => x.map(|v| v.tanh()),
        UnaryKind::Softplus => x.map(|v| T::of(stable_softplus(v.as_f64()))),
        UnaryKind::Exp => x.map(|v| v.exp()),
        UnaryKind::Ln => {
            if let Some(i) = x.data().iter().position(|&v| v <= T::zero()) {
                return Err(Error::numeric(
                    "ln",
                    format!("non-positive input {} at flat index {i}", x.data()[i]),
                ));
            }
            x.map(|v| v.ln())
        }
        UnaryKind::Sqrt => {
            if let Some(i) = x.data().iter().position(|&v| v < T::zero()) {
                return Err(Error::numeric(
                    "sqrt",
                    format!("negative input {} at flat index {i}", x.data()[i]),
                ));
            }
            x.map(|v| v.sqrt())
        }
        UnaryKind::Abs => x.map(|v| v.abs()),
        UnaryKind::ClampMin(c) => x.map(|v| v.max(T::of(c))),
        UnaryKind::Affine { mul, add } => x.map(|v| v * T::of(mul) + T::of(add)),
    };
    Ok(out)
}

#[derive(Debug)]
struct Unary {
    kind: UnaryKind,
    x: Var,
}

impl<T: Scalar> TapeOp<T> for Unary {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Abs => "abs",
            UnaryKind::ClampMin(_) => "clamp_min",
            UnaryKind::Affine { .. } => "affine",
        }
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
        let y = ctx.out_value();
        let dx = match self.kind {
            UnaryKind::Relu => g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
            UnaryKind::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?,
            UnaryKind::Tanh => g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))?,
            UnaryKind::Softplus => {
                g.zip_map(x, |gv, xv| gv * (T::one() / (T::one() + (-xv).exp())))?
            }
            UnaryKind::Exp => g.zip_map(y, |gv, yv| gv * yv)?,
            UnaryKind::Ln => g.zip_map(x, |gv, xv| gv / xv)?,
            UnaryKind::Sqrt => g.zip_map(y, |gv, yv| gv / (T::of(2.0) * yv))?,
            UnaryKind::Abs => g.zip_map(x, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })?,
            UnaryKind::ClampMin(c) => {
                let c = T::of(c);
                g.zip_map(x, |gv, xv| if xv > c { gv } else { T::zero() })?
            }
            UnaryKind::Affine { mul, .. } => g.map(|gv| gv * T::of(mul)),
        };
        sink.add(self.x, dx)
    }
}

/// Tensor times a single-element tensor.
#[derive(Debug)]
struct MulScalar {
    a: Var,
    s: Var,
}

impl<T: Scalar> TapeOp<T> for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.a, self.s]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let s = ctx.value(self.s).data()[0];
        if sink.wants(self.a) {
            sink.add(self.a, g.map(|gv| gv * s))?;
        }
        if sink.wants(self.s) {
            let a = ctx.value(self.a);
            let acc = g
                .data()
                .iter()
                .zip(a.data().iter())
                .fold(T::zero(), |acc, (&gv, &av)| acc + gv * av);
            let mut ds = Tensor::zeros(ctx.value(self.s).shape());
            ds.data_mut()[0] = acc;
            sink.add(self.s, ds)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct MatMul {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
}

impl<T: Scalar> TapeOp<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let a = ctx.value(self.a);
        let b = ctx.value(self.b);
        if sink.wants(self.a) {
            let da = match (self.ta, self.tb) {
                (false, false) => matmul(g, false, b, true)?,
                (false, true) => matmul(g, false, b, false)?,
                (true, false) => matmul(b, false, g, true)?,
                (true, true) => matmul(b, true, g, true)?,
            };
            sink.add(self.a, da)?;
        }
        if sink.wants(self.b) {
            let db = match (self.ta, self.tb) {
                (false, false) => matmul(a, true, g, false)?,
                (false, true) => matmul(g, true, a, false)?,
                (true, false) => matmul(a, false, g, false)?,
                (true, true) => matmul(g, true, a, true)?,
            };
            sink.add(self.b, db)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct SoftmaxRows {
    x: Var,
}

impl<T: Scalar> TapeOp<T> for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
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
        let y = ctx.out_value();
        let (rows, c) = y.as_rows();
        let mut dx = vec![T::zero(); y.numel()];
        for i in 0..rows {
            let yr = &y.data()[i * c..(i + 1) * c];
            let gr = &g.data()[i * c..(i + 1) * c];
            let dot = yr
                .iter()
                .zip(gr.iter())
                .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
            for j in 0..c {
                dx[i * c + j] = yr[j] * (gr[j] - dot);
            }
        }
        sink.add(self.x, Tensor::from_vec(y.shape(), dx)?)
    }
}

#[derive(Debug)]
struct Transpose2d {
    x: Var,
}

fn transpose_data<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

impl<T: Scalar> TapeOp<T> for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose"
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
        sink.add(self.x, transpose_data(g)?)
    }
}

#[derive(Debug)]
struct Reshape {
    x: Var,
    from: Vec<usize>,
}

impl<T: Scalar> TapeOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
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
        sink.add(self.x, g.reshaped(&self.from)?)
    }
}

#[derive(Debug)]
struct SliceRows {
    x: Var,
    start: usize,
    len: usize,
}

impl<T: Scalar> TapeOp<T> for SliceRows {
    fn name(&self) -> &'static str {
        "slice_rows"
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
        let (_, c) = x.dims2()?;
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut()[self.start * c..(self.start + self.len) * c].copy_from_slice(g.data());
        sink.add(self.x, dx)
    }
}

#[derive(Debug)]
struct SliceCols {
    x: Var,
    start: usize,
    len: usize,
}

impl<T: Scalar> TapeOp<T> for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
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
        let (r, c) = x.dims2()?;
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        let gd = g.data();
        for i in 0..r {
            dxd[i * c + self.start..i * c + self.start + self.len]
                .copy_from_slice(&gd[i * self.len..(i + 1) * self.len]);
        }
        sink.add(self.x, dx)
    }
}

#[derive(Debug)]
struct ConcatCols {
    parts: Vec<Var>,
}

impl<T: Scalar> TapeOp<T> for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn parents(&self) -> Vec<Var> {
        self.parts.clone()
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let (rows, total) = g.dims2()?;
        let gd = g.data();
        let mut offset = 0usize;
        for &p in &self.parts {
            let (_, c) = ctx.value(p).dims2()?;
            if sink.wants(p) {
                let mut dp = vec![T::zero(); rows * c];
                for i in 0..rows {
                    dp[i * c..(i + 1) * c]
                        .copy_from_slice(&gd[i * total + offset..i * total + offset + c]);
                }
                sink.add(p, Tensor::from_vec(&[rows, c], dp)?)?;
            }
            offset += c;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct StackRows {
    parts: Vec<Var>,
}

impl<T: Scalar> TapeOp<T> for StackRows {
    fn name(&self) -> &'static str {
        "stack_rows"
    }

    fn parents(&self) -> Vec<Var> {
        self.parts.clone()
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let gd = g.data();
        let mut offset = 0usize;
        for &p in &self.parts {
            let numel = ctx.value(p).numel();
            if sink.wants(p) {
                sink.add(
                    p,
                    Tensor::from_vec(ctx.value(p).shape(), gd[offset..offset + numel].to_vec())?,
                )?;
            }
            offset += numel;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct RepeatRows {
    x: Var,
}

impl<T: Scalar> TapeOp<T> for RepeatRows {
    fn name(&self) -> &'static str {
        "repeat_rows"
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
        let (_, c) = x.dims2()?;
        let mut dx = vec![T::zero(); c];
        for (i, &gv) in g.data().iter().enumerate() {
            dx[i % c] += gv;
        }
        sink.add(self.x, Tensor::from_vec(x.shape(), dx)?)
    }
}

#[derive(Debug)]
struct UpsampleRows {
    x: Var,
    factor: usize,
}

impl<T: Scalar> TapeOp<T> for UpsampleRows {
    fn name(&self) -> &'static str {
        "upsample_rows"
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
        let (r, c) = x.dims2()?;
        let gd = g.data();
        let mut dx = vec![T::zero(); r * c];
        for i in 0..r * self.factor {
            let src = i / self.factor;
            for j in 0..c {
                dx[src * c + j] += gd[i * c + j];
            }
        }
        sink.add(self.x, Tensor::from_vec(x.shape(), dx)?)
    }
}

/// Mean over all leading dimensions, leaving `[1, c]`.
#[derive(Debug)]
struct MeanRows {
    x: Var,
}

impl<T: Scalar> TapeOp<T> for MeanRows {
    fn name(&self) -> &'static str {
        "mean_rows"
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
        let (rows, c) = x.as_rows();
        let scale = T::one() / T::of_usize(rows);
        let gd = g.data();
        let mut dx = vec![T::zero(); x.numel()];
        for (i, v) in dx.iter_mut().enumerate() {
            *v = gd[i % c] * scale;
        }
        sink.add(self.x, Tensor::from_vec(x.shape(), dx)?)
    }
}

#[derive(Debug)]
struct Reduce {
    x: Var,
    mean: bool,
}

#[derive(Debug)]
struct MaxAll {
    x: Var,
}

impl<T: Scalar> TapeOp<T> for MaxAll {
    fn name(&self) -> &'static str {
        "max_all"
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
        // Subgradient routed to the first maximal element.
        let x = ctx.value(self.x);
        let best = x
            .data()
            .iter()
            .enumerate()
            .fold((0usize, T::neg_infinity()), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut()[best] = g.data()[0];
        sink.add(self.x, dx)
    }
}

impl<T: Scalar> TapeOp<T> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean_all"
        } else {
            "sum_all"
        }
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
        let gv = g.data()[0];
        let scale = if self.mean {
            gv / T::of_usize(x.numel())
        } else {
            gv
        };
        sink.add(self.x, Tensor::filled(x.shape(), scale))
    }
}

impl<T: Scalar> Tape<T> {
    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        if matches!(kind, BinKind::Div) {
            if let Some(i) = self.value(b).data().iter().position(|&v| v == T::zero()) {
                return Err(Error::numeric("div", format!("zero divisor at flat index {i}")));
            }
        }
        let f = match kind {
            BinKind::Add => |x: T, y: T| x + y,
            BinKind::Sub => |x: T, y: T| x - y,
            BinKind::Mul => |x: T, y: T| x * y,
            BinKind::Div => |x: T, y: T| x / y,
            BinKind::Max => |x: T, y: T| x.max(y),
        };
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push_op(value, Box::new(Bin { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    /// Elementwise maximum; gradient follows the winning side (ties to `a`).
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Max, a, b)
    }

    fn row_bin(&mut self, kind: RowKind, a: Var, r: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(r);
        let (_, c) = av.as_rows();
        let (rr, rc) = rv.as_rows();
        if rr != 1 || rc != c {
            return Err(Error::shape(
                "row op",
                format!("row vector {:?} against columns {c}", rv.shape()),
            ));
        }
        if matches!(kind, RowKind::Div) {
            if let Some(i) = rv.data().iter().position(|&v| v == T::zero()) {
                return Err(Error::numeric("div_row", format!("zero divisor at column {i}")));
            }
        }
        let rd = rv.data();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let rj = rd[i % c];
            *v = match kind {
                RowKind::Add => *v + rj,
                RowKind::Mul => *v * rj,
                RowKind::Div => *v / rj,
            };
        }
        self.push_op(out, Box::new(RowBin { kind, a, r }))
    }

    /// Broadcast-add a `[1, c]` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_bin(RowKind::Add, a, r)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_bin(RowKind::Mul, a, r)
    }

    pub fn div_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_bin(RowKind::Div, a, r)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape(
                "mul_scalar",
                format!("scale must be a single element, found {:?}", sv.shape()),
            ));
        }
        let sc = sv.data()[0];
        let value = self.value(a).map(|v| v * sc);
        self.push_op(value, Box::new(MulScalar { a, s }))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let value = apply_unary(kind, self.value(x))?;
        self.push_op(value, Box::new(Unary { kind, x }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(UnaryKind::ClampMin(floor), x)
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        self.unary(UnaryKind::Affine { mul, add }, x)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = xv.as_rows();
        if c == 0 {
            return Err(Error::shape("softmax_rows", "empty rows"));
        }
        let xd = xv.data();
        let mut out = vec![T::zero(); xv.numel()];
        for i in 0..rows {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / denom;
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        self.push_op(value, Box::new(SoftmaxRows { x }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul(self.value(a), ta, self.value(b), tb)?;
        self.push_op(value, Box::new(MatMul { a, b, ta, tb }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = transpose_data(self.value(x))?;
        self.push_op(value, Box::new(Transpose2d { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(x).shape().to_vec();
        let value = self.value(x).reshaped(shape)?;
        self.push_op(value, Box::new(Reshape { x, from }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let value = Tensor::from_vec(&[len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        self.push_op(value, Box::new(SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let xd = xv.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_vec(&[r, len], out)?;
        self.push_op(value, Box::new(SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut cols = 0usize;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{r} rows against {rows}"),
                ));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.value(p).dims2().unwrap();
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(&[rows, cols], out)?;
        self.push_op(
            value,
            Box::new(ConcatCols {
                parts: parts.to_vec(),
            }),
        )
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack_rows", "no parts"));
        }
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0usize;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(
                    "stack_rows",
                    format!("{c} columns against {cols}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[rows, cols], out)?;
        self.push_op(
            value,
            Box::new(StackRows {
                parts: parts.to_vec(),
            }),
        )
    }

    /// Broadcast a `[1, c]` row to `[n, c]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if r != 1 || n == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("need [1, c] input and n > 0, found {:?} and {n}", xv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        self.push_op(value, Box::new(RepeatRows { x }))
    }

    /// Repeat each row `factor` times, stretching `[n, c]` to `[n*factor, c]`.
    pub fn upsample_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if factor == 0 {
            return Err(Error::shape("upsample_rows", "zero factor"));
        }
        let xd = xv.data();
        let mut out = Vec::with_capacity(r * factor * c);
        for i in 0..r {
            for _ in 0..factor {
                out.extend_from_slice(&xd[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(&[r * factor, c], out)?;
        self.push_op(value, Box::new(UpsampleRows { x, factor }))
    }

    /// Mean over all leading dimensions: `[.., c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape(
                "mean_rows",
                format!("need rank >= 2, found {:?}", xv.shape()),
            ));
        }
        let (rows, c) = xv.as_rows();
        let xd = xv.data();
        let mut out = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            out[i % c] += v;
        }
        let scale = T::one() / T::of_usize(rows);
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        let value = Tensor::from_vec(&[1, c], out)?;
        self.push_op(value, Box::new(MeanRows { x }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push_op(Tensor::scalar(s), Box::new(Reduce { x, mean: false }))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::of_usize(xv.numel());
        self.push_op(Tensor::scalar(s), Box::new(Reduce { x, mean: true }))
    }

    /// Scalar maximum over all elements; gradient goes to the first argmax.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::shape("max_all", "empty tensor"));
        }
        let m = xv
            .data()
            .iter()
            .fold(T::neg_infinity(), |acc, &v| acc.max(v));
        self.push_op(Tensor::scalar(m), Box::new(MaxAll { x }))
    }
}
