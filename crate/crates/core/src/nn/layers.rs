//! Layer vocabulary: dense, GRU/BiGRU (fused sequence op), multi-head
//! attention over trainable templates, and the spectral critics used by the
//! adversarial objective. Parameters live in a [`ParamStore`] under
//! dot-separated prefixes and are wired onto a [`Tape`] per forward pass.

use rand::Rng;

use super::store::{BoundParams, ParamStore};
use super::tape::{BackwardCtx, GradSink, Tape, TapeOp, Var};
use super::tensor::{matmul, Tensor};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
}

/// Declarative description of one layer; the model modules assemble these
/// into stacks that drive both initialization and the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inp: usize, out: usize, zero_init: bool },
    Conv1d { cin: usize, cout: usize, width: usize, stride: usize },
    Conv2d { cin: usize, cout: usize, kh: usize, kw: usize, sh: usize, sw: usize },
    Gru { inp: usize, hidden: usize },
    BiGru { inp: usize, hidden: usize },
    MhaTemplates { dim: usize, heads: usize, templates: usize },
    AvgPoolTime,
    Activation(ActivationKind),
    Upsample { factor: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inp, out, .. } => inp > 0 && out > 0,
            LayerSpec::Conv1d { cin, cout, width, stride } => {
                cin > 0 && cout > 0 && width > 0 && stride > 0
            }
            LayerSpec::Conv2d { cin, cout, kh, kw, sh, sw } => {
                cin > 0 && cout > 0 && kh > 0 && kw > 0 && sh > 0 && sw > 0
            }
            LayerSpec::Gru { inp, hidden } | LayerSpec::BiGru { inp, hidden } => {
                inp > 0 && hidden > 0
            }
            LayerSpec::MhaTemplates { dim, heads, templates } => {
                dim > 0 && heads > 0 && templates > 0 && dim % heads == 0
            }
            LayerSpec::AvgPoolTime => true,
            LayerSpec::Activation(_) => true,
            LayerSpec::Upsample { factor } => factor > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid layer hyperparameters: {self:?}")))
        }
    }
}

fn uniform_tensor<T: Scalar>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let s = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(rng.random_range(-s..s))).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

fn init_gru_dir<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    inp: usize,
    hidden: usize,
) -> Result<()> {
    store.insert(
        format!("{prefix}.w_ih"),
        uniform_tensor(rng, &[3 * hidden, inp], hidden),
    )?;
    store.insert(
        format!("{prefix}.w_hh"),
        uniform_tensor(rng, &[3 * hidden, hidden], hidden),
    )?;
    store.insert(
        format!("{prefix}.b_ih"),
        uniform_tensor(rng, &[1, 3 * hidden], hidden),
    )?;
    store.insert(
        format!("{prefix}.b_hh"),
        uniform_tensor(rng, &[1, 3 * hidden], hidden),
    )?;
    Ok(())
}

/// Create the parameters for `spec` under `prefix`, drawing from `rng` in a
/// fixed order (uniform in +/- sqrt(1/fan_in)).
pub fn init_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    spec: &LayerSpec,
) -> Result<()> {
    spec.validate()?;
    match *spec {
        LayerSpec::Dense { inp, out, zero_init } => {
            let (w, b) = if zero_init {
                (Tensor::zeros(&[out, inp]), Tensor::zeros(&[1, out]))
            } else {
                (
                    uniform_tensor(rng, &[out, inp], inp),
                    uniform_tensor(rng, &[1, out], inp),
                )
            };
            store.insert(format!("{prefix}.w"), w)?;
            store.insert(format!("{prefix}.b"), b)?;
        }
        LayerSpec::Conv1d { cin, cout, width, .. } => {
            store.insert(
                format!("{prefix}.w"),
                uniform_tensor(rng, &[cout, cin, width], cin * width),
            )?;
            store.insert(
                format!("{prefix}.b"),
                uniform_tensor(rng, &[1, cout], cin * width),
            )?;
        }
        LayerSpec::Conv2d { cin, cout, kh, kw, .. } => {
            store.insert(
                format!("{prefix}.w"),
                uniform_tensor(rng, &[cout, cin, kh, kw], cin * kh * kw),
            )?;
            store.insert(
                format!("{prefix}.b"),
                uniform_tensor(rng, &[1, cout], cin * kh * kw),
            )?;
        }
        LayerSpec::Gru { inp, hidden } => init_gru_dir(store, rng, prefix, inp, hidden)?,
        LayerSpec::BiGru { inp, hidden } => {
            init_gru_dir(store, rng, &format!("{prefix}.fwd"), inp, hidden)?;
            init_gru_dir(store, rng, &format!("{prefix}.bwd"), inp, hidden)?;
        }
        LayerSpec::MhaTemplates { dim, templates, .. } => {
            store.insert(
                format!("{prefix}.templates"),
                uniform_tensor(rng, &[templates, dim], dim),
            )?;
            for proj in ["wq", "wk", "wv", "wo"] {
                store.insert(
                    format!("{prefix}.{proj}"),
                    uniform_tensor(rng, &[dim, dim], dim),
                )?;
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                store.insert(format!("{prefix}.{bias}"), uniform_tensor(rng, &[1, dim], dim))?;
            }
        }
        LayerSpec::AvgPoolTime | LayerSpec::Activation(_) | LayerSpec::Upsample { .. } => {}
    }
    Ok(())
}

/// Apply `spec` on the tape using parameters bound under `prefix`.
pub fn apply_layer<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    spec: &LayerSpec,
    x: Var,
) -> Result<Var> {
    match *spec {
        LayerSpec::Dense { .. } => dense(tape, params, prefix, x),
        LayerSpec::Conv1d { width, stride, .. } => {
            let w = params.var(&format!("{prefix}.w"))?;
            let b = params.var(&format!("{prefix}.b"))?;
            tape.conv1d(x, w, b, width, stride)
        }
        LayerSpec::Conv2d { sh, sw, .. } => {
            let w = params.var(&format!("{prefix}.w"))?;
            let b = params.var(&format!("{prefix}.b"))?;
            tape.conv2d(x, w, b, (sh, sw))
        }
        LayerSpec::Gru { .. } => gru_seq(tape, params, prefix, x),
        LayerSpec::BiGru { .. } => bigru(tape, params, prefix, x),
        LayerSpec::MhaTemplates { heads, .. } => {
            Ok(mha_over_templates(tape, params, prefix, x, heads)?.0)
        }
        LayerSpec::AvgPoolTime => tape.mean_rows(x),
        LayerSpec::Activation(kind) => match kind {
            ActivationKind::Relu => tape.relu(x),
            ActivationKind::Sigmoid => tape.sigmoid(x),
            ActivationKind::Tanh => tape.tanh(x),
            ActivationKind::Softplus => tape.softplus(x),
        },
        LayerSpec::Upsample { factor } => tape.upsample_rows(x, factor),
    }
}

/// `y = x . W^T + b` with `W` under `{prefix}.w` and `b` under `{prefix}.b`.
pub fn dense<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = params.var(&format!("{prefix}.w"))?;
    let b = params.var(&format!("{prefix}.b"))?;
    let y = tape.matmul_ex(x, false, w, true)?;
    tape.add_row(y, b)
}

struct GruCache<T> {
    /// `h_0..h_n`; row t is the state entering step t.
    h_all: Tensor<T>,
    r: Tensor<T>,
    z: Tensor<T>,
    n: Tensor<T>,
    /// Recurrent candidate pre-gate `W_hn h + b_hn` per step.
    ghn: Tensor<T>,
}

fn gru_dims<T: Scalar>(
    x: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    b_ih: &Tensor<T>,
    b_hh: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, inp) = x.dims2()?;
    let (three_h, in_w) = w_ih.dims2()?;
    let (three_h2, h) = w_hh.dims2()?;
    if three_h != 3 * h || three_h2 != 3 * h || in_w != inp {
        return Err(Error::shape(
            "gru",
            format!(
                "weights {:?}/{:?} against input width {inp}",
                w_ih.shape(),
                w_hh.shape()
            ),
        ));
    }
    for (b, what) in [(b_ih, "b_ih"), (b_hh, "b_hh")] {
        let (r, c) = b.dims2()?;
        if r != 1 || c != 3 * h {
            return Err(Error::shape("gru", format!("{what} shape {:?}", b.shape())));
        }
    }
    Ok((n, inp, h))
}

/// Run the standard GRU recurrence over all rows of `x`, keeping the
/// intermediate gates for backpropagation through time.
fn gru_apply<T: Scalar>(
    x: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    b_ih: &Tensor<T>,
    b_hh: &Tensor<T>,
) -> Result<(Tensor<T>, GruCache<T>)> {
    let (n, _, h) = gru_dims(x, w_ih, w_hh, b_ih, b_hh)?;
    // Input-side gates for the whole sequence in one multiply.
    let mut gx = matmul(x, false, w_ih, true)?;
    {
        let bd = b_ih.data();
        let g = gx.data_mut();
        for t in 0..n {
            for j in 0..3 * h {
                g[t * 3 * h + j] += bd[j];
            }
        }
    }
    let gx = gx;
    let whh = w_hh.data();
    let bhh = b_hh.data();
    let sigmoid = |v: T| T::one() / (T::one() + (-v).exp());

    let mut h_all = vec![T::zero(); (n + 1) * h];
    let mut rs = vec![T::zero(); n * h];
    let mut zs = vec![T::zero(); n * h];
    let mut ns = vec![T::zero(); n * h];
    let mut ghns = vec![T::zero(); n * h];
    let mut y = vec![T::zero(); n * h];
    let mut gh = vec![T::zero(); 3 * h];
    for t in 0..n {
        let (prev_rows, next_rows) = h_all.split_at_mut((t + 1) * h);
        let hp = &prev_rows[t * h..];
        for (j, slot) in gh.iter_mut().enumerate() {
            let mut acc = bhh[j];
            let row = &whh[j * h..(j + 1) * h];
            for k in 0..h {
                acc += row[k] * hp[k];
            }
            *slot = acc;
        }
        let gxr = &gx.data()[t * 3 * h..(t + 1) * 3 * h];
        for k in 0..h {
            let r = sigmoid(gxr[k] + gh[k]);
            let z = sigmoid(gxr[h + k] + gh[h + k]);
            let nn = (gxr[2 * h + k] + r * gh[2 * h + k]).tanh();
            let hv = (T::one() - z) * nn + z * hp[k];
            rs[t * h + k] = r;
            zs[t * h + k] = z;
            ns[t * h + k] = nn;
            ghns[t * h + k] = gh[2 * h + k];
            next_rows[k] = hv;
            y[t * h + k] = hv;
        }
    }
    Ok((
        Tensor::from_vec(&[n, h], y)?,
        GruCache {
            h_all: Tensor::from_vec(&[n + 1, h], h_all)?,
            r: Tensor::from_vec(&[n, h], rs)?,
            z: Tensor::from_vec(&[n, h], zs)?,
            n: Tensor::from_vec(&[n, h], ns)?,
            ghn: Tensor::from_vec(&[n, h], ghns)?,
        },
    ))
}

/// Forward-in-time GRU over a whole sequence, fused into one tape node with
/// hand-derived backpropagation through time (verified by finite
/// differences).
#[derive(Debug)]
struct GruSeq {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
}

impl<T: Scalar> TapeOp<T> for GruSeq {
    fn name(&self) -> &'static str {
        "gru_seq"
    }

    fn parents(&self) -> Vec<Var> {
        vec![self.x, self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor<T>,
        sink: &mut GradSink<T>,
    ) -> Result<()> {
        let x = ctx.value(self.x);
        let w_ih = ctx.value(self.w_ih);
        let w_hh = ctx.value(self.w_hh);
        let b_ih = ctx.value(self.b_ih);
        let b_hh = ctx.value(self.b_hh);
        let (n, _, h) = gru_dims(x, w_ih, w_hh, b_ih, b_hh)?;
        let (_, cache) = gru_apply(x, w_ih, w_hh, b_ih, b_hh)?;

        let gd = g.data();
        let (r, z, nn, ghn) = (
            cache.r.data(),
            cache.z.data(),
            cache.n.data(),
            cache.ghn.data(),
        );
        let h_all = cache.h_all.data();
        let whh = w_hh.data();
        // Gate pre-activation gradients, input path and recurrent path.
        let mut da = vec![T::zero(); n * 3 * h];
        let mut dahh = vec![T::zero(); n * 3 * h];
        let mut carry = vec![T::zero(); h];
        for t in (0..n).rev() {
            let hp = &h_all[t * h..(t + 1) * h];
            let dar = &mut da[t * 3 * h..(t + 1) * 3 * h];
            let dhr = &mut dahh[t * 3 * h..(t + 1) * 3 * h];
            for k in 0..h {
                let i = t * h + k;
                let dh = gd[i] + carry[k];
                let dz = dh * (hp[k] - nn[i]);
                let dn = dh * (T::one() - z[i]);
                let da_n = dn * (T::one() - nn[i] * nn[i]);
                let dr = da_n * ghn[i];
                let da_z = dz * z[i] * (T::one() - z[i]);
                let da_r = dr * r[i] * (T::one() - r[i]);
                dar[k] = da_r;
                dar[h + k] = da_z;
                dar[2 * h + k] = da_n;
                dhr[k] = da_r;
                dhr[h + k] = da_z;
                dhr[2 * h + k] = da_n * r[i];
                carry[k] = dh * z[i];
            }
            for j in 0..3 * h {
                let v = dhr[j];
                if v != T::zero() {
                    let row = &whh[j * h..(j + 1) * h];
                    for k in 0..h {
                        carry[k] += v * row[k];
                    }
                }
            }
        }
        let da = Tensor::from_vec(&[n, 3 * h], da)?;
        let dahh = Tensor::from_vec(&[n, 3 * h], dahh)?;
        if sink.wants(self.x) {
            sink.add(self.x, matmul(&da, false, w_ih, false)?)?;
        }
        if sink.wants(self.w_ih) {
            sink.add(self.w_ih, matmul(&da, true, x, false)?)?;
        }
        if sink.wants(self.w_hh) {
            let h_prev = Tensor::from_vec(&[n, h], h_all[..n * h].to_vec())?;
            sink.add(self.w_hh, matmul(&dahh, true, &h_prev, false)?)?;
        }
        for (var, mat) in [(self.b_ih, &da), (self.b_hh, &dahh)] {
            if sink.wants(var) {
                let mut sums = vec![T::zero(); 3 * h];
                for t in 0..n {
                    for j in 0..3 * h {
                        sums[j] += mat.data()[t * 3 * h + j];
                    }
                }
                sink.add(var, Tensor::from_vec(&[1, 3 * h], sums)?)?;
            }
        }
        Ok(())
    }
}

/// One GRU direction over rows of `x` using parameters under `prefix`.
pub fn gru_seq<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w_ih = params.var(&format!("{prefix}.w_ih"))?;
    let w_hh = params.var(&format!("{prefix}.w_hh"))?;
    let b_ih = params.var(&format!("{prefix}.b_ih"))?;
    let b_hh = params.var(&format!("{prefix}.b_hh"))?;
    let (value, _) = gru_apply(
        tape.value(x),
        tape.value(w_ih),
        tape.value(w_hh),
        tape.value(b_ih),
        tape.value(b_hh),
    )?;
    tape.push_op(
        value,
        Box::new(GruSeq {
            x,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }),
    )
}

/// Forward and time-reversed GRU passes concatenated per frame:
/// `[n, in] -> [n, 2*hidden]`.
pub fn bigru<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let fwd = gru_seq(tape, params, &format!("{prefix}.fwd"), x)?;
    let rev_in = tape.reverse_rows(x)?;
    let bwd_rev = gru_seq(tape, params, &format!("{prefix}.bwd"), rev_in)?;
    let bwd = tape.reverse_rows(bwd_rev)?;
    tape.concat_cols(&[fwd, bwd])
}

/// Scaled dot-product attention of a single query over trainable templates
/// (templates act as both key and value). Returns the projected token and
/// the per-head attention rows for inspection.
pub fn mha_over_templates<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    query: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (rows, dim) = tape.value(query).dims2()?;
    if rows != 1 {
        return Err(Error::shape(
            "mha",
            format!("query must be [1, d], found {:?}", tape.value(query).shape()),
        ));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::shape(
            "mha",
            format!("{dim} dims not divisible by {heads} heads"),
        ));
    }
    let hd = dim / heads;
    let templates = params.var(&format!("{prefix}.templates"))?;
    let q = {
        let p = dense_named(tape, params, prefix, "wq", "bq", query)?;
        p
    };
    let k = dense_named(tape, params, prefix, "wk", "bk", templates)?;
    let v = dense_named(tape, params, prefix, "wv", "bv", templates)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = tape.slice_cols(q, i * hd, hd)?;
        let kh = tape.slice_cols(k, i * hd, hd)?;
        let vh = tape.slice_cols(v, i * hd, hd)?;
        let logits = tape.matmul_ex(qh, false, kh, true)?;
        let scaled = tape.affine(logits, scale, 0.0)?;
        let attn = tape.softmax_rows(scaled)?;
        let ctx = tape.matmul(attn, vh)?;
        parts.push(ctx);
        attns.push(attn);
    }
    let merged = tape.concat_cols(&parts)?;
    let token = dense_named(tape, params, prefix, "wo", "bo", merged)?;
    Ok((token, attns))
}

fn dense_named<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    prefix: &str,
    w: &str,
    b: &str,
    x: Var,
) -> Result<Var> {
    let wv = params.var(&format!("{prefix}.{w}"))?;
    let bv = params.var(&format!("{prefix}.{b}"))?;
    let y = tape.matmul_ex(x, false, wv, true)?;
    tape.add_row(y, bv)
}

/// Which axis a spectral critic convolves along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticAxis {
    /// Rows = frames, channels = frequency bins.
    Time,
    /// Each frame becomes a single-channel sequence over frequency.
    Freq,
}

/// Strided-conv critic scoring a log-amplitude spectrogram with a scalar.
/// One critic convolves along time, the other along frequency.
#[derive(Debug, Clone)]
pub struct CriticSpec {
    pub prefix: String,
    pub axis: CriticAxis,
    pub k_bins: usize,
    pub channels: Vec<usize>,
    pub width: usize,
    pub stride: usize,
}

impl CriticSpec {
    pub fn new(prefix: impl Into<String>, axis: CriticAxis, k_bins: usize) -> Self {
        Self {
            prefix: prefix.into(),
            axis,
            k_bins,
            channels: vec![16, 32, 64],
            width: 5,
            stride: 2,
        }
    }

    fn cin(&self) -> usize {
        match self.axis {
            CriticAxis::Time => self.k_bins,
            CriticAxis::Freq => 1,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.channels.len() {
            names.push(format!("{}.conv{i}.w", self.prefix));
            names.push(format!("{}.conv{i}.b", self.prefix));
        }
        names.push(format!("{}.out.w", self.prefix));
        names.push(format!("{}.out.b", self.prefix));
        names
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let mut cin = self.cin();
        for (i, &cout) in self.channels.iter().enumerate() {
            init_layer(
                store,
                rng,
                &format!("{}.conv{i}", self.prefix),
                &LayerSpec::Conv1d {
                    cin,
                    cout,
                    width: self.width,
                    stride: self.stride,
                },
            )?;
            cin = cout;
        }
        init_layer(
            store,
            rng,
            &format!("{}.out", self.prefix),
            &LayerSpec::Dense {
                inp: cin,
                out: 1,
                zero_init: false,
            },
        )?;
        Ok(())
    }

    fn shaped_input<T: Scalar>(&self, tape: &mut Tape<T>, las: Var) -> Result<Var> {
        let (n, k) = tape.value(las).dims2()?;
        if k != self.k_bins {
            return Err(Error::shape(
                "critic",
                format!("{k} bins against configured {}", self.k_bins),
            ));
        }
        match self.axis {
            CriticAxis::Time => Ok(las),
            CriticAxis::Freq => tape.reshape(las, &[n, k, 1]),
        }
    }

    /// Critic score of one `[n, k]` spectrogram: conv/ReLU stack, average
    /// pool over positions, linear head to `[1, 1]`.
    pub fn score<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        las: Var,
    ) -> Result<Var> {
        Ok(self.score_internal(tape, params, las)?.0)
    }

    /// Score plus the input-space gradient d(score)/d(las), built from
    /// first-class ops so it can itself be differentiated (the gradient
    /// penalty trains through it). ReLU gating enters as constant masks,
    /// which is exact almost everywhere for piecewise-linear activations.
    pub fn score_and_input_grad<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        las: Var,
    ) -> Result<(Var, Var)> {
        let (score, trace) = self.score_internal(tape, params, las)?;
        let w_out = params.var(&format!("{}.out.w", self.prefix))?;
        let ones = tape.constant(Tensor::filled(&[1, 1], T::one()));
        let mut g = tape.matmul_ex(ones, false, w_out, false)?;
        let pooled_shape = trace.pooled_input_shape.clone();
        let rows: usize = pooled_shape[..pooled_shape.len() - 1].iter().product();
        g = tape.affine(g, 1.0 / rows as f64, 0.0)?;
        g = tape.repeat_rows(g, rows)?;
        if pooled_shape.len() == 3 {
            g = tape.reshape(g, &pooled_shape)?;
        }
        for (i, (mask, n_in)) in trace
            .masks
            .iter()
            .zip(&trace.layer_rows)
            .enumerate()
            .rev()
        {
            let mask = tape.constant_labeled(mask.clone(), format!("{}.mask{i}", self.prefix));
            g = tape.mul(g, mask)?;
            let w = params.var(&format!("{}.conv{i}.w", self.prefix))?;
            g = tape.conv1d_input_adjoint(g, w, self.width, self.stride, *n_in)?;
        }
        if self.axis == CriticAxis::Freq {
            let (n, k) = tape.value(las).dims2()?;
            g = tape.reshape(g, &[n, k])?;
        }
        Ok((score, g))
    }

    fn score_internal<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        las: Var,
    ) -> Result<(Var, CriticTrace<T>)> {
        tape.push_scope(self.prefix.clone());
        let result = (|| {
            let mut h = self.shaped_input(tape, las)?;
            let mut masks = Vec::new();
            let mut layer_rows = Vec::new();
            for i in 0..self.channels.len() {
                let shape = tape.value(h).shape();
                layer_rows.push(shape[shape.len() - 2]);
                let w = params.var(&format!("{}.conv{i}.w", self.prefix))?;
                let b = params.var(&format!("{}.conv{i}.b", self.prefix))?;
                let pre = tape.conv1d(h, w, b, self.width, self.stride)?;
                masks.push(tape.value(pre).map(|v| {
                    if v > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }));
                h = tape.relu(pre)?;
            }
            let pooled_input_shape = tape.value(h).shape().to_vec();
            let pooled = tape.mean_rows(h)?;
            let score = dense(tape, params, &format!("{}.out", self.prefix), pooled)?;
            Ok((
                score,
                CriticTrace {
                    masks,
                    layer_rows,
                    pooled_input_shape,
                },
            ))
        })();
        tape.pop_scope();
        result
    }
}

struct CriticTrace<T> {
    masks: Vec<Tensor<T>>,
    layer_rows: Vec<usize>,
    pooled_input_shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn store_with<T: Scalar>(
        seed: u64,
        f: impl Fn(&mut ParamStore<T>, &mut ChaCha8Rng),
    ) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        f(&mut store, &mut rng);
        store
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Scalar step-by-step GRU oracle against the fused sequence op.
    #[test]
    fn gru_matches_scalar_oracle() {
        let (n, inp, h) = (5usize, 3usize, 4usize);
        let store = store_with::<f64>(11, |s, rng| {
            init_gru_dir(s, rng, "g", inp, h).unwrap();
        });
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&mut rng, &[n, inp]);

        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let y = gru_seq(&mut tape, &params, "g", xv).unwrap();
        let got = tape.value(y).clone();

        let w_ih = store.get("g.w_ih").unwrap().data();
        let w_hh = store.get("g.w_hh").unwrap().data();
        let b_ih = store.get("g.b_ih").unwrap().data();
        let b_hh = store.get("g.b_hh").unwrap().data();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut hv = vec![0.0f64; h];
        for t in 0..n {
            let mut next = vec![0.0f64; h];
            for k in 0..h {
                let gate = |j: usize| -> f64 {
                    let mut a = b_ih[j];
                    for c in 0..inp {
                        a += w_ih[j * inp + c] * x.data()[t * inp + c];
                    }
                    a
                };
                let rec = |j: usize| -> f64 {
                    let mut a = b_hh[j];
                    for c in 0..h {
                        a += w_hh[j * h + c] * hv[c];
                    }
                    a
                };
                let r = sig(gate(k) + rec(k));
                let z = sig(gate(h + k) + rec(h + k));
                let nn = (gate(2 * h + k) + r * rec(2 * h + k)).tanh();
                next[k] = (1.0 - z) * nn + z * hv[k];
            }
            for k in 0..h {
                assert!(
                    (got.data()[t * h + k] - next[k]).abs() < 1e-12,
                    "t={t} k={k}"
                );
            }
            hv = next;
        }
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        let (n, inp, h) = (4usize, 2usize, 3usize);
        let mut store = ParamStore::<f64>::new();
        for (name, shape) in [
            ("g.w_ih", vec![3 * h, inp]),
            ("g.w_hh", vec![3 * h, h]),
            ("g.b_ih", vec![1, 3 * h]),
            ("g.b_hh", vec![1, 3 * h]),
        ] {
            store.insert(name, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::zeros(&[n, inp]));
        let y = gru_seq(&mut tape, &params, "g", x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// A hugely positive update-gate bias keeps the state at h_prev = 0
    /// regardless of input.
    #[test]
    fn gru_saturated_update_gate_holds_state() {
        let (n, inp, h) = (6usize, 3usize, 2usize);
        let store = store_with::<f64>(13, |s, rng| {
            init_gru_dir(s, rng, "g", inp, h).unwrap();
        });
        let mut boosted = store.clone();
        {
            let b = boosted.get_mut("g.b_ih").unwrap();
            for k in 0..h {
                b.data_mut()[h + k] = 50.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_tensor(&mut rng, &[n, inp]);
        let mut tape = Tape::new();
        let params = boosted.bind(&mut tape, |_| true);
        let xv = tape.constant(x);
        let y = gru_seq(&mut tape, &params, "g", xv).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6, "state leaked: {v}");
        }
    }

    #[test]
    fn bigru_concatenates_directions() {
        let (n, inp, h) = (5usize, 3usize, 4usize);
        let store = store_with::<f64>(15, |s, rng| {
            init_layer(s, rng, "bg", &LayerSpec::BiGru { inp, hidden: h }).unwrap();
        });
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_tensor(&mut rng, &[n, inp]);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let y = bigru(&mut tape, &params, "bg", xv).unwrap();
        assert_eq!(tape.value(y).shape(), &[n, 2 * h]);

        // Forward half equals the plain forward GRU.
        let mut tape2 = Tape::new();
        let params2 = store.bind(&mut tape2, |_| true);
        let xv2 = tape2.constant(x);
        let f = gru_seq(&mut tape2, &params2, "bg.fwd", xv2).unwrap();
        for t in 0..n {
            for k in 0..h {
                assert_eq!(
                    tape.value(y).data()[t * 2 * h + k],
                    tape2.value(f).data()[t * h + k]
                );
            }
        }
    }

    #[test]
    fn mha_uniform_when_logits_equal() {
        let (dim, heads, templates) = (8usize, 2usize, 4usize);
        let mut store = store_with::<f64>(17, |s, rng| {
            init_layer(s, rng, "m", &LayerSpec::MhaTemplates { dim, heads, templates }).unwrap();
        });
        // Zero query projection makes every logit zero -> uniform attention.
        *store.get_mut("m.wq").unwrap() = Tensor::zeros(&[dim, dim]);
        *store.get_mut("m.bq").unwrap() = Tensor::zeros(&[1, dim]);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| true);
        let q = tape.constant(Tensor::filled(&[1, dim], 0.3));
        let (_, attns) = mha_over_templates(&mut tape, &params, "m", q, heads).unwrap();
        for a in attns {
            for &v in tape.value(a).data() {
                assert!((v - 1.0 / templates as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_attention_rows_normalized() {
        let (dim, heads, templates) = (16usize, 8usize, 5usize);
        let store = store_with::<f64>(18, |s, rng| {
            init_layer(s, rng, "m", &LayerSpec::MhaTemplates { dim, heads, templates }).unwrap();
        });
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| true);
        let q = tape.constant(random_tensor(&mut rng, &[1, dim]));
        let (token, attns) = mha_over_templates(&mut tape, &params, "m", q, heads).unwrap();
        assert_eq!(tape.value(token).shape(), &[1, dim]);
        for a in attns {
            let sum: f64 = tape.value(a).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    /// With one dominating template the token is that template's projected,
    /// output-projected value.
    #[test]
    fn mha_saturated_attention_selects_template() {
        let (dim, heads, templates) = (8usize, 2usize, 4usize);
        let mut store = store_with::<f64>(20, |s, rng| {
            init_layer(s, rng, "m", &LayerSpec::MhaTemplates { dim, heads, templates }).unwrap();
        });
        // Identity key projection; query aligned with template 2, scaled
        // huge so softmax saturates on it in every head.
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        *store.get_mut("m.wk").unwrap() = eye.clone();
        *store.get_mut("m.bk").unwrap() = Tensor::zeros(&[1, dim]);
        *store.get_mut("m.wq").unwrap() = eye;
        *store.get_mut("m.bq").unwrap() = Tensor::zeros(&[1, dim]);
        let t2: Vec<f64> = store.get("m.templates").unwrap().data()
            [2 * dim..3 * dim]
            .to_vec();
        let q: Vec<f64> = t2.iter().map(|v| v * 1e4).collect();

        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| true);
        let qv = tape.constant(Tensor::from_vec(&[1, dim], q).unwrap());
        let (token, _) = mha_over_templates(&mut tape, &params, "m", qv, heads).unwrap();

        // Oracle: token = Wo (Wv t2 + bv) + bo.
        let wv = store.get("m.wv").unwrap();
        let bv = store.get("m.bv").unwrap();
        let wo = store.get("m.wo").unwrap();
        let bo = store.get("m.bo").unwrap();
        let mut v2 = vec![0.0f64; dim];
        for i in 0..dim {
            let mut a = bv.data()[i];
            for j in 0..dim {
                a += wv.data()[i * dim + j] * t2[j];
            }
            v2[i] = a;
        }
        for i in 0..dim {
            let mut a = bo.data()[i];
            for j in 0..dim {
                a += wo.data()[i * dim + j] * v2[j];
            }
            assert!(
                (tape.value(token).data()[i] - a).abs() < 1e-6,
                "component {i}"
            );
        }
    }

    /// The explicit input-gradient chain must agree with reverse-mode
    /// differentiation of the score itself.
    #[test]
    fn critic_input_grad_matches_backward() {
        for axis in [CriticAxis::Time, CriticAxis::Freq] {
            let k = 12usize;
            let spec = CriticSpec {
                channels: vec![4, 6],
                ..CriticSpec::new("c", axis, k)
            };
            let store = store_with::<f64>(21, |s, rng| {
                spec.init(s, rng).unwrap();
            });
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let x = random_tensor(&mut rng, &[9, k]);

            let mut tape = Tape::new();
            let params = store.bind(&mut tape, |_| true);
            let xv = tape.leaf(x.clone());
            let score = spec.score(&mut tape, &params, xv).unwrap();
            let sum = tape.mean_all(score).unwrap();
            let grads = tape.backward(sum).unwrap();
            let reference = grads.get(xv).unwrap();

            let mut tape2 = Tape::new();
            let params2 = store.bind(&mut tape2, |_| true);
            let xv2 = tape2.constant(x);
            let (_, gx) = spec.score_and_input_grad(&mut tape2, &params2, xv2).unwrap();
            let got = tape2.value(gx);
            assert_eq!(got.shape(), reference.shape());
            for (a, b) in got.data().iter().zip(reference.data()) {
                assert!((a - b).abs() < 1e-10, "{axis:?}: {a} vs {b}");
            }
        }
    }
}
