//! Finite-difference verification of every differentiable primitive and the
//! layer compositions built from them (float64, multiple seeds).

use dnr_core::nn::gradcheck::{check_gradients, random_store};
use dnr_core::nn::layers::{bigru, dense, gru_seq, init_layer, mha_over_templates};
use dnr_core::nn::store::{BoundParams, ParamStore};
use dnr_core::nn::tape::{Tape, Var};
use dnr_core::nn::tensor::Tensor;
use dnr_core::nn::{CriticAxis, CriticSpec, LayerSpec};
use dnr_core::signal::{window, WindowKind};
use dnr_core::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

/// Project a tensor to a scalar with a fixed pseudo-random weighting so
/// every output coordinate receives a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, v: Var, salt: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9 ^ salt);
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = tape.constant(Tensor::from_vec(&shape, data).unwrap());
    let prod = tape.mul(v, c)?;
    tape.sum_all(prod)
}

fn run(
    entries: &[(&str, &[usize])],
    lo: f64,
    hi: f64,
    build: impl Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
) {
    for seed in 0..SEEDS {
        let store = random_store(seed, entries, lo, hi);
        let report = check_gradients(&store, &build, seed ^ 0xabcd, 6, TOL)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(report.checked > 0);
    }
}

#[test]
fn binary_elementwise() {
    run(&[("a", &[3, 4]), ("b", &[3, 4])], -1.5, 1.5, |t, p| {
        let (a, b) = (p.var("a")?, p.var("b")?);
        let s = t.add(a, b)?;
        let d = t.sub(s, b)?;
        let m = t.mul(d, b)?;
        project(t, m, 1)
    });
}

#[test]
fn elementwise_division() {
    run(&[("a", &[3, 4]), ("b", &[3, 4])], 0.5, 2.0, |t, p| {
        let q = t.div(p.var("a")?, p.var("b")?)?;
        project(t, q, 40)
    });
}

#[test]
fn row_broadcast_ops() {
    run(
        &[("a", &[4, 3]), ("r", &[1, 3]), ("d", &[1, 3])],
        0.4,
        1.6,
        |t, p| {
            let a = t.add_row(p.var("a")?, p.var("r")?)?;
            let m = t.mul_row(a, p.var("r")?)?;
            let q = t.div_row(m, p.var("d")?)?;
            project(t, q, 2)
        },
    );
}

#[test]
fn scalar_broadcast() {
    run(&[("a", &[2, 5]), ("s", &[])], -1.0, 1.0, |t, p| {
        let y = t.mul_scalar(p.var("a")?, p.var("s")?)?;
        project(t, y, 3)
    });
}

#[test]
fn unary_smooth() {
    run(&[("x", &[3, 3])], -1.2, 1.2, |t, p| {
        let x = p.var("x")?;
        let a = t.sigmoid(x)?;
        let b = t.tanh(a)?;
        let c = t.softplus(b)?;
        let d = t.exp(c)?;
        let e = t.affine(d, 0.7, 0.1)?;
        project(t, e, 4)
    });
}

#[test]
fn unary_positive_domain() {
    run(&[("x", &[2, 4])], 0.3, 2.0, |t, p| {
        let x = p.var("x")?;
        let a = t.ln(x)?;
        let b = t.exp(a)?;
        let c = t.sqrt(b)?;
        project(t, c, 5)
    });
}

#[test]
fn unary_kinked_away_from_kinks() {
    // Inputs bounded away from zero and from the clamp floor, so the
    // finite-difference probe never crosses a kink.
    run(&[("x", &[3, 4])], 0.2, 1.4, |t, p| {
        let x = p.var("x")?;
        let sh = t.affine(x, 1.0, -0.8)?;
        let r = t.relu(sh)?;
        let a = t.abs(sh)?;
        let c = t.clamp_min(sh, -0.5)?;
        let s1 = t.add(r, a)?;
        let s2 = t.add(s1, c)?;
        project(t, s2, 6)
    });
}

#[test]
fn matmul_all_transpose_variants() {
    run(&[("a", &[3, 4]), ("b", &[4, 2])], -1.0, 1.0, |t, p| {
        let (a, b) = (p.var("a")?, p.var("b")?);
        let y1 = t.matmul_ex(a, false, b, false)?;
        let at = t.transpose(a)?;
        let y2 = t.matmul_ex(at, true, b, false)?;
        let bt = t.transpose(b)?;
        let y3 = t.matmul_ex(a, false, bt, true)?;
        let y4 = t.matmul_ex(at, true, bt, true)?;
        let s1 = t.add(y1, y2)?;
        let s2 = t.add(y3, y4)?;
        let s = t.add(s1, s2)?;
        project(t, s, 7)
    });
}

#[test]
fn softmax_rows_grad() {
    run(&[("x", &[3, 5])], -2.0, 2.0, |t, p| {
        let y = t.softmax_rows(p.var("x")?)?;
        project(t, y, 8)
    });
}

#[test]
fn shape_ops() {
    run(&[("x", &[4, 6])], -1.0, 1.0, |t, p| {
        let x = p.var("x")?;
        let r = t.reshape(x, &[2, 12])?;
        let tr = t.transpose(r)?;
        let sr = t.slice_rows(tr, 2, 8)?;
        let sc = t.slice_cols(sr, 0, 2)?;
        let cc = t.concat_cols(&[sc, sc])?;
        let st = t.stack_rows(&[cc, cc])?;
        let rev = t.reverse_rows(st)?;
        project(t, rev, 9)
    });
}

#[test]
fn broadcast_and_pool_ops() {
    run(&[("x", &[1, 4]), ("y", &[6, 3])], -1.0, 1.0, |t, p| {
        let rep = t.repeat_rows(p.var("x")?, 5)?;
        let up = t.upsample_rows(p.var("y")?, 2)?;
        let m1 = t.mean_rows(rep)?;
        let m2 = t.mean_rows(up)?;
        let s1 = project(t, m1, 10)?;
        let s2 = project(t, m2, 11)?;
        t.add(s1, s2)
    });
}

#[test]
fn reductions() {
    run(&[("x", &[3, 4])], -1.0, 1.0, |t, p| {
        let x = p.var("x")?;
        let s = t.sum_all(x)?;
        let m = t.mean_all(x)?;
        t.add(s, m)
    });
}

#[test]
fn conv1d_2d_input() {
    run(
        &[("x", &[9, 3]), ("w", &[4, 3, 5]), ("b", &[1, 4])],
        -0.8,
        0.8,
        |t, p| {
            let y = t.conv1d(p.var("x")?, p.var("w")?, p.var("b")?, 5, 2)?;
            project(t, y, 12)
        },
    );
}

#[test]
fn conv1d_batched_input() {
    run(
        &[("x", &[2, 7, 3]), ("w", &[4, 3, 3]), ("b", &[1, 4])],
        -0.8,
        0.8,
        |t, p| {
            let y = t.conv1d(p.var("x")?, p.var("w")?, p.var("b")?, 3, 1)?;
            project(t, y, 13)
        },
    );
}

#[test]
fn conv2d_strided() {
    run(
        &[("x", &[2, 6, 8]), ("w", &[3, 2, 5, 5]), ("b", &[1, 3])],
        -0.8,
        0.8,
        |t, p| {
            let y = t.conv2d(p.var("x")?, p.var("w")?, p.var("b")?, (1, 2))?;
            project(t, y, 14)
        },
    );
}

#[test]
fn conv1d_input_adjoint_as_op() {
    // The adjoint op itself must be differentiable in both arguments.
    run(
        &[("gy", &[5, 4]), ("w", &[4, 3, 5])],
        -0.8,
        0.8,
        |t, p| {
            let y = t.conv1d_input_adjoint(p.var("gy")?, p.var("w")?, 5, 2, 9)?;
            project(t, y, 15)
        },
    );
}

#[test]
fn frames_and_rfft_mag() {
    run(&[("x", &[64])], -1.0, 1.0, |t, p| {
        let win = window::<f64>(WindowKind::Hann, 16);
        let frames = t.frames_windowed(p.var("x")?, 16, 8, win)?;
        let mags = t.rfft_mag(frames, 16, 1e-7)?;
        project(t, mags, 16)
    });
}

#[test]
fn conv_trunc_both_sides() {
    run(&[("x", &[40]), ("r", &[7])], -1.0, 1.0, |t, p| {
        let y = t.conv_trunc(p.var("x")?, p.var("r")?)?;
        project(t, y, 17)
    });
}

#[test]
fn dense_layer() {
    run(
        &[("d.w", &[4, 6]), ("d.b", &[1, 4]), ("x", &[3, 6])],
        -0.9,
        0.9,
        |t, p| {
            let y = dense(t, p, "d", p.var("x")?)?;
            project(t, y, 18)
        },
    );
}

fn gru_fixture(seed: u64, inp: usize, hidden: usize, frames: usize, bi: bool) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let spec = if bi {
        LayerSpec::BiGru { inp, hidden }
    } else {
        LayerSpec::Gru { inp, hidden }
    };
    init_layer(&mut store, &mut rng, "g", &spec).unwrap();
    let data: Vec<f64> = (0..frames * inp).map(|_| rng.random_range(-1.0..1.0)).collect();
    store
        .insert("x", Tensor::from_vec(&[frames, inp], data).unwrap())
        .unwrap();
    store
}

#[test]
fn gru_sequence_bptt() {
    for seed in 0..SEEDS {
        let store = gru_fixture(seed, 3, 4, 6, false);
        check_gradients(
            &store,
            |t, p| {
                let y = gru_seq(t, p, "g", p.var("x")?)?;
                project(t, y, 19)
            },
            seed,
            6,
            TOL,
        )
        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn bigru_bptt() {
    for seed in 0..SEEDS {
        let store = gru_fixture(seed, 3, 3, 5, true);
        check_gradients(
            &store,
            |t, p| {
                let y = bigru(t, p, "g", p.var("x")?)?;
                project(t, y, 20)
            },
            seed,
            5,
            TOL,
        )
        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn mha_templates_grad() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_layer(
            &mut store,
            &mut rng,
            "m",
            &LayerSpec::MhaTemplates {
                dim: 8,
                heads: 2,
                templates: 4,
            },
        )
        .unwrap();
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        store
            .insert("q", Tensor::from_vec(&[1, 8], q).unwrap())
            .unwrap();
        check_gradients(
            &store,
            |t, p| {
                let (token, _) = mha_over_templates(t, p, "m", p.var("q")?, 2)?;
                project(t, token, 21)
            },
            seed,
            5,
            TOL,
        )
        .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn critic_score_and_gradient_penalty() {
    for axis in [CriticAxis::Time, CriticAxis::Freq] {
        let spec = CriticSpec {
            channels: vec![3, 4],
            ..CriticSpec::new("c", axis, 6)
        };
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            spec.init(&mut store, &mut rng).unwrap();
            let n = 8usize;
            let data: Vec<f64> = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            store
                .insert("x", Tensor::from_vec(&[n, 6], data).unwrap())
                .unwrap();
            let spec2 = spec.clone();
            check_gradients(
                &store,
                move |t, p| {
                    let x = p.var("x")?;
                    let (score, gx) = spec2.score_and_input_grad(t, p, x)?;
                    // Gradient-penalty shape: (||grad|| - 1)^2 + score.
                    let sq = t.mul(gx, gx)?;
                    let ss = t.sum_all(sq)?;
                    let norm = t.sqrt(ss)?;
                    let dev = t.affine(norm, 1.0, -1.0)?;
                    let pen = t.mul(dev, dev)?;
                    let s = t.mean_all(score)?;
                    t.add(s, pen)
                },
                seed,
                4,
                TOL,
            )
            .unwrap_or_else(|e| panic!("{axis:?} seed {seed}: {e}"));
        }
    }
}

#[test]
fn loss_mse_grad() {
    run(&[("target", &[5, 7]), ("pred", &[5, 7])], -1.5, 1.5, |t, p| {
        dnr_core::losses::mse_on_tape(t, p.var("target")?, p.var("pred")?)
    });
}

#[test]
fn loss_neg_correlation_grad() {
    run(&[("r", &[32]), ("rhat", &[32])], -1.0, 1.0, |t, p| {
        dnr_core::losses::neg_correlation_on_tape(t, p.var("r")?, p.var("rhat")?)
    });
}

#[test]
fn loss_multiscale_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let reference: Vec<f64> = (0..512).map(|_| rng.random_range(-0.5..0.5)).collect();
    let scales = [
        dnr_core::losses::StftScale::new(64, 16, 48),
        dnr_core::losses::StftScale::new(128, 32, 96),
    ];
    run(&[("y", &[512])], -0.5, 0.5, move |t, p| {
        dnr_core::losses::multiscale_on_tape(t, &reference, p.var("y")?, &scales)
    });
}

#[test]
fn loss_reverb_grad_through_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let noisy: Vec<f64> = (0..200).map(|_| rng.random_range(-0.5..0.5)).collect();
    let natural: Vec<f64> = (0..200).map(|_| rng.random_range(-0.5..0.5)).collect();
    let scales = [dnr_core::losses::StftScale::new(64, 16, 48)];
    run(&[("rhat", &[24])], -0.5, 0.5, move |t, p| {
        let n = t.constant(Tensor::from_vec(&[200], noisy.clone()).unwrap());
        dnr_core::losses::l_rs_on_tape(t, &natural, n, p.var("rhat")?, &scales)
    });
}

#[test]
fn loss_wgan_d_grad_through_penalty() {
    let mut spec = CriticSpec::new("d", CriticAxis::Time, 3);
    spec.channels = vec![2, 3];
    spec.width = 3;
    let mut names: Vec<(String, Vec<usize>)> = Vec::new();
    {
        let mut probe = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        spec.init(&mut probe, &mut rng).unwrap();
        for name in spec.param_names() {
            names.push((name.clone(), probe.get(&name).unwrap().shape().to_vec()));
        }
    }
    let entries: Vec<(&str, &[usize])> = names
        .iter()
        .map(|(n, s)| (n.as_str(), s.as_slice()))
        .collect();
    let spec2 = spec.clone();
    run(&entries, -0.7, 0.7, move |t, p| {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mk = |t: &mut Tape<f64>, rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.constant(Tensor::from_vec(&[4, 3], data).unwrap())
        };
        let pairs = [(mk(t, &mut rng), mk(t, &mut rng)), (mk(t, &mut rng), mk(t, &mut rng))];
        let parts = dnr_core::losses::wgan_gp_d_loss_on_tape(
            t,
            &spec2,
            p,
            &pairs,
            10.0,
            &[0.35, 0.65],
        )?;
        Ok(parts.total)
    });
}

#[test]
fn loss_wgan_g_grad() {
    let mut spec = CriticSpec::new("d", CriticAxis::Freq, 4);
    spec.channels = vec![2];
    spec.width = 3;
    let mut names: Vec<(String, Vec<usize>)> = Vec::new();
    {
        let mut probe = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        spec.init(&mut probe, &mut rng).unwrap();
        for name in spec.param_names() {
            names.push((name.clone(), probe.get(&name).unwrap().shape().to_vec()));
        }
    }
    let entries: Vec<(&str, &[usize])> = names
        .iter()
        .map(|(n, s)| (n.as_str(), s.as_slice()))
        .collect();
    let spec2 = spec.clone();
    run(&entries, -0.7, 0.7, move |t, p| {
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let data: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fake = t.constant(Tensor::from_vec(&[5, 4], data).unwrap());
        dnr_core::losses::wgan_g_loss_on_tape(t, &[(&spec2, p)], &[fake])
    });
}

#[test]
fn elementwise_maximum_and_max_all() {
    // Operand gap keeps finite differences away from the max kinks.
    run(&[("a", &[4, 5]), ("b", &[4, 5])], -1.0, 1.0, |t, p| {
        let a = p.var("a")?;
        let shifted = t.affine(p.var("b")?, 1.0, 3.0)?;
        let hi = t.maximum(a, shifted)?;
        let sunk = t.affine(shifted, 1.0, -6.0)?;
        let lo = t.maximum(sunk, a)?;
        let m = t.max_all(a)?;
        let s1 = project(t, hi, 60)?;
        let s2 = project(t, lo, 61)?;
        let s = t.add(s1, s2)?;
        t.add(s, m)
    });
}
