//! Optimizer steps checked against plain scalar loops that share no code
//! with the library implementation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use t5lab::model::{ModelConfig, ModelParams};
use t5lab::optim::{
    adafactor_delta, adamw_delta, adamw_rms_delta, clip_global_norm, rms, AdafactorHyper,
    AdamHyper, OptimError, Optimizer, OptimizerKind, Slot,
};

const TOL: f64 = 1e-12;

fn close(a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("lengths {} vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs()).max(1.0);
        if (x - y).abs() > tol * scale {
            return Err(format!("index {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

struct Case {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    g: Vec<f64>,
    /// Moments from a few earlier steps.
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let rows = rng.gen_range(1..6);
    let cols = rng.gen_range(1..6);
    let n = rows * cols;
    let wscale = 10f64.powf(rng.gen_range(-4.0..1.0));
    let mut vec = |s: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0) * s).collect() };
    let w = vec(wscale);
    let g = vec(1.0);
    let m = vec(0.1);
    let v: Vec<f64> = vec(0.1).into_iter().map(|x| x * x).collect();
    Case {
        rows,
        cols,
        w,
        g,
        m,
        v,
        t: rng.gen_range(1..50),
        lr: rng.gen_range(1e-4..1e-1),
    }
}

fn random_adam(rng: &mut ChaCha8Rng) -> AdamHyper {
    AdamHyper {
        beta1: rng.gen_range(0.0..0.99),
        beta2: rng.gen_range(0.9..0.9999),
        eps: 10f64.powf(rng.gen_range(-10.0..-4.0)),
        weight_decay: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.1) },
        rms_eps: 1e-3,
    }
}

/// Scalar-loop AdamW; returns (delta, m, v).
fn adamw_oracle(c: &Case, h: &AdamHyper, lr: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut delta = vec![0.0; c.w.len()];
    let mut m = c.m.clone();
    let mut v = c.v.clone();
    let bc1 = 1.0 - h.beta1.powi(c.t as i32);
    let bc2 = 1.0 - h.beta2.powi(c.t as i32);
    for i in 0..c.w.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * c.g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * c.g[i] * c.g[i];
        let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + h.eps);
        delta[i] = -lr * step - lr * h.weight_decay * c.w[i];
    }
    (delta, m, v)
}

fn adam_slot(c: &Case) -> Slot<f64> {
    Slot::Adam {
        m: c.m.clone(),
        v: c.v.clone(),
    }
}

fn slot_mv(s: &Slot<f64>) -> (Vec<f64>, Vec<f64>) {
    match s {
        Slot::Adam { m, v } => (m.clone(), v.clone()),
        _ => panic!("not an adam slot"),
    }
}

pub fn adamw_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for k in 0..100 {
        let c = random_case(&mut rng);
        let h = random_adam(&mut rng);
        let mut slot = adam_slot(&c);
        let got = adamw_delta(&c.w, &c.g, &mut slot, c.t, &h, c.lr).unwrap();
        let (want, m, v) = adamw_oracle(&c, &h, c.lr);
        close(&got, &want, TOL).unwrap_or_else(|e| panic!("case {k} delta: {e}"));
        let (gm, gv) = slot_mv(&slot);
        close(&gm, &m, TOL).unwrap_or_else(|e| panic!("case {k} m: {e}"));
        close(&gv, &v, TOL).unwrap_or_else(|e| panic!("case {k} v: {e}"));
    }
}

fn rms_oracle(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v * v;
    }
    (s / x.len() as f64).sqrt()
}

pub fn adamw_rms_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for k in 0..100 {
        let mut c = random_case(&mut rng);
        if k % 10 == 0 {
            c.w.iter_mut().for_each(|x| *x = 0.0);
        }
        let h = random_adam(&mut rng);
        let mut slot = adam_slot(&c);
        let got = adamw_rms_delta(&c.w, &c.g, &mut slot, c.t, &h, c.lr).unwrap();
        let scale = rms_oracle(&c.w).max(h.rms_eps);
        let (want, _, _) = adamw_oracle(&c, &h, c.lr * scale);
        close(&got, &want, TOL).unwrap_or_else(|e| panic!("case {k}: {e}"));
    }
}

pub fn rms_scaling_is_adamw_times_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for k in 0..100 {
        let c = random_case(&mut rng);
        let h = random_adam(&mut rng);
        let plain = adamw_delta(&c.w, &c.g, &mut adam_slot(&c), c.t, &h, c.lr).unwrap();
        let scaled = adamw_rms_delta(&c.w, &c.g, &mut adam_slot(&c), c.t, &h, c.lr).unwrap();
        let factor = rms_oracle(&c.w).max(h.rms_eps);
        for (i, (p, s)) in plain.iter().zip(&scaled).enumerate() {
            assert!((p * factor - s).abs() <= 1e-12, "case {k} index {i}: {} vs {s}", p * factor);
        }
    }
}

pub fn unit_rms_weights_give_identical_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let c = random_case(&mut rng);
    let w = vec![1.0; c.w.len()];
    let h = AdamHyper::default();
    let a = adamw_delta(&w, &c.g, &mut adam_slot(&c), c.t, &h, c.lr).unwrap();
    let b = adamw_rms_delta(&w, &c.g, &mut adam_slot(&c), c.t, &h, c.lr).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

pub fn zero_weights_use_the_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let c = random_case(&mut rng);
    let w = vec![0.0; c.w.len()];
    let h = AdamHyper::default();
    let a = adamw_delta(&w, &c.g, &mut adam_slot(&c), c.t, &h, c.lr).unwrap();
    let b = adamw_rms_delta(&w, &c.g, &mut adam_slot(&c), c.t, &h, c.lr).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x * 1e-3 - y).abs() <= 1e-15);
    }
}

pub fn first_adam_step_moves_by_lr() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..20 {
        let mut c = random_case(&mut rng);
        c.m.iter_mut().for_each(|x| *x = 0.0);
        c.v.iter_mut().for_each(|x| *x = 0.0);
        c.g[0] = 0.0;
        let h = AdamHyper {
            eps: 0.0,
            ..AdamHyper::default()
        };
        let d = adamw_delta(&c.w, &c.g, &mut adam_slot(&c), 1, &h, c.lr).unwrap();
        for (gi, di) in c.g.iter().zip(&d) {
            if *gi != 0.0 {
                assert!((di.abs() - c.lr).abs() < 1e-12 && di.signum() == -gi.signum());
            } else {
                assert!(di.is_nan() || *di == 0.0);
            }
        }
    }
}

/// Scalar-loop Adafactor over one matrix (rows x cols) or vector (rows = 1,
/// factored = false); returns (delta, row or full accumulator, col accumulator).
fn adafactor_oracle(
    c: &Case,
    factored: bool,
    row: &[f64],
    col: &[f64],
    full: &[f64],
    h: &AdafactorHyper,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = c.w.len();
    let beta = 1.0 - (c.t as f64).powf(-h.decay_rate);
    let mut vhat = vec![0.0; n];
    let (mut r_out, mut c_out) = (row.to_vec(), col.to_vec());
    let mut f_out = full.to_vec();
    if factored {
        for i in 0..c.rows {
            let mut s = 0.0;
            for j in 0..c.cols {
                s += c.g[i * c.cols + j].powi(2) + h.eps1;
            }
            r_out[i] = beta * row[i] + (1.0 - beta) * s;
        }
        for j in 0..c.cols {
            let mut s = 0.0;
            for i in 0..c.rows {
                s += c.g[i * c.cols + j].powi(2) + h.eps1;
            }
            c_out[j] = beta * col[j] + (1.0 - beta) * s;
        }
        let total: f64 = r_out.iter().sum();
        for i in 0..c.rows {
            for j in 0..c.cols {
                vhat[i * c.cols + j] = r_out[i] * c_out[j] / total;
            }
        }
    } else {
        for i in 0..n {
            f_out[i] = beta * full[i] + (1.0 - beta) * (c.g[i] * c.g[i] + h.eps1);
            vhat[i] = f_out[i];
        }
    }
    let mut u: Vec<f64> = (0..n).map(|i| c.g[i] / vhat[i].sqrt()).collect();
    let denom = (rms_oracle(&u) / h.clip_threshold).max(1.0);
    let rel = rms_oracle(&c.w).max(h.eps2);
    for x in u.iter_mut() {
        *x = -c.lr * rel * *x / denom;
    }
    if factored {
        (u, r_out, c_out)
    } else {
        (u, f_out, Vec::new())
    }
}

pub fn adafactor_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for k in 0..100 {
        let c = random_case(&mut rng);
        let h = AdafactorHyper {
            clip_threshold: rng.gen_range(0.5..2.0),
            decay_rate: rng.gen_range(0.5..1.0),
            ..AdafactorHyper::default()
        };
        let factored = k % 4 != 0;
        let row: Vec<f64> = (0..c.rows).map(|_| rng.gen_range(0.0..2.0)).collect();
        let col: Vec<f64> = (0..c.cols).map(|_| rng.gen_range(0.0..2.0)).collect();
        let full: Vec<f64> = (0..c.w.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut slot = if factored {
            Slot::Factored {
                rows: c.rows,
                cols: c.cols,
                row: row.clone(),
                col: col.clone(),
            }
        } else {
            Slot::Full { v: full.clone() }
        };
        let got = adafactor_delta(&c.w, &c.g, &mut slot, c.t, &h, c.lr).unwrap();
        let (want, a, b) = adafactor_oracle(&c, factored, &row, &col, &full, &h);
        close(&got, &want, TOL).unwrap_or_else(|e| panic!("case {k} delta: {e}"));
        match slot {
            Slot::Factored { row, col, .. } => {
                close(&row, &a, TOL).unwrap();
                close(&col, &b, TOL).unwrap();
            }
            Slot::Full { v } => close(&v, &a, TOL).unwrap(),
            Slot::Adam { .. } => unreachable!(),
        }
    }
}

pub fn adafactor_rank_one_is_exact() {
    let g = [1.0, 2.0, 2.0, 4.0];
    let mut slot = Slot::for_param(OptimizerKind::Adafactor, &[2, 2]);
    adafactor_delta(&[0.5; 4], &g, &mut slot, 1, &AdafactorHyper::default(), 1.0).unwrap();
    match &slot {
        Slot::Factored { row, col, .. } => {
            close(row, &[5.0, 20.0], 1e-12).unwrap();
            close(col, &[5.0, 20.0], 1e-12).unwrap();
        }
        _ => panic!("matrix parameter should be factored"),
    }
    close(&slot.second_moment(), &[1.0, 4.0, 4.0, 16.0], 1e-12).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let h = AdafactorHyper::default();
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let a: Vec<f64> = (0..r).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let mut slot = Slot::for_param(OptimizerKind::Adafactor, &[r, c]);
        adafactor_delta(&vec![0.1; r * c], &g, &mut slot, 1, &h, 1.0).unwrap();
        let want: Vec<f64> = g.iter().map(|x| x * x + h.eps1).collect();
        close(&slot.second_moment(), &want, 1e-12).unwrap();
    }
}

pub fn adafactor_update_rms_is_clipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for _ in 0..200 {
        let c = random_case(&mut rng);
        let d = rng.gen_range(0.1..2.0);
        let h = AdafactorHyper {
            clip_threshold: d,
            ..AdafactorHyper::default()
        };
        let mut slot = Slot::for_param(OptimizerKind::Adafactor, &[c.rows, c.cols]);
        // unit lr and unit-rms weights make delta equal to -U
        let w = vec![1.0; c.w.len()];
        let delta = adafactor_delta(&w, &c.g, &mut slot, c.t, &h, 1.0).unwrap();
        assert!(rms(&delta).unwrap() <= d + 1e-12);
    }
}

pub fn zero_gradient_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..20 {
        let c = random_case(&mut rng);
        let g = vec![0.0; c.w.len()];
        let h = AdamHyper::default();
        let mut s = Slot::for_param(OptimizerKind::Adamw, &[c.w.len()]);
        let d = adamw_delta(&c.w, &g, &mut s, c.t, &h, c.lr).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
        let mut s = Slot::for_param(OptimizerKind::AdamwRms, &[c.w.len()]);
        let d = adamw_rms_delta(&c.w, &g, &mut s, c.t, &h, c.lr).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
        for shape in [vec![c.rows, c.cols], vec![c.w.len()]] {
            let mut s = Slot::for_param(OptimizerKind::Adafactor, &shape);
            let d = adafactor_delta(&c.w, &g, &mut s, c.t, &AdafactorHyper::default(), c.lr).unwrap();
            assert!(d.iter().all(|x| x.abs() < 1e-14), "{d:?}");
        }
    }
}

pub fn clip_bounds_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for _ in 0..50 {
        let mut a: Vec<f64> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut b: Vec<f64> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let max = rng.gen_range(0.1..3.0);
        let before = (a.iter().chain(&b).map(|x| x * x).sum::<f64>()).sqrt();
        let n = clip_global_norm(&mut [a.as_mut_slice(), b.as_mut_slice()], max).unwrap();
        assert!((n - before).abs() < 1e-12);
        let after = (a.iter().chain(&b).map(|x| x * x).sum::<f64>()).sqrt();
        assert!(after <= max + 1e-12);
        if before <= max {
            assert!((after - before).abs() < 1e-15);
        }
    }
}

fn tiny_params() -> (ModelConfig, ModelParams<f64>) {
    let cfg = ModelConfig {
        d_model: 4,
        d_ff: 6,
        num_layers_enc: 1,
        num_layers_dec: 1,
        num_heads: 2,
        d_kv: 2,
        vocab_size: 300,
        ..ModelConfig::preset("nano").unwrap()
    };
    let p = ModelParams::init(&cfg, 1).unwrap();
    (cfg, p)
}

pub fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
    let (_, mut params) = tiny_params();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        params.get_mut(name).unwrap().set_grad(Some(vec![0.01; n]));
    }
    let target = "decoder.block0.ffn.wo";
    params.get_mut(target).unwrap().grad_mut().unwrap()[3] = f64::NAN;
    for kind in [OptimizerKind::Adamw, OptimizerKind::AdamwRms, OptimizerKind::Adafactor] {
        let before = params.clone();
        let mut opt = Optimizer::new(kind, AdamHyper::default(), AdafactorHyper::default(), &params).unwrap();
        let err = opt.step(&mut params, 0.1).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGradient {
                name: target.to_string()
            }
        );
        assert_eq!(opt.t, 0);
        assert_eq!(before.fingerprint(), params.fingerprint());
    }
}

pub fn optimizer_applies_tensor_level_updates() {
    let (_, params) = tiny_params();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    for kind in [OptimizerKind::Adamw, OptimizerKind::AdamwRms, OptimizerKind::Adafactor] {
        let mut p = params.clone();
        let mut opt = Optimizer::new(kind, AdamHyper::default(), AdafactorHyper::default(), &p).unwrap();
        let mut slots: BTreeMap<String, Slot<f64>> = p
            .iter()
            .map(|(n, t)| (n.to_string(), Slot::for_param(kind, t.shape())))
            .collect();
        let mut expect = p.clone();
        for step in 1..=3u64 {
            for (_, t) in p.iter_mut() {
                let g: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                t.set_grad(Some(g));
            }
            for (name, t) in expect.iter_mut() {
                let g = p.get(name).unwrap().grad().unwrap().to_vec();
                let slot = slots.get_mut(name).unwrap();
                let d = match kind {
                    OptimizerKind::Adamw => adamw_delta(t.data(), &g, slot, step, &opt.adam, 0.01),
                    OptimizerKind::AdamwRms => adamw_rms_delta(t.data(), &g, slot, step, &opt.adam, 0.01),
                    OptimizerKind::Adafactor => adafactor_delta(t.data(), &g, slot, step, &opt.adafactor, 0.01),
                }
                .unwrap();
                t.data_mut().iter_mut().zip(d).for_each(|(w, d)| *w += d);
            }
            opt.step(&mut p, 0.01).unwrap();
            assert_eq!(opt.t, step);
        }
        for (name, t) in p.iter() {
            assert_eq!(t.data(), expect.get(name).unwrap().data(), "{kind:?} {name}");
        }
        let mut fresh = Optimizer::new(kind, opt.adam, opt.adafactor, &p).unwrap();
        let saved: BTreeMap<_, _> = opt.state_tensors().into_iter().collect();
        fresh.load_state(opt.t, &saved).unwrap();
        assert_eq!(fresh, opt);
    }
}
