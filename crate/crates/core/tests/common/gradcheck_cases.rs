
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t5lab::tensor::{Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds a scalar from the leaves; must be deterministic.
type Graph = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// ||a - b|| / max(||a||, ||b||, 1e-3)
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-3)
}

fn eval(inputs: &[Tensor<f64>], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    tape.item(out)
}

/// Returns the worst relative error over all trainable inputs.
fn check(inputs: Vec<Tensor<f64>>, f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_trainable() {
            continue;
        }
        let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            numeric[j] = (eval(&plus, f) - eval(&minus, f)) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().requires_grad()
}

/// Contracts `v` against a fixed random weighting so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let n = tape.value(v).len();
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv = tape.constant(shape, w).unwrap();
    let p = tape.mul(v, wv).unwrap();
    tape.sum(p)
}

fn run_cases(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        worst = worst.max(case(&mut rng, i));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

pub fn add_and_broadcast_add() {
    run_cases("add", |rng, seed| {
        let (b, n, m) = (dims(rng), dims(rng), dims(rng));
        let broadcast = rng.gen_bool(0.5);
        let a = rand_tensor(rng, &[b, n, m]);
        let bt = if broadcast {
            rand_tensor(rng, &[n, m])
        } else {
            rand_tensor(rng, &[b, n, m])
        };
        check(vec![a, bt], &move |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, s, seed)
        })
    });
}

pub fn multiply() {
    run_cases("mul", |rng, seed| {
        let (b, n) = (dims(rng), dims(rng));
        let broadcast = rng.gen_bool(0.5);
        let a = rand_tensor(rng, &[b, n]);
        let bt = if broadcast {
            rand_tensor(rng, &[n])
        } else {
            rand_tensor(rng, &[b, n])
        };
        check(vec![a, bt], &move |t, v| {
            let s = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, s, seed)
        })
    });
}

pub fn scale() {
    run_cases("scale", |rng, seed| {
        let shape = [dims(rng), dims(rng)];
        let a = rand_tensor(rng, &shape);
        let c: f64 = rng.gen_range(-3.0..3.0);
        check(vec![a], &move |t, v| {
            let s = t.scale(v[0], c);
            weighted_sum(t, s, seed)
        })
    });
}

pub fn matmul_shared_and_batched() {
    run_cases("matmul", |rng, seed| {
        let (bt, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
        let batched = rng.gen_bool(0.5);
        let a = rand_tensor(rng, &[bt, m, k]);
        let b = if batched {
            rand_tensor(rng, &[bt, k, n])
        } else {
            rand_tensor(rng, &[k, n])
        };
        check(vec![a, b], &move |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, c, seed)
        })
    });
}

pub fn transpose_and_reshape() {
    run_cases("transpose", |rng, seed| {
        let shape = [dims(rng), dims(rng), dims(rng), dims(rng)];
        let d0 = rng.gen_range(0..4);
        let d1 = rng.gen_range(0..4);
        let a = rand_tensor(rng, &shape);
        check(vec![a], &move |t, v| {
            let x = t.transpose(v[0], d0, d1).unwrap();
            let n: usize = shape.iter().product();
            let x = t.reshape(x, &[n]).unwrap();
            weighted_sum(t, x, seed)
        })
    });
}

pub fn concatenate() {
    run_cases("concat", |rng, seed| {
        let rows = dims(rng);
        let axis = rng.gen_range(0..2);
        let shapes: Vec<[usize; 2]> = (0..3)
            .map(|_| {
                let e = dims(rng);
                if axis == 0 {
                    [e, rows]
                } else {
                    [rows, e]
                }
            })
            .collect();
        let parts: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
        check(parts, &move |t, v| {
            let c = t.concat(v, axis).unwrap();
            weighted_sum(t, c, seed)
        })
    });
}

pub fn embedding_gather() {
    run_cases("embedding", |rng, seed| {
        let (rows, d) = (dims(rng) + 1, dims(rng));
        let ids: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..rows)).collect();
        let table = rand_tensor(rng, &[rows, d]);
        check(vec![table], &move |t, v| {
            let e = t.embedding(v[0], &ids).unwrap();
            weighted_sum(t, e, seed)
        })
    });
}

pub fn gelu_sigmoid() {
    run_cases("gelu", |rng, seed| {
        let shape = [dims(rng), dims(rng)];
        let a = rand_tensor(rng, &shape);
        check(vec![a], &move |t, v| {
            let g = t.gelu(v[0]);
            weighted_sum(t, g, seed)
        })
    });
    run_cases("sigmoid", |rng, seed| {
        let shape = [dims(rng), dims(rng)];
        let a = rand_tensor(rng, &shape);
        check(vec![a], &move |t, v| {
            let g = t.sigmoid(v[0]);
            weighted_sum(t, g, seed)
        })
    });
}

pub fn softmax_and_masked_fill() {
    run_cases("softmax", |rng, seed| {
        let (r, c) = (dims(rng), dims(rng) + 1);
        let a = rand_tensor(rng, &[r, c]);
        // keep at least one unmasked entry per row
        let mask: Vec<bool> = (0..r * c).map(|i| i % c != 0 && rng.gen_bool(0.3)).collect();
        check(vec![a], &move |t, v| {
            let m = t.masked_fill(v[0], &mask, -1e9).unwrap();
            let s = t.softmax(m).unwrap();
            weighted_sum(t, s, seed)
        })
    });
}

pub fn rms_norm() {
    run_cases("rms_norm", |rng, seed| {
        let (r, d) = (dims(rng), dims(rng) + 1);
        let x = rand_tensor(rng, &[r, d]);
        let w = rand_tensor(rng, &[d]);
        check(vec![x, w], &move |t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-6).unwrap();
            weighted_sum(t, y, seed)
        })
    });
}

pub fn dropout_with_fixed_mask() {
    run_cases("dropout", |rng, seed| {
        let shape = [dims(rng), dims(rng)];
        let a = rand_tensor(rng, &shape);
        check(vec![a], &move |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            let d = t.dropout(v[0], 0.3, &mut mask_rng);
            weighted_sum(t, d, seed)
        })
    });
}

pub fn cross_entropy() {
    run_cases("cross_entropy", |rng, _| {
        let (n, vocab) = (dims(rng) + 1, dims(rng) + 1);
        let mut targets: Vec<i64> = (0..n).map(|_| rng.gen_range(0..vocab as i64)).collect();
        targets[0] = -100;
        let logits = rand_tensor(rng, &[n, vocab]);
        check(vec![logits], &move |t, v| t.cross_entropy(v[0], &targets, -100).unwrap())
    });
}

pub fn composed_graph() {
    run_cases("composed", |rng, seed| {
        let (b, s, d) = (dims(rng), dims(rng), dims(rng) + 1);
        let x = rand_tensor(rng, &[b, s, d]);
        let w = rand_tensor(rng, &[d, d]);
        let g = rand_tensor(rng, &[d]);
        check(vec![x, w, g], &move |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.gelu(h);
            let h = t.rms_norm(h, v[2], 1e-6).unwrap();
            let ht = t.transpose(h, 1, 2).unwrap();
            let sc = t.matmul(h, ht).unwrap();
            let p = t.softmax(sc).unwrap();
            let o = t.matmul(p, h).unwrap();
            weighted_sum(t, o, seed)
        })
    });
}

pub fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 4, 5]);
    let w = rand_tensor(&mut rng, &[5, 5]);
    let grads = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.softmax(h).unwrap();
        let s = weighted_sum(&mut tape, h, 3);
        tape.backward(s).unwrap();
        (tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec())
    };
    let (a1, b1) = grads();
    let (a2, b2) = grads();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

pub fn identity_product_is_exact_for_integers() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-9..10) as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-9..10) as f64).collect();
        let eye: Vec<f64> = (0..k * k).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let av = tape.constant(vec![m, k], a).unwrap();
        let bv = tape.constant(vec![k, n], b).unwrap();
        let iv = tape.constant(vec![k, k], eye).unwrap();
        let ai = tape.matmul(av, iv).unwrap();
        let lhs = tape.matmul(ai, bv).unwrap();
        let rhs = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.value(lhs), tape.value(rhs));
    }
}

/// Finite-difference checks, one per primitive family.
pub const PRIMITIVES: &[(&str, fn())] = &[
    ("add_and_broadcast_add", add_and_broadcast_add),
    ("multiply", multiply),
    ("scale", scale),
    ("matmul_shared_and_batched", matmul_shared_and_batched),
    ("transpose_and_reshape", transpose_and_reshape),
    ("concatenate", concatenate),
    ("embedding_gather", embedding_gather),
    ("gelu_sigmoid", gelu_sigmoid),
    ("softmax_and_masked_fill", softmax_and_masked_fill),
    ("rms_norm", rms_norm),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("cross_entropy", cross_entropy),
    ("composed_graph", composed_graph),
];
