//! Central finite-difference checks of every differentiable tape op.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seaice_core::autodiff::{Tape, Tensor, Var};

const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const TRIALS: usize = 50;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Reduces `out` against a fixed random weighting so every output element
/// gets a distinct upstream gradient.
fn eval(inputs: &[Tensor], weights: Option<&Tensor>, build: &Build) -> (f64, Vec<Vec<f64>>) {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| t.leaf(x.clone().with_grad()))
        .collect();
    let out = build(&mut t, &vars);
    let loss = match weights {
        Some(w) => {
            let w = t.constant(w.clone());
            let p = t.mul(out, w).unwrap();
            t.mean(p)
        }
        None => out,
    };
    let value = t.value(loss)[0];
    let g = t.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|v| g.get(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    (value, grads)
}

fn check(name: &str, rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let out_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let o = build(&mut t, &vars);
        t.shape(o).to_vec()
    };
    let weights = (!out_shape.is_empty()).then(|| rand_tensor(rng, &out_shape));
    let (_, analytic) = eval(&inputs, weights.as_ref(), build);
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fp = eval(&plus, weights.as_ref(), build).0;
            let fm = eval(&minus, weights.as_ref(), build).0;
            *slot = (fp - fm) / (2.0 * H);
        }
        let a = &analytic[k];
        assert_eq!(a.len(), numeric.len(), "{name}: input {k} got no gradient");
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = if na.max(nn) < 1e-12 {
            diff
        } else {
            diff / na.max(nn)
        };
        worst = worst.max(rel);
    }
    worst
}

fn run(
    name: &'static str,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>),
) -> (&'static str, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (inputs, build) = case(&mut rng);
        worst = worst.max(check(name, &mut rng, inputs, &*build));
    }
    (name, worst)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

/// Worst relative error of every op over its trials.
pub fn all() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push(run("add", 1, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        )
    }));
    out.push(run("sub_broadcast", 2, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        )
    }));
    out.push(run("mul", 3, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        )
    }));
    out.push(run("mul_broadcast", 4, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[1, c])],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        )
    }));

    out.push(run("matmul", 5, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        (
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        )
    }));
    out.push(run("affine", 6, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        (
            vec![
                rand_tensor(rng, &[m, k]),
                rand_tensor(rng, &[k, n]),
                rand_tensor(rng, &[n]),
            ],
            Box::new(|t, v| t.affine(v[0], v[1], v[2]).unwrap()),
        )
    }));

    out.push(run("relu", 7, |rng| {
        let (r, c) = dims(rng);
        // Keep away from the kink.
        let x = Tensor::from_fn(&[r, c], |_| {
            let v: f64 = rng.random_range(0.01..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        (vec![x], Box::new(|t, v| t.relu(v[0])))
    }));
    out.push(run("gelu", 8, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.gelu(v[0])),
        )
    }));
    out.push(run("tanh", 9, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.tanh(v[0])),
        )
    }));
    out.push(run("exp", 10, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.exp(v[0])),
        )
    }));
    out.push(run("scale", 11, |rng| {
        let (r, c) = dims(rng);
        let s: f64 = rng.random_range(-2.0..2.0);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(move |t, v| t.scale(v[0], s)),
        )
    }));

    out.push(run("mean", 12, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.mean(v[0])),
        )
    }));
    out.push(run("mse_loss", 13, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.mse_loss(v[0], v[1]).unwrap()),
        )
    }));

    out.push(run("concat", 14, |rng| {
        let (r, c) = dims(rng);
        let c2 = rng.random_range(1..4);
        let axis = rng.random_range(0..2);
        let second = if axis == 1 { [r, c2] } else { [c2, c] };
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &second)],
            Box::new(move |t, v| t.concat(&[v[0], v[1], v[0]], axis).unwrap()),
        )
    }));
    out.push(run("slice", 15, |rng| {
        let (r, c) = dims(rng);
        let c = c + 2;
        let start = rng.random_range(0..c - 1);
        let len = rng.random_range(1..=c - start);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(move |t, v| t.slice(v[0], 1, start, len).unwrap()),
        )
    }));
    out.push(run("transpose", 16, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(|t, v| t.transpose(v[0]).unwrap()),
        )
    }));
    out.push(run("reshape", 17, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(move |t, v| t.reshape(v[0], &[c, r]).unwrap()),
        )
    }));
    out.push(run("gather", 18, |rng| {
        let (r, c) = dims(rng);
        let n = rng.random_range(1..12);
        let idx: Arc<[usize]> = (0..n).map(|_| rng.random_range(0..r * c)).collect();
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(move |t, v| t.gather(v[0], idx.clone(), &[n]).unwrap()),
        )
    }));

    out.push(run("moving_average_1d", 19, |rng| {
        let r = rng.random_range(1..4);
        let len = rng.random_range(1..30);
        let k = rng.random_range(1..26);
        (
            vec![rand_tensor(rng, &[r, len])],
            Box::new(move |t, v| t.moving_average_1d(v[0], k).unwrap()),
        )
    }));

    out.push(run("mlp", 20, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        (
            vec![
                rand_tensor(rng, &[m, k]),
                rand_tensor(rng, &[k, n]),
                rand_tensor(rng, &[n]),
                rand_tensor(rng, &[m, n]),
            ],
            Box::new(|t, v| {
                let h = t.affine(v[0], v[1], v[2]).unwrap();
                let h = t.gelu(h);
                let e = t.tanh(h);
                let e = t.exp(e);
                let y = t.mul(h, e).unwrap();
                t.mse_loss(y, v[3]).unwrap()
            }),
        )
    }));
    out
}
