//! Finite-difference gradient checks of every training loss.

use std::time::Instant;

use distillkit::autograd::{Graph, Tensor, Var};
use distillkit::losses::{
    hint_kd_loss, standard_kd_loss, task_loss, triplet_kd_loss, triplet_term, DistillConfig, Targets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 100;

/// Largest relative error between backprop and central differences over
/// every element of every input.
fn max_rel_error(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |perturbed: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_classes(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Targets {
    Targets::Classes {
        labels: (0..n).map(|_| rng.gen_range(0..k)).collect(),
        num_classes: k,
    }
}

fn run(name: &str, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = instance(&mut rng);
        assert!(err <= TOL, "{name}: seed {seed} relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("{name}: worst relative error {worst:e} over {INSTANCES} instances");
    assert!(start.elapsed().as_secs() < 60);
}

/// Redraw until `ok` holds, keeping instances away from kinks of |·| and
/// the hinge.
fn draw<T>(rng: &mut ChaCha8Rng, mut make: impl FnMut(&mut ChaCha8Rng) -> T, ok: impl Fn(&T) -> bool) -> T {
    loop {
        let v = make(rng);
        if ok(&v) {
            return v;
        }
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalized(t: &Tensor) -> Tensor {
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Hinge arguments `‖a−p‖² − ‖a−n‖² + α` per row.
fn hinge_args(a: &Tensor, p: &Tensor, n: &Tensor, alpha: f64) -> Vec<f64> {
    (0..a.shape()[0])
        .map(|i| sq(a.row(i), p.row(i)) - sq(a.row(i), n.row(i)) + alpha)
        .collect()
}

pub fn task_cross_entropy() {
    run("task CE", |rng| {
        let (n, k) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let targets = random_classes(rng, n, k);
        let logits = random_tensor(rng, &[n, k], 3.0);
        max_rel_error(&[logits], &|g, v| task_loss(g, v[0], &targets).unwrap())
    });
}

pub fn task_absolute_error() {
    run("task MAE", |rng| {
        let n = rng.gen_range(1..6);
        let (pred, values) = draw(
            rng,
            |rng| {
                let pred = random_tensor(rng, &[n, 1], 5.0);
                let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                (pred, values)
            },
            |(p, y)| p.data().iter().zip(y).all(|(a, b)| (a - b).abs() > 1e-2),
        );
        let targets = Targets::Values(values);
        max_rel_error(&[pred], &|g, v| task_loss(g, v[0], &targets).unwrap())
    });
}

pub fn standard_kd() {
    run("standard KD", |rng| {
        let (n, k) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let targets = random_classes(rng, n, k);
        let student = random_tensor(rng, &[n, k], 3.0);
        let teacher = random_tensor(rng, &[n, k], 3.0);
        let cfg = DistillConfig::standard(rng.gen_range(0.0..=1.0), rng.gen_range(1.0..6.0));
        max_rel_error(&[student], &|g, v| {
            standard_kd_loss(g, v[0], &teacher, &targets, &cfg).unwrap()
        })
    });
}

pub fn hint_kd() {
    run("hint KD", |rng| {
        let (n, k, d) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..7));
        let targets = random_classes(rng, n, k);
        let (hint, teacher) = draw(
            rng,
            |rng| (random_tensor(rng, &[n, d], 2.0), random_tensor(rng, &[n, d], 2.0)),
            |(s, t)| s.data().iter().zip(t.data()).all(|(a, b)| (a - b).abs() > 1e-2),
        );
        let logits = random_tensor(rng, &[n, k], 3.0);
        let cfg = DistillConfig::hint(rng.gen_range(0.0..=1.0));
        max_rel_error(&[hint, logits], &|g, v| {
            hint_kd_loss(g, v[0], &teacher, v[1], &targets, &cfg).unwrap()
        })
    });
}

pub fn triplet_hinge_term() {
    run("triplet term", |rng| {
        let (m, d) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let alpha = rng.gen_range(0.0..0.5);
        let (a, p, neg) = draw(
            rng,
            |rng| {
                (
                    random_tensor(rng, &[m, d], 1.0),
                    random_tensor(rng, &[m, d], 1.0),
                    random_tensor(rng, &[m, d], 1.0),
                )
            },
            |(a, p, n)| hinge_args(a, p, n, alpha).iter().all(|r| r.abs() > 1e-2),
        );
        max_rel_error(&[a, neg], &|g, v| {
            let t = triplet_term(g, v[0], &p, v[1], alpha).unwrap();
            g.sum(t, None).unwrap()
        })
    });
}

pub fn triplet_kd_raw_and_normalized() {
    run("triplet KD", |rng| {
        let (m, k, d) = (rng.gen_range(1..5), rng.gen_range(2..5), rng.gen_range(2..7));
        let normalize = rng.gen_bool(0.5);
        let mut cfg = DistillConfig::triplet(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..0.5));
        cfg.normalize_embeddings = normalize;
        let targets = random_classes(rng, m, k);
        let alpha = cfg.margin_alpha;
        let (a, p, neg) = draw(
            rng,
            |rng| {
                (
                    random_tensor(rng, &[m, d], 1.0),
                    random_tensor(rng, &[m, d], 1.0),
                    random_tensor(rng, &[m, d], 1.0),
                )
            },
            |(a, p, n)| {
                let args = if normalize {
                    hinge_args(&normalized(a), &normalized(p), &normalized(n), alpha)
                } else {
                    hinge_args(a, p, n, alpha)
                };
                args.iter().all(|r| r.abs() > 1e-2)
            },
        );
        let logits = random_tensor(rng, &[m, k], 3.0);
        max_rel_error(&[a, neg, logits], &|g, v| {
            triplet_kd_loss(g, v[0], &p, v[1], v[2], &targets, &cfg).unwrap()
        })
    });
}
