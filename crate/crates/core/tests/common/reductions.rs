//! λ = 0 and τ = 1 reductions.

use distillkit::autograd::{softmax_with_temperature, Graph, Tensor};
use distillkit::losses::{hint_kd_loss, standard_kd_loss, task_loss, triplet_kd_loss, DistillConfig, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap()
}

fn plain_task(logits: &Tensor, targets: &Targets) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = task_loss(&mut g, l, targets).unwrap();
    g.value(out).item()
}

pub fn zero_lambda_reduces_every_objective_to_the_task_loss() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, d) = (rng.gen_range(1..8), rng.gen_range(2..7), rng.gen_range(2..9));
        let targets = Targets::Classes {
            labels: (0..n).map(|_| rng.gen_range(0..k)).collect(),
            num_classes: k,
        };
        let logits = random_tensor(&mut rng, &[n, k]);
        let expected = plain_task(&logits, &targets);

        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let kd = DistillConfig::standard(0.0, rng.gen_range(1.0..8.0));
        let out = standard_kd_loss(&mut g, l, &random_tensor(&mut rng, &[n, k]), &targets, &kd).unwrap();
        assert!((g.value(out).item() - expected).abs() <= 1e-12, "standard, seed {seed}");

        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let h = g.constant(random_tensor(&mut rng, &[n, d]));
        let out = hint_kd_loss(&mut g, h, &random_tensor(&mut rng, &[n, d]), l, &targets, &DistillConfig::hint(0.0)).unwrap();
        assert!((g.value(out).item() - expected).abs() <= 1e-12, "hint, seed {seed}");

        for normalize in [false, true] {
            let mut g = Graph::new();
            let l = g.constant(logits.clone());
            let a = g.constant(random_tensor(&mut rng, &[n, d]));
            let neg = g.constant(random_tensor(&mut rng, &[n, d]));
            let mut cfg = DistillConfig::triplet(0.0, rng.gen_range(0.0..0.5));
            cfg.normalize_embeddings = normalize;
            let out = triplet_kd_loss(&mut g, a, &random_tensor(&mut rng, &[n, d]), neg, l, &targets, &cfg).unwrap();
            assert!((g.value(out).item() - expected).abs() <= 1e-12, "triplet, seed {seed}");
        }
    }
}

pub fn zero_lambda_on_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pred = random_tensor(&mut rng, &[5, 1]);
    let targets = Targets::Values((0..5).map(|_| rng.gen_range(20.0..70.0)).collect());
    let expected = plain_task(&pred, &targets);
    let mut g = Graph::new();
    let p = g.constant(pred);
    let h = g.constant(random_tensor(&mut rng, &[5, 3]));
    let out = hint_kd_loss(&mut g, h, &random_tensor(&mut rng, &[5, 3]), p, &targets, &DistillConfig::hint(0.0)).unwrap();
    assert!((g.value(out).item() - expected).abs() <= 1e-12);
}

pub fn plain_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// τ = 1 against the plain softmax on seeded random logits.
pub fn unit_temperature_is_plain_softmax() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..10);
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let soft = softmax_with_temperature(&z, 1.0).unwrap();
        for (a, b) in soft.iter().zip(plain_softmax(&z)) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}");
        }
    }
}
