//! Exhaustive mining against a brute-force argmax / argmin.

use std::time::Instant;

use distillkit::autograd::Tensor;
use distillkit::data::{all_batch, generate_synthetic, Occlusion, SyntheticTask, Target};
use distillkit::mining::{mine_epoch, mine_from_embeddings, MiningConfig, Triplet};
use distillkit::nn::{build, evaluate, Head, NetworkSpec, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest teacher positive and nearest student negative per anchor; the
/// first index wins ties.
fn brute_force(student: &Tensor, teacher: &Tensor, targets: &[Target], threshold: f64) -> Vec<Triplet> {
    let n = targets.len();
    let positive = |a: usize, j: usize| match (targets[a], targets[j]) {
        (Target::ClassId(x), Target::ClassId(y)) => x == y,
        (Target::AgeLike(x), Target::AgeLike(y)) => (x - y).abs() < threshold,
        _ => false,
    };
    (0..n)
        .map(|a| {
            let mut best_p = (usize::MAX, f64::NEG_INFINITY);
            let mut best_n = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                if positive(a, j) {
                    let d = sq(student.row(a), teacher.row(j));
                    if d > best_p.1 {
                        best_p = (j, d);
                    }
                } else {
                    let d = sq(student.row(a), student.row(j));
                    if d < best_n.1 {
                        best_n = (j, d);
                    }
                }
            }
            Triplet {
                anchor_idx: a,
                positive_idx: best_p.0,
                negative_idx: best_n.0,
            }
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn exhaustive_mining_matches_brute_force_on_random_embeddings() {
    let start = Instant::now();
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(10..=200);
        let d = rng.gen_range(2..9);
        let student = random(&mut rng, n, d);
        let teacher = random(&mut rng, n, d);
        let regression = seed % 3 == 2;
        let targets: Vec<Target> = if regression {
            (0..n).map(|_| Target::AgeLike(rng.gen_range(20.0..70.0))).collect()
        } else {
            let k = rng.gen_range(2..6);
            (0..n).map(|i| Target::ClassId(if i < k { i } else { rng.gen_range(0..k) })).collect()
        };
        let cfg = MiningConfig {
            seed,
            ..MiningConfig::exhaustive()
        };
        let mined = mine_from_embeddings(&student, &teacher, &targets, &cfg, seed).unwrap();
        assert_eq!(mined, brute_force(&student, &teacher, &targets, cfg.regression_pos_threshold), "seed {seed}");
    }
    assert!(start.elapsed().as_secs() < 30);
}

pub fn exhaustive_mine_epoch_matches_brute_force_on_networks() {
    let start = Instant::now();
    for seed in 0..20u64 {
        let task = if seed % 2 == 0 {
            SyntheticTask::Expression { num_classes: 4 }
        } else {
            SyntheticTask::Age
        };
        let data = generate_synthetic(task, 200, 0.3, seed).unwrap();
        let head = match task {
            SyntheticTask::Age => Head::Regressor,
            _ => Head::Classifier { num_classes: 4 },
        };
        let spec = NetworkSpec::plain_small([1, 16, 16], head);
        let teacher = build(&spec, seed, Role::Teacher).unwrap();
        let student = build(&spec, seed + 100, Role::Student).unwrap();
        let occ = task.default_occlusion();
        let cfg = MiningConfig {
            seed,
            ..MiningConfig::exhaustive()
        };
        let mined = mine_epoch(&student, &teacher, &spec, &data.train, occ, &cfg, 0).unwrap();

        let e_s = evaluate(&student, &spec, &all_batch(&data.train, occ).unwrap(), 64).unwrap().embedding;
        let e_t = evaluate(&teacher, &spec, &all_batch(&data.train, Occlusion::None).unwrap(), 64)
            .unwrap()
            .embedding;
        let targets: Vec<Target> = data.train.iter().map(|i| i.target).collect();
        assert_eq!(mined, brute_force(&e_s, &e_t, &targets, cfg.regression_pos_threshold), "seed {seed}");
    }
    assert!(start.elapsed().as_secs() < 30);
}
