//! Embedding extraction and the linear margin models on top of it.

use distillkit::data::{generate_synthetic, Occlusion, SyntheticTask, Target};
use distillkit::ensemble::{
    ensemble_predict, extract_embeddings, fit_at_c, fit_margin_model, EmbeddingSet, EmbeddingSource, MarginFitConfig,
    MarginKind,
};
use distillkit::nn::{build, Head, NetworkSpec, Role};
use distillkit::trainer::Predictions;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const BINARY: MarginKind = MarginKind::HingeClassifier { num_classes: 2 };

fn set(rows: &[Vec<f64>], targets: Vec<Target>) -> EmbeddingSet {
    EmbeddingSet::new(rows.concat(), rows[0].len(), EmbeddingSource::StandardKd, targets).unwrap()
}

/// Two overlapping Gaussian clouds in the plane.
fn clouds(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let k = i % 2;
        let c = if k == 1 { gap } else { -gap };
        rows.push(vec![c + normal.sample(rng), 0.5 * c + normal.sample(rng)]);
        labels.push(k);
    }
    (rows, labels)
}

fn accuracy(pred: &Predictions, labels: &[usize]) -> f64 {
    let p = pred.labels().unwrap();
    p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[test]
fn hinge_fit_is_close_to_the_best_random_hyperplane() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = clouds(&mut rng, 40, 0.8);
        let train = set(&rows, labels.iter().map(|&k| Target::ClassId(k)).collect());
        let (model, _) = fit_at_c(&train, BINARY, 10.0, &MarginFitConfig::default()).unwrap();
        let ours = accuracy(&model.predict(&train).unwrap(), &labels);

        let mut best: f64 = 0.0;
        for _ in 0..10_000 {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let b: f64 = rng.gen_range(-3.0..3.0);
            let hits = rows
                .iter()
                .zip(&labels)
                .filter(|(r, &k)| usize::from(theta.cos() * r[0] + theta.sin() * r[1] + b > 0.0) == k)
                .count();
            best = best.max(hits as f64 / 40.0);
        }
        assert!(ours >= best - 2.0 / 40.0, "seed {seed}: {ours} vs best {best}");
    }
}

#[test]
fn pegasos_reaches_the_grid_minimum_of_the_primal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40;
    let xs: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { 1.0 } else { -1.0 } + rng.gen_range(-1.5..1.5)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let c = 1.0;
    let lambda = 1.0 / (c * n as f64);
    let primal = |w: f64, b: f64| {
        let hinge: f64 = xs
            .iter()
            .zip(&labels)
            .map(|(x, &k)| {
                let y = if k == 1 { 1.0 } else { -1.0 };
                (1.0 - y * (w * x + b)).max(0.0)
            })
            .sum::<f64>()
            / n as f64;
        0.5 * lambda * (w * w + b * b) + hinge
    };
    let mut grid_min = f64::INFINITY;
    for i in 0..=600 {
        for j in 0..=600 {
            grid_min = grid_min.min(primal(-1.0 + 4.0 * i as f64 / 600.0, -2.0 + 4.0 * j as f64 / 600.0));
        }
    }
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let train = set(&rows, labels.iter().map(|&k| Target::ClassId(k)).collect());
    let cfg = MarginFitConfig {
        epochs: 2000,
        ..MarginFitConfig::default()
    };
    let (model, traces) = fit_at_c(&train, BINARY, c, &cfg).unwrap();
    let ours = primal(model.weights[0][0], model.bias[0]);
    assert!((ours - *traces[0].last().unwrap()).abs() < 1e-12);
    assert!(ours <= grid_min * 1.02 + 1e-9, "{ours} vs grid {grid_min}");
}

#[test]
fn objective_traces_never_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..90).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let targets: Vec<Target> = (0..90).map(|i| Target::ClassId(i % 3)).collect();
    let (_, traces) = fit_at_c(&set(&rows, targets), MarginKind::HingeClassifier { num_classes: 3 }, 100.0, &MarginFitConfig::default())
        .unwrap();
    assert_eq!(traces.len(), 3);
    for trace in &traces {
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }
    let ages: Vec<Target> = rows.iter().map(|r| Target::AgeLike(40.0 + 10.0 * r[0])).collect();
    let (model, traces) = fit_at_c(&set(&rows, ages), MarginKind::EpsilonRegressor, 100.0, &MarginFitConfig::default()).unwrap();
    assert!(traces[0].windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(model.weights.len(), 1);
}

fn small_embeddings(n: usize) -> (Vec<distillkit::data::LabeledImage>, EmbeddingSet) {
    let data = generate_synthetic(SyntheticTask::Expression { num_classes: 4 }, 200, 0.3, 0).unwrap();
    let spec = NetworkSpec::plain_small([1, 16, 16], Head::Classifier { num_classes: 4 });
    let params = build(&spec, 0, Role::Student).unwrap();
    let images = data.test[..n].to_vec();
    let e = extract_embeddings(&params, &spec, &images, Occlusion::UpperHalfHidden, EmbeddingSource::TripletKd).unwrap();
    (images, e)
}

#[test]
fn extraction_gives_one_row_per_image() {
    let (images, e) = small_embeddings(5);
    assert_eq!((e.len(), e.dim()), (5, 64));
    assert_eq!(e.blocks().len(), 1);
    assert_eq!(e.blocks()[0].source, EmbeddingSource::TripletKd);
    assert_eq!(e.targets(), images.iter().map(|i| i.target).collect::<Vec<_>>().as_slice());
    let (_, again) = small_embeddings(5);
    assert_eq!(e, again);
}

#[test]
fn duplicate_images_give_identical_rows() {
    let data = generate_synthetic(SyntheticTask::Gender, 100, 0.3, 1).unwrap();
    let spec = NetworkSpec::plain_small([1, 16, 16], Head::Classifier { num_classes: 2 });
    let params = build(&spec, 1, Role::Teacher).unwrap();
    let images = vec![data.test[0].clone(), data.test[1].clone(), data.test[0].clone()];
    let e = extract_embeddings(&params, &spec, &images, Occlusion::None, EmbeddingSource::StandardKd).unwrap();
    assert_eq!(e.row(0), e.row(2));
    assert_ne!(e.row(0), e.row(1));
}

#[test]
fn concatenated_ensemble_matches_a_model_on_the_joined_set() {
    let (_, a) = small_embeddings(40);
    let b = a.select_rows(&(0..40).rev().collect::<Vec<_>>());
    assert!(a.concat(&b).is_err());
    let joined = a.concat(&a).unwrap();
    assert_eq!(joined.dim(), 128);
    let fit = fit_margin_model(&joined, &joined, MarginKind::HingeClassifier { num_classes: 4 }, &MarginFitConfig::default())
        .unwrap();
    assert_eq!(ensemble_predict(&fit.model, &a, &a).unwrap(), fit.model.predict(&joined).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_follow_row_permutations(seed in any::<u64>(), shift in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = clouds(&mut rng, 60, 1.0);
        let train = set(&rows, labels.iter().map(|&k| Target::ClassId(k)).collect());
        let cfg = MarginFitConfig { epochs: 20, ..MarginFitConfig::default() };
        let (model, _) = fit_at_c(&train, BINARY, 1.0, &cfg).unwrap();
        let mut order: Vec<usize> = (0..60).collect();
        order.rotate_left(shift);
        let base = model.predict(&train).unwrap();
        let moved = model.predict(&train.select_rows(&order)).unwrap();
        let expect: Vec<usize> = order.iter().map(|&i| base.labels().unwrap()[i]).collect();
        prop_assert_eq!(moved.labels().unwrap(), expect.as_slice());
    }

    #[test]
    fn feature_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = clouds(&mut rng, 60, 2.5);
        let targets: Vec<Target> = labels.iter().map(|&k| Target::ClassId(k)).collect();
        let swapped: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[1], r[0]]).collect();
        let cfg = MarginFitConfig { epochs: 20, ..MarginFitConfig::default() };
        let (a, _) = fit_at_c(&set(&rows, targets.clone()), BINARY, 1.0, &cfg).unwrap();
        let (b, _) = fit_at_c(&set(&swapped, targets.clone()), BINARY, 1.0, &cfg).unwrap();
        prop_assert!((a.weights[0][0] - b.weights[0][1]).abs() < 1e-9);
        prop_assert!((a.weights[0][1] - b.weights[0][0]).abs() < 1e-9);
        let pa = a.predict(&set(&rows, targets.clone())).unwrap();
        let pb = b.predict(&set(&swapped, targets)).unwrap();
        prop_assert_eq!(pa, pb);
    }
}
