//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 7 and 9 run the bundled synthetic-expression config through
//! `cmd_run` for seeds 0 to 4; multi-seed criteria compare means over those
//! seeds.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use distillkit::cli::{cmd_run, RunReport};
use distillkit::stats::{mcnemar_from_counts, McNemarMethod};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const RUN_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Run `f`, turning a panic into a failed outcome.
fn guarded(budget: Duration, f: impl FnOnce() -> String) -> Outcome {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    match r {
        Ok(detail) => check(took < budget, format!("{detail}; {:.1} s (limit {} s)", took.as_secs_f64(), budget.as_secs())),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        }
    }
}

fn gradients() -> Outcome {
    use common::gradcheck::*;
    guarded(Duration::from_secs(60), || {
        task_cross_entropy();
        task_absolute_error();
        standard_kd();
        hint_kd();
        triplet_hinge_term();
        triplet_kd_raw_and_normalized();
        "task CE, task MAE, standard KD, hint KD, triplet term and triplet KD: 100 instances each within 1e-3".into()
    })
}

fn mining() -> Outcome {
    use common::mining::*;
    guarded(Duration::from_secs(30), || {
        exhaustive_mining_matches_brute_force_on_random_embeddings();
        exhaustive_mine_epoch_matches_brute_force_on_networks();
        "exhaustive mining equals brute force on 30 embedding seeds and 20 network seeds".into()
    })
}

fn reductions() -> Outcome {
    use common::reductions::*;
    guarded(Duration::from_secs(60), || {
        zero_lambda_reduces_every_objective_to_the_task_loss();
        zero_lambda_on_regression();
        unit_temperature_is_plain_softmax();
        "λ=0 objectives equal the task loss to 1e-12; τ=1 equals softmax to 1e-12".into()
    })
}

fn statistics() -> Outcome {
    let exact = mcnemar_from_counts(15, 0);
    let chi = mcnemar_from_counts(10, 10);
    let pass = exact.method == McNemarMethod::ExactBinomial
        && (exact.p_value - 6.1e-5).abs() <= 1e-3
        && chi.method == McNemarMethod::ChiSquare
        && (chi.p_value - 0.823).abs() <= 1e-3;
    check(
        pass,
        format!("b=15,c=0 → p={:.3e} ({:?}); b=10,c=10 → p={:.4} ({:?})", exact.p_value, exact.method, chi.p_value, chi.method),
    )
}

fn acc(r: &RunReport, model: &str) -> f64 {
    r.models[model].metrics["accuracy"]
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_seed(reports: &[RunReport], f: impl Fn(&RunReport) -> f64) -> String {
    reports.iter().map(|r| format!("{:+.1}", 100.0 * f(r))).collect::<Vec<_>>().join(" ")
}

fn curriculum(reports: &[RunReport]) -> Outcome {
    let gap = mean(reports.iter().map(|r| acc(r, "student") - acc(r, "teacher_occluded")));
    let kd_gain = mean(reports.iter().map(|r| acc(r, "distilled") - acc(r, "student")));
    let significant = reports
        .iter()
        .filter(|r| r.models["distilled"].paired["student"].p_value < 0.05 && acc(r, "distilled") > acc(r, "student"))
        .count();
    check(
        gap >= 0.05 && kd_gain >= 0.0 && significant >= 3,
        format!(
            "student − occluded teacher {:.1} pts (per seed {}); distilled − student {:+.1} pts (per seed {}); p<0.05 in {significant}/5",
            100.0 * gap,
            per_seed(reports, |r| acc(r, "student") - acc(r, "teacher_occluded")),
            100.0 * kd_gain,
            per_seed(reports, |r| acc(r, "distilled") - acc(r, "student")),
        ),
    )
}

fn triplet_parity(reports: &[RunReport]) -> Outcome {
    let diff = mean(reports.iter().map(|r| acc(r, "triplet") - acc(r, "distilled")));
    check(
        diff.abs() <= 0.02,
        format!(
            "triplet − standard KD {:+.1} pts (per seed {})",
            100.0 * diff,
            per_seed(reports, |r| acc(r, "triplet") - acc(r, "distilled"))
        ),
    )
}

fn ensemble(reports: &[RunReport]) -> Outcome {
    let best_single = |r: &RunReport| acc(r, "svm_standard").max(acc(r, "svm_triplet"));
    let margin = mean(reports.iter().map(|r| acc(r, "svm_ensemble") - best_single(r)));
    check(
        margin >= -0.01,
        format!(
            "concatenated − best single SVM {:+.1} pts (per seed {})",
            100.0 * margin,
            per_seed(reports, |r| acc(r, "svm_ensemble") - best_single(r))
        ),
    )
}

fn forgetting(reports: &[RunReport]) -> Outcome {
    let drop = mean(reports.iter().map(|r| acc(r, "teacher_full") - acc(r, "student_full")));
    check(
        drop >= 0.02,
        format!(
            "teacher − fine-tuned student on full faces {:.1} pts (per seed {})",
            100.0 * drop,
            per_seed(reports, |r| acc(r, "teacher_full") - acc(r, "student_full"))
        ),
    )
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let a = std::fs::read(first.join("report.json"));
    let b = std::fs::read(second.join("report.json"));
    match (a, b) {
        (Ok(a), Ok(b)) => check(a == b, format!("report.json {} bytes, identical: {}", a.len(), a == b)),
        _ => check(false, "report.json missing"),
    }
}

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic_expression.json");
    let out = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradients()),
        ("mining oracle equivalence", mining()),
        ("reduction identities", reductions()),
    ];

    let mut reports = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();
    let mut slowest = Duration::ZERO;
    let mut run_error = None;
    for seed in SEEDS {
        let start = Instant::now();
        match cmd_run(&config, &out.path().join(format!("seed{seed}")), Some(seed), false) {
            Ok(o) => {
                dirs.push(o.out_dir);
                reports.push(o.report);
            }
            Err(e) => run_error = Some(format!("seed {seed}: {e}")),
        }
        slowest = slowest.max(start.elapsed());
        eprintln!("seed {seed} done in {:.1} s", start.elapsed().as_secs_f64());
    }
    let rerun = cmd_run(&config, &out.path().join("rerun"), Some(SEEDS[0]), false).map(|o| o.out_dir);

    if let Some(e) = run_error {
        for name in ["curriculum ordering", "triplet-KD parity", "ensemble non-inferiority", "catastrophic forgetting"] {
            results.push((name, check(false, e.clone())));
        }
    } else {
        let timing = format!("; slowest run {:.1} s (limit {} s)", slowest.as_secs_f64(), RUN_BUDGET.as_secs());
        let mut c4 = curriculum(&reports);
        c4.pass &= slowest < RUN_BUDGET;
        c4.detail.push_str(&timing);
        results.push(("curriculum ordering", c4));
        results.push(("triplet-KD parity", triplet_parity(&reports)));
        results.push(("ensemble non-inferiority", ensemble(&reports)));
        results.push(("catastrophic forgetting", forgetting(&reports)));
    }
    results.push(("statistics closed forms", statistics()));
    results.push((
        "determinism",
        match (&rerun, dirs.first()) {
            (Ok(again), Some(first)) => determinism(first, again),
            (Err(e), _) => check(false, e.to_string()),
            _ => check(false, "first run failed"),
        },
    ));

    println!();
    for (i, (name, o)) in results.iter().enumerate() {
        println!("{} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("\nacceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
