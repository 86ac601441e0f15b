use sloop_core::experiment::{metrics_csv, AnnotatorMode, METRICS_CSV_HEADER};
use sloop_core::synthpop::SyntheticSpec;
use sloop_dei::pipeline::{run_local, ExperimentConfig};

fn small(seed: u64, iterations: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        synthetic: SyntheticSpec {
            n_individuals: 6,
            sightings_per_individual: 3,
            ..SyntheticSpec::default()
        },
        use_cnn: false,
        rho: 0.5,
        ..ExperimentConfig::default()
    }
    .with_seed(seed);
    cfg.feedback.iterations = iterations;
    cfg.feedback.budget_fraction = 0.05;
    cfg
}

#[test]
fn zero_iterations_gives_only_baseline() {
    let r = run_local(&small(3, 0)).unwrap();
    let csv = metrics_csv(&r.rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_CSV_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
    assert!(r.all_indexed(), "{} of {}", r.images_indexed, r.images_total);
}

#[test]
fn same_seed_same_metrics() {
    let a = run_local(&small(7, 2)).unwrap();
    let b = run_local(&small(7, 2)).unwrap();
    assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
    assert_eq!(a.cmc_csv(), b.cmc_csv());
    assert_eq!(a.rows.len(), 3);
    assert!(a.all_indexed());
    assert!(a.rows[1..].iter().all(|r| r.pairs_verified > 0));
}

#[test]
fn cmc_is_monotone_and_complete() {
    let r = run_local(&small(5, 1)).unwrap();
    assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
    assert!((r.cmc.last().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn simulated_crowd_runs_through_the_task_api() {
    let mut cfg = small(11, 1);
    cfg.feedback.annotators = AnnotatorMode::Simulated {
        accuracy: 0.9,
        annotators: 5,
    };
    let r = run_local(&cfg).unwrap();
    assert!(r.all_indexed());
    assert!(r.rows[1].pairs_verified > 0);
}

#[test]
fn bad_budget_rejected() {
    let mut cfg = small(1, 1);
    cfg.feedback.budget_fraction = 0.0;
    assert!(run_local(&cfg).is_err());
}
