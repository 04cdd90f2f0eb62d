mod common;

use common::*;
use offemma_core::dataset::DatasetError;
use offemma_pipeline::run::SampleOutcome;
use offemma_pipeline::{compare_single_vs_sc, run_eval, BackendConfig, PipelineError};
use proptest::prelude::*;

#[test]
fn scene_filter_matching_nothing_is_empty_result() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = replay_config(out.path());
    cfg.scenes = Some(vec!["no_such_scene".into()]);
    let err = run_eval(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Dataset(DatasetError::EmptyResult)), "{err}");
}

#[test]
fn replay_without_fixtures_fails_every_backend_call() {
    let out = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let mut cfg = replay_config(out.path());
    cfg.backend = BackendConfig::Replay {
        fixtures_dir: empty.path().to_path_buf(),
    };
    let err = run_eval(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::AllBackendsFailed(_)), "{err}");
}

#[test]
fn exact_oracle_variants_coincide() {
    let data = tempfile::tempdir().unwrap();
    synthetic(data.path(), 8, 3);
    let mut cfg = offemma_pipeline::RunConfig::new(data.path(), data.path().join("out"));
    cfg.seed = 3;
    let paired = compare_single_vs_sc(&cfg).unwrap();
    assert_eq!(paired.single.groups[0].l2_avg, paired.consistent.groups[0].l2_avg);
    assert_eq!(paired.single.groups[0].failures, paired.consistent.groups[0].failures);
}

#[test]
fn one_path_makes_both_variants_identical() {
    let data = tempfile::tempdir().unwrap();
    synthetic(data.path(), 12, 5);
    let mut cfg = offemma_pipeline::RunConfig::new(data.path(), data.path().join("out"));
    cfg.n_paths = 1;
    cfg.backend = noisy_oracle();
    let paired = compare_single_vs_sc(&cfg).unwrap();
    let (s, c) = (&paired.single.groups[0], &paired.consistent.groups[0]);
    assert_eq!((s.l2_1s, s.l2_2s, s.l2_3s, s.l2_avg), (c.l2_1s, c.l2_2s, c.l2_3s, c.l2_avg));
    assert_eq!(s.failures, c.failures);
}

#[test]
fn worker_count_does_not_change_the_digest() {
    let data = tempfile::tempdir().unwrap();
    synthetic(data.path(), 10, 9);
    let mut cfg = offemma_pipeline::RunConfig::new(data.path(), data.path().join("out"));
    cfg.backend = noisy_oracle();
    cfg.workers = 1;
    cfg.max_in_flight = 1;
    let serial = run_eval(&cfg).unwrap();
    cfg.workers = 6;
    cfg.max_in_flight = 5;
    let parallel = run_eval(&cfg).unwrap();
    assert_eq!(serial.run_digest, parallel.run_digest);
    cfg.seed = 1;
    assert_ne!(run_eval(&cfg).unwrap().run_digest, serial.run_digest);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_sample_is_accounted_for(seed in 0u64..1000, n in 1usize..7, prob in 0.0f64..0.6) {
        let data = tempfile::tempdir().unwrap();
        synthetic(data.path(), 4, seed);
        let mut cfg = offemma_pipeline::RunConfig::new(data.path(), data.path().join("out"));
        cfg.seed = seed;
        cfg.n_paths = n;
        cfg.backend = BackendConfig::Oracle {
            speed_noise_std: 0.2,
            curvature_noise_std: 0.02,
            outlier_prob: prob,
            outlier_scale: 5.0,
        };
        let report = run_eval(&cfg).unwrap();
        for r in &report.records {
            prop_assert_eq!(r.audit.len(), n);
            let used = r.audit.iter().filter(|a| matches!(a.outcome, SampleOutcome::Used { .. })).count();
            prop_assert_eq!(used, r.ensemble_size);
            prop_assert_eq!(used, r.members.len());
            let retained = r.predicted.as_ref().map(|p| p.stats.min_retained()).unwrap_or(0);
            prop_assert!(retained >= 1 && retained <= used);
            prop_assert_eq!(r.failed, r.errors.map(|e| offemma_core::metrics::is_failure(&e)).unwrap_or(true));
        }
    }
}
