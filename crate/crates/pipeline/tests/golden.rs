mod common;

use std::fs;

use common::*;
use offemma_backend::stub::StubServer;
use offemma_core::visual_prompt::LabelMap;
use offemma_pipeline::report::{write_report, RECORDS_FILE, SUMMARY_CSV, SUMMARY_JSON, TRANSPORT_FILE};
use offemma_pipeline::run::SampleOutcome;
use offemma_pipeline::synth::{write_synthetic_dataset, SynthSpec};
use offemma_pipeline::{run_eval, BackendConfig};

const REPLAY_TOML: &str = r#"dataset_root = "dataset"
output_dir = "out"
model = "fixture-vlm"
seed = 7

[backend]
kind = "replay"
fixtures_dir = "responses"
"#;

/// Rebuilds the pinned fixtures: a three-frame scene (one label map stored
/// as VPRL), noisy oracle replies recorded through the response cache, and
/// one reply replaced by text that does not parse.
#[test]
#[ignore]
fn regenerate_pinned_fixtures() {
    let dir = pinned_dir();
    let _ = fs::remove_dir_all(&dir);
    let data = dir.join("dataset");
    let spec = SynthSpec {
        frames_per_scene: 3,
        seed: 11,
        obstacles: true,
        ..SynthSpec::default()
    };
    write_synthetic_dataset(&data, &spec).unwrap();
    let scene = data.join("scenes/scene01");
    LabelMap::load(&scene.join("labels.png"))
        .unwrap()
        .save_vprl(&scene.join("labels.vprl"))
        .unwrap();
    let manifest = fs::read_to_string(scene.join("manifest.tsv")).unwrap();
    let manifest = manifest.replace("scene01_f0002\t12\tcamera.png\tlabels.png", "scene01_f0002\t12\tcamera.png\tlabels.vprl");
    assert!(manifest.contains("labels.vprl"));
    fs::write(scene.join("manifest.tsv"), manifest).unwrap();
    fs::write(dir.join("replay.toml"), REPLAY_TOML).unwrap();
    fs::write(dir.join(OVERLAY_GOLDEN), golden_overlay_png()).unwrap();

    let out = tempfile::tempdir().unwrap();
    let mut cfg = oracle_config(out.path(), noisy_oracle());
    cfg.cache_dir = Some(dir.join("responses"));
    let report = run_eval(&cfg).unwrap();

    let victim = &report.records[1].audit[3];
    fs::write(
        dir.join("responses").join(format!("{}.txt", victim.request_digest)),
        "Stage 4: I cannot tell how the vehicle should move here.\n",
    )
    .unwrap();

    let replay = run_eval(&replay_config(out.path())).unwrap();
    println!("golden digest: {}", replay.run_digest);
}

#[test]
fn replay_reproduces_golden_digest() {
    let out = tempfile::tempdir().unwrap();
    let report = run_eval(&replay_config(out.path())).unwrap();
    assert_eq!(report.records.len(), 3);
    assert_eq!(report.run_digest, GOLDEN_DIGEST);
    let dropped = report.records[1]
        .audit
        .iter()
        .filter(|a| matches!(a.outcome, SampleOutcome::Dropped { .. }))
        .count();
    assert_eq!(dropped, 1);
    assert_eq!(report.records[1].ensemble_size, 4);
}

#[test]
fn repeated_replay_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_report(&run_eval(&replay_config(a.path())).unwrap(), a.path()).unwrap();
    write_report(&run_eval(&replay_config(b.path())).unwrap(), b.path()).unwrap();
    for f in [RECORDS_FILE, SUMMARY_JSON, SUMMARY_CSV, "obstacles.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert!(a.path().join(TRANSPORT_FILE).is_file());
}

#[test]
fn warm_cache_http_run_makes_no_calls() {
    let cache = tempfile::tempdir().unwrap();
    copy_dir(&pinned_dir().join("responses"), cache.path());
    let server = StubServer::start(vec![], |_| "unused".into());
    let out = tempfile::tempdir().unwrap();
    let mut cfg = replay_config(out.path());
    cfg.cache_dir = Some(cache.path().to_path_buf());
    cfg.backend = BackendConfig::Http {
        endpoint: server.url(),
        timeout_s: 5.0,
        max_retries: 0,
        initial_backoff_s: 0.01,
        max_backoff_s: 0.01,
    };
    let report = run_eval(&cfg).unwrap();
    assert_eq!(server.requests(), 0);
    assert_eq!(report.transport.network_calls, Some(0));
    assert_eq!(report.transport.cache_hits, 15);
    assert_eq!(report.run_digest, GOLDEN_DIGEST);
}

#[test]
fn exact_oracle_is_lossless_on_pinned_frames() {
    let out = tempfile::tempdir().unwrap();
    let report = run_eval(&oracle_config(out.path(), BackendConfig::exact_oracle())).unwrap();
    for r in &report.records {
        let e = r.errors.unwrap();
        for v in [e.l2_1s, e.l2_2s, e.l2_3s, e.l2_avg] {
            assert!(v <= 1e-9, "{}: {v}", r.frame_id);
        }
        assert!(!r.failed);
    }
    assert_eq!(report.overall.groups[0].failures.format_percent(), "0.00");
}

#[test]
fn overlay_matches_golden_png() {
    let golden = fs::read(pinned_dir().join(OVERLAY_GOLDEN)).unwrap();
    assert_eq!(golden_overlay_png(), golden);
}
