#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use offemma_core::visual_prompt::{overlay, ClassTable, LabelMap, DEFAULT_ALPHA};
use offemma_pipeline::synth::{write_synthetic_dataset, SynthSpec};
use offemma_pipeline::{BackendConfig, RunConfig};

/// Digest of the replay run over the pinned fixtures. Regenerate with
/// `cargo test -p offemma-pipeline --test golden -- --ignored` and update.
pub const GOLDEN_DIGEST: &str = "919f4ebd1a6c92b16807f22194d7b43a308a9f2ca444ed32703d725a5f87bd1e";

/// Overlay of the pinned camera image and PNG label map at the default alpha.
pub const OVERLAY_GOLDEN: &str = "overlay_golden.png";

pub fn golden_overlay_png() -> Vec<u8> {
    let scene = pinned_dir().join("dataset/scenes/scene01");
    let img = image::open(scene.join("camera.png")).unwrap().to_rgb8();
    let labels = LabelMap::load(&scene.join("labels.png")).unwrap();
    overlay(&img, &labels, &ClassTable::rellis_default(), DEFAULT_ALPHA)
        .unwrap()
        .encode_png()
}

pub fn pinned_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pinned")
}

pub fn replay_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&pinned_dir().join("replay.toml")).expect("pinned config loads");
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Oracle config over the pinned dataset, with the seed and model of the
/// replay config.
pub fn oracle_config(out: &Path, backend: BackendConfig) -> RunConfig {
    RunConfig {
        backend,
        ..replay_config(out)
    }
}

pub fn noisy_oracle() -> BackendConfig {
    BackendConfig::Oracle {
        speed_noise_std: 0.2,
        curvature_noise_std: 0.02,
        outlier_prob: 0.15,
        outlier_scale: 5.0,
    }
}

pub fn synthetic(root: &Path, frames: usize, seed: u64) {
    let spec = SynthSpec {
        frames_per_scene: frames,
        seed,
        obstacles: true,
        ..SynthSpec::default()
    };
    write_synthetic_dataset(root, &spec).expect("synthetic dataset");
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}
