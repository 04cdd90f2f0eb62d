//! Writes small synthetic datasets in the on-disk layout the loader reads.
//!
//! Each scene is a slow drive made of one-second constant-curvature
//! segments, logged at 10 Hz. All frames of a scene share one tiny camera
//! image and label map, which keeps large runs cheap.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use offemma_core::dataset::{MANIFEST_FILE, POSES_FILE, SCENARIOS_FILE, SCENES_DIR};
use offemma_core::kinematics::{integrate_trajectory, VcSample};
use offemma_core::visual_prompt::{ClassId, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::PipelineError;

const LOG_RATE_HZ: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub scenes: usize,
    pub frames_per_scene: usize,
    pub seed: u64,
    /// Segment speeds are drawn uniformly from this range (m/s).
    pub speed_range: (f64, f64),
    /// Segment curvatures are drawn uniformly from ±this (1/m).
    pub max_curvature: f64,
    pub frame_spacing_s: f64,
    /// Seconds of log before the first frame and after the last one.
    pub margin_s: f64,
    pub image_size: (u32, u32),
    /// Annotate frames with obstacles, cycling static, dynamic, sudden, none.
    pub obstacles: bool,
    /// Store label maps as VPRL instead of PNG in every other scene.
    pub mixed_label_formats: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scenes: 1,
            frames_per_scene: 10,
            seed: 0,
            speed_range: (0.2, 0.6),
            max_curvature: 0.1,
            frame_spacing_s: 2.0,
            margin_s: 8.0,
            image_size: (16, 12),
            obstacles: false,
            mixed_label_formats: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub scene_ids: Vec<String>,
    pub frames: usize,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trail in the lower middle, grass to the sides, a tree, sky on top.
fn scene_images(w: u32, h: u32, variant: u32) -> (RgbImage, LabelMap) {
    let mut labels: Vec<ClassId> = Vec::with_capacity((w * h) as usize);
    let img = RgbImage::from_fn(w, h, |x, y| {
        let shade = ((x * 7 + y * 13 + variant * 29) % 40) as u8;
        if y < h / 3 {
            Rgb([120 + shade, 170 + shade / 2, 230])
        } else if x >= w / 3 && x < 2 * w / 3 {
            Rgb([140 + shade, 110 + shade, 80])
        } else {
            Rgb([60, 120 + shade, 50 + shade / 2])
        }
    });
    for y in 0..h {
        for x in 0..w {
            let id = if y < h / 3 {
                7
            } else if x >= w / 3 && x < 2 * w / 3 {
                if y > 2 * h / 3 && (x + variant) % 5 == 0 {
                    31
                } else {
                    1
                }
            } else if x < 2 && y < h / 2 + 2 {
                4
            } else if (x + y + variant) % 9 == 0 {
                19
            } else {
                3
            };
            labels.push(id);
        }
    }
    (img, LabelMap::new(w, h, labels).expect("sizes match"))
}

pub fn write_synthetic_dataset(root: &Path, spec: &SynthSpec) -> Result<SynthDataset, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene_ids = Vec::new();
    let mut scenarios = String::new();
    let (w, h) = spec.image_size;
    let log_len = 2.0 * spec.margin_s + spec.frame_spacing_s * spec.frames_per_scene.saturating_sub(1) as f64;
    let segments = log_len.ceil() as usize;
    let sub_dt = 1.0 / LOG_RATE_HZ as f64;

    for s in 0..spec.scenes {
        let scene_id = format!("scene{:02}", s + 1);
        let dir = root.join(SCENES_DIR).join(&scene_id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;

        let (img, labels) = scene_images(w, h, s as u32);
        let img_path = dir.join("camera.png");
        img.save(&img_path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("writing {}: {e}", img_path.display())))?;
        let label_file = if spec.mixed_label_formats && s % 2 == 1 {
            let p = dir.join("labels.vprl");
            labels.save_vprl(&p).map_err(|e| PipelineError::VisualPrompt {
                frame: scene_id.clone(),
                source: e,
            })?;
            "labels.vprl"
        } else {
            let p = dir.join("labels.png");
            labels.save_png(&p).map_err(|e| PipelineError::VisualPrompt {
                frame: scene_id.clone(),
                source: e,
            })?;
            "labels.png"
        };

        let mut poses = String::from("# t x y yaw\n");
        let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, rng.random_range(-3.0..3.0));
        let _ = writeln!(poses, "0 {x} {y} {yaw}");
        for seg in 0..segments {
            let (lo, hi) = spec.speed_range;
            let sample = VcSample {
                speed: if hi > lo { rng.random_range(lo..hi) } else { lo },
                curvature: if spec.max_curvature > 0.0 {
                    rng.random_range(-spec.max_curvature..spec.max_curvature)
                } else {
                    0.0
                },
            };
            let steps = integrate_trajectory(yaw, &[sample; LOG_RATE_HZ], sub_dt)
                .expect("valid synthetic actions");
            for (i, wp) in steps.waypoints().iter().enumerate() {
                let t = seg as f64 + (i + 1) as f64 * sub_dt;
                let _ = writeln!(poses, "{} {} {} {}", round_t(t), x + wp.x, y + wp.y, wp.heading);
            }
            let last = steps.waypoints()[LOG_RATE_HZ - 1];
            x += last.x;
            y += last.y;
            yaw = last.heading;
        }
        let pose_path = dir.join(POSES_FILE);
        fs::write(&pose_path, poses).map_err(io(&pose_path))?;

        let mut manifest = String::from("# frame_id\ttimestamp\timage\tlabelmap\n");
        for k in 0..spec.frames_per_scene {
            let frame_id = format!("{scene_id}_f{k:04}");
            let t = spec.margin_s + k as f64 * spec.frame_spacing_s;
            let _ = writeln!(manifest, "{frame_id}\t{t}\tcamera.png\t{label_file}");
            if spec.obstacles {
                let side = if k % 2 == 0 { 2.5 } else { -2.5 };
                let square = |cx: f64, cy: f64, r: f64| {
                    format!("{},{}\t{},{}\t{},{}\t{},{}", cx - r, cy - r, cx + r, cy - r, cx + r, cy + r, cx - r, cy + r)
                };
                match k % 4 {
                    0 => {
                        let _ = writeln!(scenarios, "{frame_id}\tstatic\t-\t{}", square(1.0, side, 0.3));
                    }
                    1 => {
                        let _ = writeln!(scenarios, "{frame_id}\tdynamic\t-\t{}", square(1.5, side, 0.4));
                    }
                    2 => {
                        let _ = writeln!(scenarios, "{frame_id}\tsudden\t2\t{}", square(2.0, side, 0.3));
                    }
                    _ => {}
                }
            }
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, manifest).map_err(io(&manifest_path))?;
        scene_ids.push(scene_id);
    }
    if spec.obstacles {
        let p = root.join(SCENARIOS_FILE);
        fs::write(&p, format!("# frame_id\tkind\tactive_from\tvertices\n{scenarios}")).map_err(io(&p))?;
    }
    Ok(SynthDataset {
        root: root.to_path_buf(),
        scene_ids,
        frames: spec.scenes * spec.frames_per_scene,
    })
}

/// Log timestamps on the 0.1 s grid without accumulated float noise.
fn round_t(t: f64) -> f64 {
    (t * LOG_RATE_HZ as f64).round() / LOG_RATE_HZ as f64
}
