//! On-disk evaluation data: scene manifests, pose logs and obstacle
//! scenarios.
//!
//! ```text
//! <root>/scenes/<scene_id>/manifest.tsv   frame_id \t timestamp \t image \t labelmap
//! <root>/scenes/<scene_id>/poses.txt      t x y yaw   (whitespace or comma separated)
//! <root>/scenarios.tsv                    frame_id \t kind \t active_from|- \t x,y \t x,y ...
//! ```
//!
//! Paths in a manifest are relative to the scene directory. Blank lines and
//! lines starting with `#` are ignored in every file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::kinematics::{self, interpolate_pose, KinematicsError, TimedPose, Trajectory};
use crate::metrics::{is_convex_polygon, ObstacleAnnotation, ObstacleKind};
use crate::prompting::EgoHistory;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const POSES_FILE: &str = "poses.txt";
pub const SCENARIOS_FILE: &str = "scenarios.tsv";
pub const SCENES_DIR: &str = "scenes";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("scene {scene}: frame {frame_id} does not come strictly after the previous frame")]
    NonMonotonicTimestamps { scene: String, frame_id: String },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("scenario line {line}: {reason}")]
    MalformedScenario { line: usize, reason: String },
    #[error("no frame produced an evaluation case")]
    EmptyResult,
    #[error("pose log {path}: {source}")]
    Poses {
        path: PathBuf,
        #[source]
        source: KinematicsError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub timestamp: f64,
    pub image_path: PathBuf,
    pub labelmap_path: PathBuf,
    pub scene_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub frame: Frame,
    pub ego_history: EgoHistory,
    pub gt: Trajectory,
    pub obstacle: Option<ObstacleAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub frame_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseSet {
    pub cases: Vec<EvalCase>,
    pub skipped: Vec<SkippedFrame>,
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

pub fn scene_dir(root: &Path, scene_id: &str) -> PathBuf {
    root.join(SCENES_DIR).join(scene_id)
}

/// Scene ids under `<root>/scenes`, sorted.
pub fn list_scenes(root: &Path) -> Result<Vec<String>, DatasetError> {
    let dir = root.join(SCENES_DIR);
    let entries = fs::read_dir(&dir).map_err(|source| DatasetError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut scenes: Vec<String> = entries
        .filter_map(Result::ok)
        .filter(|e| e.path().join(MANIFEST_FILE).is_file())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    scenes.sort();
    Ok(scenes)
}

/// Frames of one scene in timestamp order, with every referenced file
/// checked.
pub fn load_scene(root: &Path, scene_id: &str) -> Result<Vec<Frame>, DatasetError> {
    let dir = scene_dir(root, scene_id);
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(DatasetError::MissingManifest(manifest));
    }
    let text = read_text(&manifest)?;
    let malformed = |line, reason: String| DatasetError::Malformed {
        path: manifest.clone(),
        line,
        reason,
    };

    let mut seen = HashSet::new();
    let mut frames = Vec::new();
    for (line, rec) in records(&text) {
        let fields: Vec<&str> = rec.split('\t').map(str::trim).collect();
        let [frame_id, ts, image, labels] = fields[..] else {
            return Err(malformed(line, format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        let timestamp: f64 = ts
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| malformed(line, format!("bad timestamp {ts:?}")))?;
        if !seen.insert(frame_id.to_string()) {
            return Err(malformed(line, format!("duplicate frame id {frame_id}")));
        }
        let frame = Frame {
            frame_id: frame_id.to_string(),
            timestamp,
            image_path: dir.join(image),
            labelmap_path: dir.join(labels),
            scene_id: scene_id.to_string(),
        };
        for p in [&frame.image_path, &frame.labelmap_path] {
            if !p.is_file() {
                return Err(DatasetError::MissingFile(p.clone()));
            }
        }
        frames.push(frame);
    }

    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then_with(|| a.frame_id.cmp(&b.frame_id)));
    if let Some(w) = frames.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(DatasetError::NonMonotonicTimestamps {
            scene: scene_id.to_string(),
            frame_id: w[1].frame_id.clone(),
        });
    }
    Ok(frames)
}

pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<TimedPose>, DatasetError> {
    let mut poses = Vec::new();
    for (line, rec) in records(text) {
        let values: Vec<f64> = rec
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .ok()
            .filter(|v: &Vec<f64>| v.len() == 4 && v.iter().all(|x| x.is_finite()))
            .ok_or_else(|| DatasetError::Malformed {
                path: path.to_path_buf(),
                line,
                reason: "expected 4 numbers: t x y yaw".into(),
            })?;
        poses.push(TimedPose {
            t: values[0],
            x: values[1],
            y: values[2],
            yaw: values[3],
        });
    }
    if let Some(i) = poses.windows(2).position(|w| w[1].t <= w[0].t) {
        return Err(DatasetError::Poses {
            path: path.to_path_buf(),
            source: KinematicsError::NonMonotonicTimestamps { index: i + 1 },
        });
    }
    Ok(poses)
}

pub fn load_poses(path: &Path) -> Result<Vec<TimedPose>, DatasetError> {
    parse_poses(path, &read_text(path)?)
}

pub fn load_scene_poses(root: &Path, scene_id: &str) -> Result<Vec<TimedPose>, DatasetError> {
    load_poses(&scene_dir(root, scene_id).join(POSES_FILE))
}

/// One case per frame with enough pose coverage around it. Frames near the
/// ends of the log are skipped and reported, not treated as errors.
pub fn build_cases(
    frames: &[Frame],
    poses: &[TimedPose],
    history_len: usize,
    horizon_steps: usize,
    dt: f64,
) -> Result<CaseSet, DatasetError> {
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    let (first, last) = match (poses.first(), poses.last()) {
        (Some(a), Some(b)) if poses.len() >= 2 => (a.t, b.t),
        _ => (f64::INFINITY, f64::NEG_INFINITY),
    };
    let horizon = horizon_steps as f64 * dt;
    let tol = 1e-9;

    for frame in frames {
        let t = frame.timestamp;
        let reason = if t - history_len as f64 * dt < first - tol {
            Some("insufficient past poses")
        } else if t + horizon > last + tol {
            Some("insufficient future poses")
        } else {
            None
        };
        if let Some(reason) = reason {
            warn!(frame = %frame.frame_id, reason, "skipping frame");
            skipped.push(SkippedFrame {
                frame_id: frame.frame_id.clone(),
                reason: reason.to_string(),
            });
            continue;
        }

        let built = (|| -> Result<EvalCase, KinematicsError> {
            let origin = interpolate_pose(poses, t)?;
            let past = (0..=history_len)
                .map(|i| interpolate_pose(poses, t - (history_len - i) as f64 * dt))
                .collect::<Result<Vec<_>, _>>()?;
            let states = if history_len == 0 {
                Vec::new()
            } else {
                kinematics::derive_ego_states(&past)?
            };
            Ok(EvalCase {
                frame: frame.clone(),
                ego_history: EgoHistory { states, dt },
                gt: kinematics::resample_gt(poses, &origin, horizon, dt)?,
                obstacle: None,
            })
        })();
        match built {
            Ok(case) => cases.push(case),
            Err(e) => {
                warn!(frame = %frame.frame_id, error = %e, "skipping frame");
                skipped.push(SkippedFrame {
                    frame_id: frame.frame_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if cases.is_empty() {
        return Err(DatasetError::EmptyResult);
    }
    Ok(CaseSet { cases, skipped })
}

pub fn parse_scenarios(text: &str) -> Result<Vec<ObstacleAnnotation>, DatasetError> {
    let mut out = Vec::new();
    for (line, rec) in records(text) {
        let bad = |reason: String| DatasetError::MalformedScenario { line, reason };
        let fields: Vec<&str> = rec.split('\t').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(bad("expected frame_id, kind, active_from and vertices".into()));
        }
        let kind = match fields[1] {
            "static" => ObstacleKind::Static,
            "dynamic" => ObstacleKind::Dynamic,
            "sudden" => ObstacleKind::Sudden,
            other => return Err(bad(format!("unknown obstacle kind {other:?}"))),
        };
        let active_from = match fields[2] {
            "-" => None,
            s => Some(
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| bad(format!("bad active_from {s:?}")))?,
            ),
        };
        if kind == ObstacleKind::Sudden && active_from.is_none() {
            return Err(bad("sudden obstacle needs active_from".into()));
        }
        let region = fields[3..]
            .iter()
            .map(|v| {
                let (x, y) = v.split_once(',').ok_or_else(|| bad(format!("bad vertex {v:?}")))?;
                match (x.trim().parse::<f64>(), y.trim().parse::<f64>()) {
                    (Ok(x), Ok(y)) => Ok((x, y)),
                    _ => Err(bad(format!("bad vertex {v:?}"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if region.len() < 3 {
            return Err(bad(format!("polygon needs at least 3 vertices, got {}", region.len())));
        }
        if !is_convex_polygon(&region) {
            return Err(bad("polygon is degenerate or not convex".into()));
        }
        out.push(ObstacleAnnotation {
            frame_id: fields[0].to_string(),
            kind,
            region,
            active_from,
        });
    }
    Ok(out)
}

/// Obstacle annotations from `<root>/scenarios.tsv`.
pub fn load_scenarios(root: &Path) -> Result<Vec<ObstacleAnnotation>, DatasetError> {
    parse_scenarios(&read_text(&root.join(SCENARIOS_FILE))?)
}
