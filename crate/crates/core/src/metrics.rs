//! Open-loop scoring: L2 error at 1/2/3 s, the failure rule, obstacle
//! clearance and grouped summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Trajectory;

/// Horizons scored, in seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

/// Average L2 strictly above this many metres counts as a failure.
pub const FAILURE_THRESHOLD_M: f64 = 10.0;

pub const DEFAULT_CLEARANCE_M: f64 = 0.5;

/// Maximum spacing when sampling path segments for clearance checks.
pub const CLEARANCE_SAMPLE_SPACING_M: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory has no waypoint at {0} s")]
    HorizonMissing(f64),
    #[error("obstacle polygon is degenerate")]
    DegeneratePolygon,
    #[error("clearance must be finite and non-negative, got {0}")]
    InvalidClearance(f64),
    #[error("no records to summarize")]
    EmptyRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonErrors {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    /// Mean of the three horizon errors.
    pub l2_avg: f64,
}

impl HorizonErrors {
    pub fn from_horizons(l2_1s: f64, l2_2s: f64, l2_3s: f64) -> Self {
        Self {
            l2_1s,
            l2_2s,
            l2_3s,
            l2_avg: (l2_1s + l2_2s + l2_3s) / 3.0,
        }
    }
}

/// Euclidean distance between prediction and ground truth at 1, 2 and 3 s.
pub fn l2_errors(pred: &Trajectory, gt: &Trajectory) -> Result<HorizonErrors, MetricsError> {
    let mut out = [0.0; 3];
    for (slot, &h) in out.iter_mut().zip(&HORIZONS) {
        let p = pred.at_time(h).ok_or(MetricsError::HorizonMissing(h))?;
        let g = gt.at_time(h).ok_or(MetricsError::HorizonMissing(h))?;
        *slot = (p.x - g.x).hypot(p.y - g.y);
    }
    Ok(HorizonErrors::from_horizons(out[0], out[1], out[2]))
}

/// Mean L2 over every shared waypoint up to the shorter horizon. The
/// alternative reading of the "Avg" column.
pub fn l2_all_steps(pred: &Trajectory, gt: &Trajectory) -> f64 {
    let pairs: Vec<f64> = pred
        .waypoints()
        .iter()
        .filter_map(|p| gt.at_time(p.t).map(|g| (p.x - g.x).hypot(p.y - g.y)))
        .collect();
    if pairs.is_empty() {
        f64::NAN
    } else {
        pairs.iter().sum::<f64>() / pairs.len() as f64
    }
}

pub fn is_failure(errors: &HorizonErrors) -> bool {
    errors.l2_avg > FAILURE_THRESHOLD_M
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Static,
    Dynamic,
    Sudden,
}

impl ObstacleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObstacleKind::Static => "static",
            ObstacleKind::Dynamic => "dynamic",
            ObstacleKind::Sudden => "sudden",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ObstacleKind::Static => "Static Obstacle",
            ObstacleKind::Dynamic => "Dynamic Obstacle",
            ObstacleKind::Sudden => "Sudden Obstacle",
        }
    }
}

/// Obstacle region in ego-frame metres for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleAnnotation {
    pub frame_id: String,
    pub kind: ObstacleKind,
    /// Convex polygon vertices, either winding.
    pub region: Vec<(f64, f64)>,
    /// Seconds after prediction time when a sudden obstacle appears.
    pub active_from: Option<f64>,
}

impl ObstacleAnnotation {
    pub fn activation_time(&self) -> f64 {
        match self.kind {
            ObstacleKind::Sudden => self.active_from.unwrap_or(0.0),
            _ => 0.0,
        }
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Twice the signed area.
fn signed_area2(poly: &[(f64, f64)]) -> f64 {
    (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum()
}

/// Whether the polygon has at least three vertices, positive area and turns
/// the same way at every vertex.
pub fn is_convex_polygon(poly: &[(f64, f64)]) -> bool {
    if poly.len() < 3 || poly.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return false;
    }
    let area = signed_area2(poly);
    if area.abs() < 1e-12 {
        return false;
    }
    (0..poly.len()).all(|i| {
        let c = cross(poly[i], poly[(i + 1) % poly.len()], poly[(i + 2) % poly.len()]);
        c * area.signum() >= -1e-12
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + u * dx)).hypot(p.1 - (a.1 + u * dy))
}

/// Distance from a point to a convex polygon; zero inside or on the edge.
pub fn point_polygon_distance(p: (f64, f64), poly: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if !is_convex_polygon(poly) {
        return Err(MetricsError::DegeneratePolygon);
    }
    let sign = signed_area2(poly).signum();
    let n = poly.len();
    let inside = (0..n).all(|i| cross(poly[i], poly[(i + 1) % n], p) * sign >= 0.0);
    if inside {
        return Ok(0.0);
    }
    Ok((0..n)
        .map(|i| segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min))
}

/// Whether the predicted path keeps `clearance` metres from the obstacle.
///
/// The path starts at the ego origin. Only the part from the obstacle's
/// activation time on is checked; segments are sampled at most
/// [`CLEARANCE_SAMPLE_SPACING_M`] apart.
pub fn obstacle_success(
    pred: &Trajectory,
    obs: &ObstacleAnnotation,
    clearance: f64,
) -> Result<bool, MetricsError> {
    if !(clearance.is_finite() && clearance >= 0.0) {
        return Err(MetricsError::InvalidClearance(clearance));
    }
    if !is_convex_polygon(&obs.region) {
        return Err(MetricsError::DegeneratePolygon);
    }
    let active = obs.activation_time();
    let path: Vec<(f64, f64, f64)> = pred
        .polyline_from_origin()
        .into_iter()
        .filter(|&(t, _, _)| t >= active - 1e-9)
        .collect();

    let clear = |p: (f64, f64)| -> Result<bool, MetricsError> {
        Ok(point_polygon_distance(p, &obs.region)? >= clearance)
    };
    for &(_, x, y) in &path {
        if !clear((x, y))? {
            return Ok(false);
        }
    }
    for w in path.windows(2) {
        let (a, b) = ((w[0].1, w[0].2), (w[1].1, w[1].2));
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let pieces = (len / CLEARANCE_SAMPLE_SPACING_M).ceil().max(1.0) as usize;
        for k in 1..pieces {
            let u = k as f64 / pieces as f64;
            if !clear((a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1)))? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// What a summary needs from one scored frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    /// `None` when no prediction could be made for the frame.
    pub errors: Option<HorizonErrors>,
    /// Average over all steps, for the alternative averaging mode.
    pub l2_all_steps: Option<f64>,
    pub failed: bool,
    pub obstacle_success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub method: String,
    pub model: String,
    pub scene_kind: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvgMode {
    /// Mean of the 1, 2 and 3 s errors.
    #[default]
    ThreeHorizons,
    /// Mean over every predicted step.
    AllSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SummaryOptions {
    /// Leave failed frames out of the L2 means (rates still count them).
    #[serde(default)]
    pub exclude_failed_from_l2: bool,
    #[serde(default)]
    pub avg_mode: AvgMode,
}

/// A rate stored as an exact fraction; formatting rounds half-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: u64,
    pub denominator: u64,
}

impl Rate {
    pub fn percent(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            100.0 * self.numerator as f64 / self.denominator as f64
        }
    }

    /// Percentage to two decimals, rounding half up, computed in integers.
    pub fn format_percent(&self) -> String {
        if self.denominator == 0 {
            return "-".into();
        }
        let (n, d) = (self.numerator as u128, self.denominator as u128);
        let hundredths = (n * 10_000 * 2 + d) / (2 * d);
        format!("{}.{:02}", hundredths / 100, hundredths % 100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub frames: u64,
    /// Frames contributing to the L2 means.
    pub l2_frames: u64,
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
    pub failures: Rate,
    pub obstacle_success: Option<Rate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub options: SummaryOptions,
    pub groups: Vec<GroupSummary>,
}

/// Per-group means and rates; groups come out sorted by key.
pub fn summarize<'a, I>(records: I, options: SummaryOptions) -> Result<SummaryReport, MetricsError>
where
    I: IntoIterator<Item = (GroupKey, &'a ScoredFrame)>,
{
    let mut groups: BTreeMap<GroupKey, Vec<&ScoredFrame>> = BTreeMap::new();
    for (key, rec) in records {
        groups.entry(key).or_default().push(rec);
    }
    if groups.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }

    let groups = groups
        .into_iter()
        .map(|(key, recs)| {
            let used: Vec<(&HorizonErrors, &ScoredFrame)> = recs
                .iter()
                .filter(|r| !(options.exclude_failed_from_l2 && r.failed))
                .filter_map(|r| r.errors.as_ref().map(|e| (e, *r)))
                .collect();
            let mean = |f: &dyn Fn(&HorizonErrors, &ScoredFrame) -> f64| -> f64 {
                if used.is_empty() {
                    f64::NAN
                } else {
                    used.iter().map(|(e, r)| f(e, r)).sum::<f64>() / used.len() as f64
                }
            };
            let obstacle: Vec<bool> = recs.iter().filter_map(|r| r.obstacle_success).collect();
            GroupSummary {
                frames: recs.len() as u64,
                l2_frames: used.len() as u64,
                l2_1s: mean(&|e, _| e.l2_1s),
                l2_2s: mean(&|e, _| e.l2_2s),
                l2_3s: mean(&|e, _| e.l2_3s),
                l2_avg: mean(&|e, r| match options.avg_mode {
                    AvgMode::ThreeHorizons => e.l2_avg,
                    AvgMode::AllSteps => r.l2_all_steps.unwrap_or(e.l2_avg),
                }),
                failures: Rate {
                    numerator: recs.iter().filter(|r| r.failed).count() as u64,
                    denominator: recs.len() as u64,
                },
                obstacle_success: (!obstacle.is_empty()).then(|| Rate {
                    numerator: obstacle.iter().filter(|&&s| s).count() as u64,
                    denominator: obstacle.len() as u64,
                }),
                key,
            }
        })
        .collect();
    Ok(SummaryReport { options, groups })
}
