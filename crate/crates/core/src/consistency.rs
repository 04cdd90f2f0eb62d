//! Self-consistency aggregation over independently sampled trajectories.
//!
//! At every timestep each axis is filtered on its own: values farther than
//! `2σ + ε` from the ensemble mean are discarded (σ is the population
//! standard deviation) and the survivors are averaged. The x and y of one
//! aggregated point may therefore come from different sample subsets.
//!
//! Population σ bounds the largest deviation by `σ·√(N−1)`, so for N ≤ 5 no
//! value can exceed `2σ` and the filter keeps everything.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{KinematicsError, Trajectory};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_PATHS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("no values to filter")]
    EmptyValues,
    #[error("value {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("epsilon must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble member {index} differs in length or dt from member 0")]
    MismatchedEnsemble { index: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Outcome of filtering one axis at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisFilter {
    pub mean: f64,
    pub std: f64,
    /// Ascending sample indices that survived.
    pub retained: Vec<usize>,
    /// Mean of the retained values.
    pub estimate: f64,
}

impl AxisFilter {
    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }
}

/// Order-independent sum: adding in sorted order makes the result exactly
/// invariant to permutations of the input.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Mean, population σ and the retained indices for one set of values.
pub fn filter_axis(values: &[f64], epsilon: f64) -> Result<AxisFilter, ConsistencyError> {
    if values.is_empty() {
        return Err(ConsistencyError::EmptyValues);
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(ConsistencyError::InvalidEpsilon(epsilon));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(ConsistencyError::NonFiniteValue { index });
    }

    let n = values.len() as f64;
    let mean = sorted_sum(values.iter().copied()) / n;
    let var = sorted_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
    let std = var.sqrt();
    let bound = 2.0 * std + epsilon;

    let retained: Vec<usize> = (0..values.len())
        .filter(|&i| (values[i] - mean).abs() <= bound)
        .collect();
    // Chebyshev guarantees at least one survivor; the mean itself is within
    // every sample's reach only in exact arithmetic, so guard anyway.
    debug_assert!(!retained.is_empty());
    let estimate = if retained.is_empty() {
        mean
    } else {
        let kept = retained.iter().map(|&i| values[i]);
        let lo = kept.clone().fold(f64::INFINITY, f64::min);
        let hi = kept.clone().fold(f64::NEG_INFINITY, f64::max);
        // Rounding can push the mean of equal values past them.
        (sorted_sum(kept) / retained.len() as f64).clamp(lo, hi)
    };

    Ok(AxisFilter {
        mean,
        std,
        retained,
        estimate,
    })
}

/// N sampled trajectories sharing dt and length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    members: Vec<Trajectory>,
}

impl TrajectoryEnsemble {
    pub fn new(members: Vec<Trajectory>) -> Result<Self, ConsistencyError> {
        let first = members.first().ok_or(ConsistencyError::EmptyEnsemble)?;
        for (index, m) in members.iter().enumerate().skip(1) {
            if m.len() != first.len() || (m.dt() - first.dt()).abs() > 1e-12 {
                return Err(ConsistencyError::MismatchedEnsemble { index });
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Trajectory] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn steps(&self) -> usize {
        self.members[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.members[0].dt()
    }

    /// Coordinates of every member at step `k` along one axis.
    pub fn axis_values(&self, k: usize, axis: Axis) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| {
                let wp = m.waypoints()[k];
                match axis {
                    Axis::X => wp.x,
                    Axis::Y => wp.y,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Filter record for one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub t: f64,
    pub x: AxisFilter,
    pub y: AxisFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub ensemble_size: usize,
    pub epsilon: f64,
    pub steps: Vec<StepStats>,
}

impl FilterStats {
    /// Smallest retained count over all steps and axes.
    pub fn min_retained(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| [s.x.retained_count(), s.y.retained_count()])
            .min()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedTrajectory {
    /// Filtered means on the ensemble's time grid. Headings follow the
    /// direction of travel between aggregated points.
    pub trajectory: Trajectory,
    pub stats: FilterStats,
}

/// Per-step, per-axis outlier rejection followed by averaging.
pub fn aggregate(
    ensemble: &TrajectoryEnsemble,
    epsilon: f64,
) -> Result<AggregatedTrajectory, ConsistencyError> {
    let steps = (0..ensemble.steps())
        .map(|k| {
            Ok(StepStats {
                t: ensemble.members()[0].waypoints()[k].t,
                x: filter_axis(&ensemble.axis_values(k, Axis::X), epsilon)?,
                y: filter_axis(&ensemble.axis_values(k, Axis::Y), epsilon)?,
            })
        })
        .collect::<Result<Vec<_>, ConsistencyError>>()?;

    let points: Vec<(f64, f64)> = steps.iter().map(|s| (s.x.estimate, s.y.estimate)).collect();
    let trajectory = Trajectory::from_points(&points, ensemble.dt())?;
    Ok(AggregatedTrajectory {
        trajectory,
        stats: FilterStats {
            ensemble_size: ensemble.size(),
            epsilon,
            steps,
        },
    })
}

/// Smallest retention the 2σ rule allows for N samples: `⌈3N/4⌉`.
pub fn chebyshev_min_retained(n: usize) -> usize {
    (3 * n).div_ceil(4)
}
