//! Synthetic responder: ground-truth actions plus Gaussian noise, with a
//! chance of a gross outlier per reply.

use std::fmt::Write as _;
use std::time::Instant;

use offemma_core::kinematics::VcSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{BackendError, BackendKind, VlmBackend, VlmRequest, VlmResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub gt_actions: Vec<VcSample>,
    pub speed_noise_std: f64,
    pub curvature_noise_std: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl OracleConfig {
    pub fn exact(gt_actions: Vec<VcSample>) -> Self {
        Self {
            gt_actions,
            speed_noise_std: 0.0,
            curvature_noise_std: 0.0,
            outlier_prob: 0.0,
            outlier_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.gt_actions.is_empty() {
            return bad("oracle needs at least one ground-truth action");
        }
        if self.gt_actions.iter().any(|s| !s.is_valid()) {
            return bad("oracle ground-truth actions must be finite with non-negative speed");
        }
        if !(self.speed_noise_std >= 0.0 && self.speed_noise_std.is_finite())
            || !(self.curvature_noise_std >= 0.0 && self.curvature_noise_std.is_finite())
        {
            return bad("oracle noise standard deviations must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return bad("outlier_prob must lie in [0, 1]");
        }
        if !(self.outlier_scale >= 0.0 && self.outlier_scale.is_finite()) {
            return bad("outlier_scale must be finite and >= 0");
        }
        Ok(())
    }
}

/// The actions the oracle reports for one sample, and whether it was an
/// outlier. Deterministic in `(cfg.seed, sample_index)`.
pub fn oracle_actions(cfg: &OracleConfig, sample_index: u32) -> Result<(Vec<VcSample>, bool), BackendError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(sample_index as u64);
    let outlier = rng.random::<f64>() < cfg.outlier_prob;
    if outlier {
        let actions = cfg
            .gt_actions
            .iter()
            .map(|s| VcSample {
                speed: s.speed * cfg.outlier_scale,
                curvature: -s.curvature,
            })
            .collect();
        return Ok((actions, true));
    }
    let speed_noise = Normal::new(0.0, cfg.speed_noise_std).expect("validated std");
    let curv_noise = Normal::new(0.0, cfg.curvature_noise_std).expect("validated std");
    let actions = cfg
        .gt_actions
        .iter()
        .map(|s| {
            let dv = speed_noise.sample(&mut rng);
            let dc = curv_noise.sample(&mut rng);
            VcSample {
                speed: (s.speed + dv).max(0.0),
                curvature: s.curvature + dc,
            }
        })
        .collect();
    Ok((actions, false))
}

fn describe(actions: &[VcSample]) -> (&'static str, &'static str) {
    let mean_c = actions.iter().map(|s| s.curvature).sum::<f64>() / actions.len() as f64;
    let mean_v = actions.iter().map(|s| s.speed).sum::<f64>() / actions.len() as f64;
    let turn = if mean_c > 0.02 {
        "bear left along the open ground"
    } else if mean_c < -0.02 {
        "bear right along the open ground"
    } else {
        "continue straight ahead"
    };
    let pace = if mean_v < 0.1 {
        "stay nearly stopped"
    } else if mean_v < 1.5 {
        "keep a slow, steady speed"
    } else {
        "hold its current speed"
    };
    (turn, pace)
}

/// Reply prose in the four-stage layout, ending with the action pairs.
pub fn render_reply(actions: &[VcSample]) -> String {
    let (turn, pace) = describe(actions);
    let mut out = String::new();
    out.push_str("Prompt step1: Scene Description\n");
    out.push_str(
        " The vehicle is on an unpaved trail with grass on both sides and some trees in the distance. \
         The ground looks firm with a few uneven patches.\n\n",
    );
    out.push_str("Prompt step2: Object Description\n");
    out.push_str(" No road users are close to the planned path. Bushes at the edges of the trail should be kept at a distance.\n\n");
    out.push_str("Prompt step3: Intent Description\n");
    let _ = writeln!(out, "- The vehicle should {turn} and {pace}.\n");
    out.push_str("Prompt step4: Generate Motion\n");
    let pairs: Vec<String> = actions
        .iter()
        .map(|s| format!("[{}, {}]", s.speed, s.curvature))
        .collect();
    let _ = writeln!(out, "- {}", pairs.join(", "));
    out
}

pub fn oracle_respond(cfg: &OracleConfig, sample_index: u32) -> Result<VlmResponse, BackendError> {
    let start = Instant::now();
    let (actions, _) = oracle_actions(cfg, sample_index)?;
    Ok(VlmResponse {
        text: render_reply(&actions),
        latency_s: start.elapsed().as_secs_f64(),
        backend: BackendKind::Oracle,
        cache_hit: false,
        retries: 0,
    })
}

#[derive(Debug, Clone)]
pub struct OracleBackend {
    cfg: OracleConfig,
}

impl OracleBackend {
    pub fn new(cfg: OracleConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }
}

impl VlmBackend for OracleBackend {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        oracle_respond(&self.cfg, request.sample_index)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }
}
