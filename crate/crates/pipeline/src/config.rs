//! Run configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown keys are rejected so typos surface as errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use offemma_backend::RetryPolicy;
use offemma_core::kinematics::steps_in;
use offemma_core::metrics::{AvgMode, SummaryOptions};
use serde::{Deserialize, Serialize};

use crate::PipelineError;

fn default_method() -> String {
    "CoT-SC".into()
}
fn default_model() -> String {
    "oracle".into()
}
fn default_n_paths() -> usize {
    offemma_core::consistency::DEFAULT_PATHS
}
fn default_epsilon() -> f64 {
    offemma_core::consistency::DEFAULT_EPSILON
}
fn default_temperature() -> f64 {
    offemma_backend::DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    offemma_backend::DEFAULT_MAX_TOKENS
}
fn default_dt() -> f64 {
    offemma_core::kinematics::DEFAULT_DT
}
fn default_horizon() -> f64 {
    offemma_core::kinematics::DEFAULT_HORIZON_STEPS as f64 * offemma_core::kinematics::DEFAULT_DT
}
fn default_history_len() -> usize {
    offemma_core::prompting::DEFAULT_HISTORY_LEN
}
fn default_alpha() -> f64 {
    offemma_core::visual_prompt::DEFAULT_ALPHA
}
fn default_clearance() -> f64 {
    offemma_core::metrics::DEFAULT_CLEARANCE_M
}
fn default_in_flight() -> usize {
    offemma_backend::DEFAULT_MAX_IN_FLIGHT
}
fn default_workers() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_outlier_scale() -> f64 {
    1.0
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_initial_backoff() -> f64 {
    0.5
}
fn default_max_backoff() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Ground-truth actions with noise; needs no model.
    Oracle {
        #[serde(default)]
        speed_noise_std: f64,
        #[serde(default)]
        curvature_noise_std: f64,
        #[serde(default)]
        outlier_prob: f64,
        #[serde(default = "default_outlier_scale")]
        outlier_scale: f64,
    },
    /// Recorded responses keyed by request digest.
    Replay { fixtures_dir: PathBuf },
    /// Chat-completion endpoint; the token comes from `OFFEMMA_API_KEY`.
    Http {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_initial_backoff")]
        initial_backoff_s: f64,
        #[serde(default = "default_max_backoff")]
        max_backoff_s: f64,
    },
}

impl BackendConfig {
    pub fn exact_oracle() -> Self {
        BackendConfig::Oracle {
            speed_noise_std: 0.0,
            curvature_noise_std: 0.0,
            outlier_prob: 0.0,
            outlier_scale: 1.0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BackendConfig::Oracle { .. } => "oracle",
            BackendConfig::Replay { .. } => "replay",
            BackendConfig::Http { .. } => "http",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// Scene ids to evaluate; all scenes when absent.
    #[serde(default)]
    pub scenes: Option<Vec<String>>,
    pub output_dir: PathBuf,
    /// Label for the method column of reports.
    #[serde(default = "default_method")]
    pub method: String,
    /// Model id sent to the backend and shown in reports.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub seed: u64,
    /// Reasoning paths sampled per frame.
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Step length in seconds; must divide 1 s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Prediction horizon in seconds; at least 3.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_history_len")]
    pub history_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Metres the path must keep from an obstacle.
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    /// Concurrent requests per frame.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Frames processed concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub class_table: Option<PathBuf>,
    #[serde(default)]
    pub prompt_template: Option<PathBuf>,
    /// Paint the overlay and write the legend; off sends the raw image.
    #[serde(default = "default_true")]
    pub visual_prompt: bool,
    /// Collapse classes to their broad category before overlaying.
    #[serde(default)]
    pub consolidate: bool,
    /// Attach the raw image as well as the overlay.
    #[serde(default)]
    pub dual_image: bool,
    #[serde(default)]
    pub multi_turn: bool,
    #[serde(default)]
    pub exclude_failed_from_l2: bool,
    #[serde(default)]
    pub avg_mode: AvgMode,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub backend: BackendConfig,
}

impl RunConfig {
    /// Defaults everywhere, exact oracle backend.
    pub fn new(dataset_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            scenes: None,
            output_dir: output_dir.into(),
            method: default_method(),
            model: default_model(),
            seed: 0,
            n_paths: default_n_paths(),
            epsilon: default_epsilon(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            dt: default_dt(),
            horizon: default_horizon(),
            history_len: default_history_len(),
            alpha: default_alpha(),
            clearance: default_clearance(),
            max_in_flight: default_in_flight(),
            workers: default_workers(),
            class_table: None,
            prompt_template: None,
            visual_prompt: true,
            consolidate: false,
            dual_image: false,
            multi_turn: false,
            exclude_failed_from_l2: false,
            avg_mode: AvgMode::default(),
            cache_dir: None,
            backend: BackendConfig::exact_oracle(),
        }
    }

    /// Parses TOML and resolves relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            PipelineError::ConfigInvalid(msg) => PipelineError::ConfigInvalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_root);
        fix(&mut self.output_dir);
        for p in [&mut self.class_table, &mut self.prompt_template, &mut self.cache_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let BackendConfig::Replay { fixtures_dir } = &mut self.backend {
            fix(fixtures_dir);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        let per_second = 1.0 / self.dt;
        if (per_second - per_second.round()).abs() > 1e-9 {
            return bad(format!("dt must divide 1 s, got {}", self.dt));
        }
        if self.horizon.is_nan() || self.horizon < 3.0 - 1e-9 {
            return bad(format!("horizon must be at least 3 s, got {}", self.horizon));
        }
        if steps_in(self.horizon, self.dt).is_err() {
            return bad(format!("horizon {} is not a whole number of {} s steps", self.horizon, self.dt));
        }
        if self.history_len == 0 {
            return bad("history_len must be at least 1".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be finite and >= 0".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.clearance.is_finite() && self.clearance >= 0.0) {
            return bad("clearance must be finite and >= 0".into());
        }
        if self.max_in_flight == 0 || self.workers == 0 {
            return bad("max_in_flight and workers must be at least 1".into());
        }
        match &self.backend {
            BackendConfig::Oracle {
                speed_noise_std,
                curvature_noise_std,
                outlier_prob,
                outlier_scale,
            } => {
                if !(*speed_noise_std >= 0.0 && *curvature_noise_std >= 0.0) {
                    return bad("oracle noise standard deviations must be >= 0".into());
                }
                if !(0.0..=1.0).contains(outlier_prob) {
                    return bad("outlier_prob must lie in [0, 1]".into());
                }
                if !(outlier_scale.is_finite() && *outlier_scale >= 0.0) {
                    return bad("outlier_scale must be finite and >= 0".into());
                }
            }
            BackendConfig::Http {
                endpoint,
                timeout_s,
                initial_backoff_s,
                max_backoff_s,
                ..
            } => {
                if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                    return bad(format!("backend.endpoint must be an http(s) URL, got {endpoint:?}"));
                }
                for (k, v) in [
                    ("timeout_s", timeout_s),
                    ("initial_backoff_s", initial_backoff_s),
                    ("max_backoff_s", max_backoff_s),
                ] {
                    if !(v.is_finite() && *v >= 0.0) {
                        return bad(format!("backend.{k} must be finite and >= 0"));
                    }
                }
            }
            BackendConfig::Replay { .. } => {}
        }
        Ok(())
    }

    pub fn horizon_steps(&self) -> usize {
        steps_in(self.horizon, self.dt).expect("validated horizon")
    }

    pub fn summary_options(&self) -> SummaryOptions {
        SummaryOptions {
            exclude_failed_from_l2: self.exclude_failed_from_l2,
            avg_mode: self.avg_mode,
        }
    }

    pub fn retry_policy(&self) -> Option<(Duration, RetryPolicy)> {
        match &self.backend {
            BackendConfig::Http {
                timeout_s,
                max_retries,
                initial_backoff_s,
                max_backoff_s,
                ..
            } => Some((
                Duration::from_secs_f64(*timeout_s),
                RetryPolicy {
                    max_retries: *max_retries,
                    initial_backoff: Duration::from_secs_f64(*initial_backoff_s),
                    max_backoff: Duration::from_secs_f64(*max_backoff_s),
                },
            )),
            _ => None,
        }
    }
}

/// The settings that determine a run's results. Paths, transport and
/// concurrency settings are left out so that the same inputs served by
/// different backends produce the same digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub method: String,
    pub model: String,
    pub seed: u64,
    pub scenes: Option<Vec<String>>,
    pub n_paths: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub dt: f64,
    pub horizon: f64,
    pub history_len: usize,
    pub alpha: f64,
    pub clearance: f64,
    pub visual_prompt: bool,
    pub consolidate: bool,
    pub dual_image: bool,
    pub multi_turn: bool,
    pub exclude_failed_from_l2: bool,
    pub avg_mode: AvgMode,
    pub template_version: String,
    /// SHA-256 of the template and class table text actually used.
    pub template_sha256: String,
    pub class_table_sha256: String,
    /// Noise settings when the oracle produced the responses.
    pub oracle: Option<OracleEcho>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEcho {
    pub speed_noise_std: f64,
    pub curvature_noise_std: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
}
