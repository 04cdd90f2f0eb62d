use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use image::RgbImage;
use offemma_backend::{
    sample_n, BackendKind, CachedBackend, HttpBackend, HttpConfig, ImageAttachment, OracleBackend, OracleConfig,
    ReplayBackend, ResponseCache, VlmBackend, VlmRequest,
};
use offemma_core::consistency::{aggregate, AggregatedTrajectory, TrajectoryEnsemble};
use offemma_core::dataset::{self, EvalCase, SCENARIOS_FILE};
use offemma_core::kinematics::{arc_actions, integrate_trajectory, Trajectory};
use offemma_core::metrics::{
    is_failure, l2_all_steps, l2_errors, obstacle_success, summarize, GroupKey, HorizonErrors, ObstacleAnnotation,
    ScoredFrame, SummaryReport,
};
use offemma_core::prompting::{parse_motion, PromptTemplate};
use offemma_core::visual_prompt::{
    build_legend, consolidate_labels, encode_png, overlay, ClassTable, LabelMap, Legend, DEFAULT_CLASS_TABLE,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::config::{BackendConfig, ConfigEcho, OracleEcho, RunConfig};
use crate::PipelineError;

pub const RUN_DIGEST_TAG: &str = "offemma-run-v1";
pub const OVERLAY_IMAGE_REF: &str = "front_camera_overlay.png";
pub const RAW_IMAGE_REF: &str = "front_camera.png";

/// Transport details of one response. Kept out of the serialized record so
/// that records do not depend on timing or on which backend served them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transport {
    pub backend: BackendKind,
    pub cache_hit: bool,
    pub latency_s: f64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleOutcome {
    Used { warnings: Vec<String> },
    BackendFailed { message: String },
    Dropped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub index: u32,
    pub request_digest: String,
    pub response: Option<String>,
    pub outcome: SampleOutcome,
    #[serde(skip)]
    pub transport: Option<Transport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub scene_id: String,
    pub frame_id: String,
    pub timestamp: f64,
    pub gt: Trajectory,
    /// Aggregated prediction; absent when no sample parsed.
    pub predicted: Option<AggregatedTrajectory>,
    /// Integrated trajectories of the samples that parsed, by sample index.
    pub members: Vec<Trajectory>,
    pub ensemble_size: usize,
    pub errors: Option<HorizonErrors>,
    pub l2_all_steps: Option<f64>,
    pub failed: bool,
    pub obstacle: Option<ObstacleAnnotation>,
    pub obstacle_success: Option<bool>,
    pub audit: Vec<SampleAudit>,
}

impl FrameRecord {
    pub fn scored(&self) -> ScoredFrame {
        ScoredFrame {
            errors: self.errors,
            l2_all_steps: self.l2_all_steps,
            failed: self.failed,
            obstacle_success: self.obstacle_success,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub scene_id: String,
    pub frame_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportStats {
    /// HTTP requests sent, retries included; `None` for other backends.
    pub network_calls: Option<u64>,
    pub cache_hits: u64,
    pub retries: u64,
    pub responses: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub records: Vec<FrameRecord>,
    /// Grouped by method and model over all frames.
    pub overall: SummaryReport,
    /// Grouped by obstacle kind, over frames that have one.
    pub obstacles: Option<SummaryReport>,
    pub skipped: Vec<SkippedEntry>,
    pub dropped_samples: usize,
    pub transport: TransportStats,
    pub run_digest: String,
}

/// Both scorings of one run, from the same responses.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedReport {
    /// Sample 0 alone.
    pub single: SummaryReport,
    /// Filtered mean of all samples.
    pub consistent: SummaryReport,
    pub report: RunReport,
}

struct FrameOutcome {
    record: FrameRecord,
    single: ScoredFrame,
}

/// Seed for one frame's oracle, from the run seed and the frame identity.
pub fn frame_seed(seed: u64, scene_id: &str, frame_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((scene_id.len() as u64).to_le_bytes());
    h.update(scene_id.as_bytes());
    h.update(frame_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash over the config echo and the serialized records, one JSON
/// document per line.
pub fn run_digest(config: &ConfigEcho, record_lines: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(RUN_DIGEST_TAG.as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(config).expect("config serializes").as_bytes());
    h.update(b"\n");
    for line in record_lines {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn record_line(record: &FrameRecord) -> String {
    serde_json::to_string(record).expect("records serialize")
}

enum Backends {
    Shared {
        backend: Box<dyn VlmBackend>,
        http: Option<Arc<HttpBackend>>,
    },
    Oracle {
        cfg: OracleConfig,
        cache: Option<Arc<ResponseCache>>,
    },
}

impl Backends {
    fn build(config: &RunConfig) -> Result<Self, PipelineError> {
        let cache = config
            .cache_dir
            .as_ref()
            .map(|d| ResponseCache::with_dir(d).map(Arc::new))
            .transpose()?;
        Ok(match &config.backend {
            BackendConfig::Oracle {
                speed_noise_std,
                curvature_noise_std,
                outlier_prob,
                outlier_scale,
            } => Backends::Oracle {
                cfg: OracleConfig {
                    gt_actions: Vec::new(),
                    speed_noise_std: *speed_noise_std,
                    curvature_noise_std: *curvature_noise_std,
                    outlier_prob: *outlier_prob,
                    outlier_scale: *outlier_scale,
                    seed: config.seed,
                },
                cache,
            },
            BackendConfig::Replay { fixtures_dir } => {
                let replay = ReplayBackend::new(fixtures_dir)?;
                Backends::Shared {
                    backend: match cache {
                        Some(c) => Box::new(CachedBackend::new(replay, c)),
                        None => Box::new(replay),
                    },
                    http: None,
                }
            }
            BackendConfig::Http { endpoint, .. } => {
                let (timeout, retry) = config.retry_policy().expect("http backend");
                let mut hc = HttpConfig::new(endpoint.clone());
                hc.timeout = timeout;
                hc.retry = retry;
                let http = Arc::new(HttpBackend::new(hc)?);
                Backends::Shared {
                    backend: match cache {
                        Some(c) => Box::new(CachedBackend::new(Arc::clone(&http), c)),
                        None => Box::new(Arc::clone(&http)),
                    },
                    http: Some(http),
                }
            }
        })
    }

    fn for_case(&self, case: &EvalCase) -> Result<Box<dyn VlmBackend + '_>, PipelineError> {
        match self {
            Backends::Shared { backend, .. } => Ok(Box::new(backend.as_ref())),
            Backends::Oracle { cfg, cache } => {
                let cfg = OracleConfig {
                    gt_actions: arc_actions(&case.gt),
                    seed: frame_seed(cfg.seed, &case.frame.scene_id, &case.frame.frame_id),
                    ..cfg.clone()
                };
                let oracle = OracleBackend::new(cfg)?;
                Ok(match cache {
                    Some(c) => Box::new(CachedBackend::new(oracle, Arc::clone(c))),
                    None => Box::new(oracle),
                })
            }
        }
    }

    fn network_calls(&self) -> Option<u64> {
        match self {
            Backends::Shared { http: Some(h), .. } => Some(h.network_calls()),
            _ => None,
        }
    }
}

struct Prepared {
    template: PromptTemplate,
    template_text_sha: String,
    table: ClassTable,
    table_text_sha: String,
}

fn prepare(config: &RunConfig) -> Result<Prepared, PipelineError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| PipelineError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let (template, template_text) = match &config.prompt_template {
        Some(p) => {
            let text = read(p)?;
            let version = p.file_stem().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
            (PromptTemplate::parse(&version, &text)?, text)
        }
        None => (
            PromptTemplate::default_v1(),
            offemma_core::prompting::DEFAULT_TEMPLATE.to_string(),
        ),
    };
    let (table, table_text) = match &config.class_table {
        Some(p) => {
            let text = read(p)?;
            (
                ClassTable::from_toml(&text).map_err(|source| PipelineError::VisualPrompt {
                    frame: p.display().to_string(),
                    source,
                })?,
                text,
            )
        }
        None => (ClassTable::rellis_default(), DEFAULT_CLASS_TABLE.to_string()),
    };
    Ok(Prepared {
        template,
        template_text_sha: sha256_hex(template_text.as_bytes()),
        table,
        table_text_sha: sha256_hex(table_text.as_bytes()),
    })
}

pub fn config_echo(config: &RunConfig, template_version: &str, template_sha: &str, table_sha: &str) -> ConfigEcho {
    ConfigEcho {
        method: config.method.clone(),
        model: config.model.clone(),
        seed: config.seed,
        scenes: config.scenes.clone(),
        n_paths: config.n_paths,
        epsilon: config.epsilon,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        dt: config.dt,
        horizon: config.horizon,
        history_len: config.history_len,
        alpha: config.alpha,
        clearance: config.clearance,
        visual_prompt: config.visual_prompt,
        consolidate: config.consolidate,
        dual_image: config.dual_image,
        multi_turn: config.multi_turn,
        exclude_failed_from_l2: config.exclude_failed_from_l2,
        avg_mode: config.avg_mode,
        template_version: template_version.to_string(),
        template_sha256: template_sha.to_string(),
        class_table_sha256: table_sha.to_string(),
        oracle: match &config.backend {
            BackendConfig::Oracle {
                speed_noise_std,
                curvature_noise_std,
                outlier_prob,
                outlier_scale,
            } => Some(OracleEcho {
                speed_noise_std: *speed_noise_std,
                curvature_noise_std: *curvature_noise_std,
                outlier_prob: *outlier_prob,
                outlier_scale: *outlier_scale,
            }),
            _ => None,
        },
    }
}

/// Loads every selected scene and builds its cases, attaching obstacle
/// annotations by frame id.
pub fn load_cases(config: &RunConfig) -> Result<(Vec<EvalCase>, Vec<SkippedEntry>), PipelineError> {
    let root = &config.dataset_root;
    let available = dataset::list_scenes(root)?;
    let scenes: Vec<String> = match &config.scenes {
        None => available,
        Some(filter) => {
            for s in filter.iter().filter(|s| !available.contains(s)) {
                warn!(scene = %s, "scene filter names a scene that does not exist");
            }
            available.into_iter().filter(|s| filter.contains(s)).collect()
        }
    };
    let scenarios = if root.join(SCENARIOS_FILE).is_file() {
        dataset::load_scenarios(root)?
    } else {
        Vec::new()
    };
    let mut by_frame: HashMap<String, ObstacleAnnotation> = HashMap::new();
    for a in scenarios {
        if by_frame.contains_key(&a.frame_id) {
            warn!(frame = %a.frame_id, "more than one obstacle annotation; keeping the first");
            continue;
        }
        by_frame.insert(a.frame_id.clone(), a);
    }

    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for scene in &scenes {
        let frames = dataset::load_scene(root, scene)?;
        let poses = dataset::load_scene_poses(root, scene)?;
        match dataset::build_cases(&frames, &poses, config.history_len, config.horizon_steps(), config.dt) {
            Ok(set) => {
                cases.extend(set.cases);
                skipped.extend(set.skipped.into_iter().map(|s| SkippedEntry {
                    scene_id: scene.clone(),
                    frame_id: s.frame_id,
                    reason: s.reason,
                }));
            }
            Err(dataset::DatasetError::EmptyResult) => {
                warn!(scene = %scene, "no frame in scene has enough pose coverage");
                skipped.extend(frames.iter().map(|f| SkippedEntry {
                    scene_id: scene.clone(),
                    frame_id: f.frame_id.clone(),
                    reason: "insufficient pose coverage".into(),
                }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if cases.is_empty() {
        return Err(dataset::DatasetError::EmptyResult.into());
    }
    for c in &mut cases {
        c.obstacle = by_frame.get(&c.frame.frame_id).cloned();
    }
    Ok((cases, skipped))
}

fn visual_error(frame: &str) -> impl FnOnce(offemma_core::visual_prompt::VisualPromptError) -> PipelineError + '_ {
    move |source| PipelineError::VisualPrompt {
        frame: frame.to_string(),
        source,
    }
}

fn load_rgb(path: &Path, frame: &str) -> Result<RgbImage, PipelineError> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| PipelineError::VisualPrompt {
        frame: frame.to_string(),
        source: offemma_core::visual_prompt::VisualPromptError::Image {
            path: path.display().to_string(),
            source,
        },
    })
}

fn score(pred: &Trajectory, case: &EvalCase, clearance: f64) -> Result<ScoredFrame, PipelineError> {
    let errors = l2_errors(pred, &case.gt)?;
    Ok(ScoredFrame {
        errors: Some(errors),
        l2_all_steps: Some(l2_all_steps(pred, &case.gt)),
        failed: is_failure(&errors),
        obstacle_success: case
            .obstacle
            .as_ref()
            .map(|o| obstacle_success(pred, o, clearance))
            .transpose()?,
    })
}

fn unscored(case: &EvalCase) -> ScoredFrame {
    ScoredFrame {
        errors: None,
        l2_all_steps: None,
        failed: true,
        obstacle_success: case.obstacle.as_ref().map(|_| false),
    }
}

fn process_case(
    case: &EvalCase,
    config: &RunConfig,
    prepared: &Prepared,
    backends: &Backends,
) -> Result<FrameOutcome, PipelineError> {
    let frame_id = case.frame.frame_id.as_str();
    let steps = config.horizon_steps();

    let raw = load_rgb(&case.frame.image_path, frame_id)?;
    let (legend, images, image_ref) = if config.visual_prompt {
        let mut labels = LabelMap::load(&case.frame.labelmap_path).map_err(visual_error(frame_id))?;
        if config.consolidate {
            labels = consolidate_labels(&labels, &prepared.table).map_err(visual_error(frame_id))?;
        }
        let annotated = overlay(&raw, &labels, &prepared.table, config.alpha).map_err(visual_error(frame_id))?;
        let legend = build_legend(&labels, &prepared.table).map_err(visual_error(frame_id))?;
        let mut images = vec![ImageAttachment::png(annotated.encode_png())];
        if config.dual_image {
            images.push(ImageAttachment::png(encode_png(&raw)));
        }
        (legend, images, OVERLAY_IMAGE_REF)
    } else {
        (Legend::default(), vec![ImageAttachment::png(encode_png(&raw))], RAW_IMAGE_REF)
    };
    let prompt = prepared.template.build(&case.ego_history, &legend, steps, image_ref)?;
    let request = VlmRequest {
        model_id: config.model.clone(),
        prompt,
        images,
        temperature: config.temperature,
        sample_index: 0,
        max_tokens: config.max_tokens,
        multi_turn: config.multi_turn,
        label: format!("{}/{}", case.frame.scene_id, frame_id),
    };

    let backend = backends.for_case(case)?;
    let responses = sample_n(&*backend, &request, config.n_paths, config.max_in_flight);

    let mut audit = Vec::with_capacity(responses.len());
    let mut members = Vec::new();
    let mut sample0 = None;
    for (i, result) in responses.into_iter().enumerate() {
        let index = i as u32;
        let request_digest = request.with_sample(index).digest();
        let entry = match result {
            Err(e) => SampleAudit {
                index,
                request_digest,
                response: None,
                outcome: SampleOutcome::BackendFailed {
                    message: e.error.to_string(),
                },
                transport: None,
            },
            Ok(resp) => {
                let transport = Some(Transport {
                    backend: resp.backend,
                    cache_hit: resp.cache_hit,
                    latency_s: resp.latency_s,
                    retries: resp.retries,
                });
                let parsed = parse_motion(&resp.text, Some(steps))
                    .map_err(|e| e.to_string())
                    .and_then(|p| {
                        integrate_trajectory(0.0, &p.samples, config.dt)
                            .map(|t| (t, p.warnings))
                            .map_err(|e| e.to_string())
                    });
                let outcome = match parsed {
                    Ok((traj, warnings)) => {
                        if index == 0 {
                            sample0 = Some(traj.clone());
                        }
                        members.push(traj);
                        SampleOutcome::Used { warnings }
                    }
                    Err(reason) => {
                        warn!(frame = frame_id, sample = index, %reason, "dropping sample");
                        SampleOutcome::Dropped { reason }
                    }
                };
                SampleAudit {
                    index,
                    request_digest,
                    response: Some(resp.text),
                    outcome,
                    transport,
                }
            }
        };
        audit.push(entry);
    }

    let (predicted, scored) = if members.is_empty() {
        (None, unscored(case))
    } else {
        let ensemble = TrajectoryEnsemble::new(members.clone())?;
        let agg = aggregate(&ensemble, config.epsilon)?;
        let scored = score(&agg.trajectory, case, config.clearance)?;
        (Some(agg), scored)
    };
    let single = match &sample0 {
        Some(t) => score(t, case, config.clearance)?,
        None => unscored(case),
    };

    Ok(FrameOutcome {
        record: FrameRecord {
            scene_id: case.frame.scene_id.clone(),
            frame_id: frame_id.to_string(),
            timestamp: case.frame.timestamp,
            gt: case.gt.clone(),
            ensemble_size: members.len(),
            predicted,
            members,
            errors: scored.errors,
            l2_all_steps: scored.l2_all_steps,
            failed: scored.failed,
            obstacle: case.obstacle.clone(),
            obstacle_success: scored.obstacle_success,
            audit,
        },
        single,
    })
}

fn process_all(
    cases: &[EvalCase],
    config: &RunConfig,
    prepared: &Prepared,
    backends: &Backends,
) -> Result<Vec<FrameOutcome>, PipelineError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FrameOutcome, PipelineError>>>> =
        Mutex::new((0..cases.len()).map(|_| None).collect());
    let workers = config.workers.clamp(1, cases.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cases.len() {
                    break;
                }
                let out = process_case(&cases[i], config, prepared, backends);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every case is visited"))
        .collect()
}

fn overall_key(config: &RunConfig) -> GroupKey {
    GroupKey {
        method: config.method.clone(),
        model: config.model.clone(),
        scene_kind: "all".into(),
    }
}

fn obstacle_key(config: &RunConfig, record: &FrameRecord) -> Option<GroupKey> {
    record.obstacle.as_ref().map(|o| GroupKey {
        method: config.method.clone(),
        model: config.model.clone(),
        scene_kind: o.kind.label().to_string(),
    })
}

fn execute(config: &RunConfig) -> Result<(RunReport, Vec<ScoredFrame>), PipelineError> {
    config.validate()?;
    let prepared = prepare(config)?;
    let (cases, skipped) = load_cases(config)?;
    let backends = Backends::build(config)?;
    info!(frames = cases.len(), skipped = skipped.len(), backend = config.backend.kind_name(), "starting run");

    let mut outcomes = process_all(&cases, config, &prepared, &backends)?;
    outcomes.sort_by(|a, b| {
        (&a.record.scene_id, &a.record.frame_id).cmp(&(&b.record.scene_id, &b.record.frame_id))
    });

    let all_backend_failed = outcomes.iter().all(|o| {
        o.record
            .audit
            .iter()
            .all(|a| matches!(a.outcome, SampleOutcome::BackendFailed { .. }))
    });
    if all_backend_failed {
        let first = outcomes
            .iter()
            .flat_map(|o| &o.record.audit)
            .find_map(|a| match &a.outcome {
                SampleOutcome::BackendFailed { message } => Some(message.clone()),
                _ => None,
            })
            .unwrap_or_default();
        return Err(PipelineError::AllBackendsFailed(first));
    }

    let mut transport = TransportStats {
        network_calls: backends.network_calls(),
        ..TransportStats::default()
    };
    let mut dropped = 0;
    for a in outcomes.iter().flat_map(|o| &o.record.audit) {
        if !matches!(a.outcome, SampleOutcome::Used { .. }) {
            dropped += 1;
        }
        if let Some(t) = &a.transport {
            transport.responses += 1;
            transport.cache_hits += t.cache_hit as u64;
            transport.retries += t.retries as u64;
        }
    }

    let options = config.summary_options();
    let records: Vec<FrameRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let scored: Vec<ScoredFrame> = records.iter().map(FrameRecord::scored).collect();
    let overall = summarize(scored.iter().map(|s| (overall_key(config), s)), options)?;
    let obstacle_rows: Vec<(GroupKey, &ScoredFrame)> = records
        .iter()
        .zip(&scored)
        .filter_map(|(r, s)| obstacle_key(config, r).map(|k| (k, s)))
        .collect();
    let obstacles = if obstacle_rows.is_empty() {
        None
    } else {
        Some(summarize(obstacle_rows, options)?)
    };

    let echo = config_echo(
        config,
        prepared.template.version(),
        &prepared.template_text_sha,
        &prepared.table_text_sha,
    );
    let lines: Vec<String> = records.iter().map(record_line).collect();
    let digest = run_digest(&echo, &lines);
    let singles = outcomes.into_iter().map(|o| o.single).collect();
    info!(frames = records.len(), dropped, digest = %digest, "run finished");
    Ok((
        RunReport {
            config: echo,
            records,
            overall,
            obstacles,
            skipped,
            dropped_samples: dropped,
            transport,
            run_digest: digest,
        },
        singles,
    ))
}

/// Evaluates every case: overlay, prompt, sampling, parsing, integration,
/// aggregation and scoring.
pub fn run_eval(config: &RunConfig) -> Result<RunReport, PipelineError> {
    execute(config).map(|(r, _)| r)
}

/// Scores one run twice from the same responses: sample 0 alone, and the
/// filtered mean of all samples.
pub fn compare_single_vs_sc(config: &RunConfig) -> Result<PairedReport, PipelineError> {
    let (report, singles) = execute(config)?;
    let key = |method: &str| GroupKey {
        method: method.into(),
        model: config.model.clone(),
        scene_kind: "all".into(),
    };
    let options = config.summary_options();
    let single = summarize(singles.iter().map(|s| (key("CoT"), s)), options)?;
    let scored: Vec<ScoredFrame> = report.records.iter().map(FrameRecord::scored).collect();
    let consistent = summarize(scored.iter().map(|s| (key("CoT-SC"), s)), options)?;
    Ok(PairedReport {
        single,
        consistent,
        report,
    })
}
