//! Report files written to the output directory.
//!
//! | file              | contents                                              |
//! |-------------------|-------------------------------------------------------|
//! | `records.jsonl`   | one frame record per line, sorted by scene and frame  |
//! | `summary.json`    | config echo, summaries, skipped frames, run digest    |
//! | `summary.csv`     | method/model rows with L2 at 1, 2, 3 s, avg, failures |
//! | `obstacles.csv`   | per obstacle kind, when the dataset has scenarios     |
//! | `transport.jsonl` | per-sample backend, cache hit, latency and retries    |
//!
//! Everything except `transport.jsonl` is byte-identical across repeated
//! runs with the same inputs.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use offemma_core::metrics::{GroupSummary, SummaryReport};
use serde::Serialize;
use serde_json::json;

use crate::run::{record_line, FrameRecord, PairedReport, RunReport};
use crate::PipelineError;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const OBSTACLES_CSV: &str = "obstacles.csv";
pub const TRANSPORT_FILE: &str = "transport.jsonl";

pub const SUMMARY_HEADER: &str = "Method,Model,L2(m) 1s,L2(m) 2s,L2(m) 3s,L2(m) Avg,Failure Rate(%)";
pub const OBSTACLE_HEADER: &str = "Model,Scene Type,Success Rate(%),L2(m) Avg,Failure Rate(%)";

fn metres(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "-".into()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn summary_row(g: &GroupSummary) -> String {
    [
        csv_field(&g.key.method),
        csv_field(&g.key.model),
        metres(g.l2_1s),
        metres(g.l2_2s),
        metres(g.l2_3s),
        metres(g.l2_avg),
        g.failures.format_percent(),
    ]
    .join(",")
}

pub fn summary_csv(summary: &SummaryReport) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for g in &summary.groups {
        out.push_str(&summary_row(g));
        out.push('\n');
    }
    out
}

pub fn obstacles_csv(summary: &SummaryReport) -> String {
    let mut out = String::from(OBSTACLE_HEADER);
    out.push('\n');
    for g in &summary.groups {
        let success = g.obstacle_success.map(|r| r.format_percent()).unwrap_or_else(|| "-".into());
        out.push_str(
            &[
                csv_field(&g.key.model),
                csv_field(&g.key.scene_kind),
                success,
                metres(g.l2_avg),
                g.failures.format_percent(),
            ]
            .join(","),
        );
        out.push('\n');
    }
    out
}

/// Single-path and filtered rows in one table.
pub fn paired_csv(paired: &PairedReport) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for g in paired.single.groups.iter().chain(&paired.consistent.groups) {
        out.push_str(&summary_row(g));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct TransportLine<'a> {
    scene_id: &'a str,
    frame_id: &'a str,
    index: u32,
    #[serde(flatten)]
    transport: &'a crate::run::Transport,
}

pub fn summary_json(report: &RunReport) -> String {
    let v = json!({
        "run_digest": report.run_digest,
        "config": report.config,
        "frames": report.records.len(),
        "dropped_samples": report.dropped_samples,
        "skipped": report.skipped,
        "overall": report.overall,
        "obstacles": report.obstacles,
    });
    let mut s = serde_json::to_string_pretty(&v).expect("summary serializes");
    s.push('\n');
    s
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, PipelineError> {
    fs::write(&path, contents).map_err(|source| PipelineError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes all report files and returns their paths.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut records = String::new();
    for r in &report.records {
        records.push_str(&record_line(r));
        records.push('\n');
    }
    let mut written = vec![
        write(dir.join(RECORDS_FILE), &records)?,
        write(dir.join(SUMMARY_JSON), &summary_json(report))?,
        write(dir.join(SUMMARY_CSV), &summary_csv(&report.overall))?,
    ];
    if let Some(obs) = &report.obstacles {
        written.push(write(dir.join(OBSTACLES_CSV), &obstacles_csv(obs))?);
    }
    let mut transport = String::new();
    for r in &report.records {
        for a in &r.audit {
            if let Some(t) = &a.transport {
                let line = TransportLine {
                    scene_id: &r.scene_id,
                    frame_id: &r.frame_id,
                    index: a.index,
                    transport: t,
                };
                transport.push_str(&serde_json::to_string(&line).expect("transport serializes"));
                transport.push('\n');
            }
        }
    }
    written.push(write(dir.join(TRANSPORT_FILE), &transport)?);
    Ok(written)
}

pub fn read_records(path: &Path) -> Result<Vec<FrameRecord>, PipelineError> {
    let file = fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            PipelineError::ConfigInvalid(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use offemma_core::metrics::{summarize, GroupKey, HorizonErrors, ScoredFrame, SummaryOptions};

    fn frame(avg: f64, failed: bool) -> ScoredFrame {
        ScoredFrame {
            errors: Some(HorizonErrors::from_horizons(avg, avg, avg)),
            l2_all_steps: None,
            failed,
            obstacle_success: None,
        }
    }

    #[test]
    fn table_columns_and_half_up_percent() {
        let frames = [frame(1.0, false), frame(3.0, false), frame(2.0, false), frame(12.0, true)];
        let key = GroupKey {
            method: "CoT-SC".into(),
            model: "Qwen2.5-VL-7B-Instruct".into(),
            scene_kind: "all".into(),
        };
        let s = summarize(frames.iter().map(|f| (key.clone(), f)), SummaryOptions::default()).unwrap();
        let csv = summary_csv(&s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Method,Model,L2(m) 1s,L2(m) 2s,L2(m) 3s,L2(m) Avg,Failure Rate(%)");
        assert_eq!(lines[1], "CoT-SC,Qwen2.5-VL-7B-Instruct,4.50,4.50,4.50,4.50,25.00");
    }

    #[test]
    fn fields_with_commas_are_quoted() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\", ok"), "\"say \"\"hi\"\", ok\"");
        assert_eq!(metres(f64::NAN), "-");
        assert_eq!(metres(0.126), "0.13");
    }
}
