//! Four-stage reasoning prompt and the motion-plan parser.
//!
//! Prompt wording lives in versioned template files (see
//! `data/prompt_v1.txt`); this module only fills placeholders and checks the
//! stage structure. The parser pulls the final list of `(speed, curvature)`
//! pairs out of a free-text reply.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::VcSample;
use crate::visual_prompt::Legend;

/// Stage titles, in order.
pub const STAGE_TITLES: [&str; 4] = [
    "Scene Description",
    "Object Description",
    "Intent Description",
    "Generate Motion",
];

pub const DEFAULT_TEMPLATE: &str = include_str!("../data/prompt_v1.txt");
pub const DEFAULT_TEMPLATE_VERSION: &str = "prompt_v1";

/// Number of past states fed to the model by default.
pub const DEFAULT_HISTORY_LEN: usize = 5;

const FORMAT_HINT: &str = "[(v1, c1)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("ego history is empty")]
    EmptyHistory,
    #[error("ego history state {0} is not a valid action")]
    InvalidHistory(usize),
    #[error("horizon must be at least one step")]
    InvalidHorizon,
    #[error("prompt template: {0}")]
    Template(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionParseError {
    #[error("no (speed, curvature) pair sequence found")]
    MalformedMotion,
    #[error("expected {expected} motion steps, found {found}")]
    TooFewSteps { expected: usize, found: usize },
    #[error("pair {index} has negative speed {speed}")]
    NegativeSpeed { index: usize, speed: f64 },
}

/// Recent ego states, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoHistory {
    pub states: Vec<VcSample>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStage {
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template_version: String,
    pub system_preamble: String,
    pub stages: Vec<PromptStage>,
    pub legend_text: String,
    /// Name of the image attachment the prompt refers to.
    pub image_ref: String,
}

impl PromptBundle {
    /// One stage as sent in a user turn.
    pub fn render_stage(index: usize, stage: &PromptStage) -> String {
        format!("Prompt step{}: {}\n{}", index + 1, stage.title, stage.body.trim_end())
    }

    /// All four stages as one user message.
    pub fn render_user(&self) -> String {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| Self::render_stage(i, s))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Canonical bytes for cache keys: preamble and user text.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.template_version.as_bytes());
        out.push(0);
        out.extend_from_slice(self.system_preamble.as_bytes());
        out.push(0);
        out.extend_from_slice(self.render_user().as_bytes());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    History,
    Legend,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Section {
    title: String,
    pieces: Vec<Piece>,
}

/// A parsed prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    version: String,
    system: Vec<Piece>,
    stages: Vec<Section>,
}

fn parse_pieces(body: &str) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        text.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            text.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('}') {
            return Err(PromptError::Template("unmatched '}'".into()));
        }
        let end = tail
            .find('}')
            .ok_or_else(|| PromptError::Template("unterminated placeholder".into()))?;
        let piece = match &tail[1..end] {
            "history" => Piece::History,
            "legend" => Piece::Legend,
            "horizon" => Piece::Horizon,
            other => return Err(PromptError::Template(format!("unknown placeholder {{{other}}}"))),
        };
        if !text.is_empty() {
            pieces.push(Piece::Text(std::mem::take(&mut text)));
        }
        pieces.push(piece);
        rest = &tail[end + 1..];
    }
    text.push_str(rest);
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

impl PromptTemplate {
    /// Parses template text. Sections are introduced by `@@system` and
    /// `@@stage <title>` lines.
    pub fn parse(version: &str, text: &str) -> Result<Self, PromptError> {
        let mut system: Option<String> = None;
        let mut stages: Vec<(String, String)> = Vec::new();
        let mut current: Option<&mut String> = None;
        for line in text.lines() {
            if let Some(directive) = line.strip_prefix("@@") {
                if directive.trim() == "system" {
                    if system.is_some() {
                        return Err(PromptError::Template("duplicate @@system section".into()));
                    }
                    system = Some(String::new());
                    current = system.as_mut();
                } else if let Some(title) = directive.strip_prefix("stage ") {
                    stages.push((title.trim().to_string(), String::new()));
                    current = stages.last_mut().map(|s| &mut s.1);
                } else {
                    return Err(PromptError::Template(format!("unknown directive @@{directive}")));
                }
                continue;
            }
            match current.as_deref_mut() {
                Some(buf) => {
                    buf.push_str(line);
                    buf.push('\n');
                }
                None if line.starts_with('#') || line.trim().is_empty() => {}
                None => return Err(PromptError::Template("text before the first section".into())),
            }
        }

        let titles: Vec<&str> = stages.iter().map(|(t, _)| t.as_str()).collect();
        if titles != STAGE_TITLES {
            return Err(PromptError::Template(format!(
                "stages must be {STAGE_TITLES:?}, found {titles:?}"
            )));
        }
        let action = &stages[3].1;
        if !action.contains("{horizon}") || !action.contains(FORMAT_HINT) {
            return Err(PromptError::Template(
                "Generate Motion stage must state the step count and the pair format".into(),
            ));
        }
        Ok(Self {
            version: version.to_string(),
            system: parse_pieces(&system.unwrap_or_default())?,
            stages: stages
                .into_iter()
                .map(|(title, body)| Ok(Section { title, pieces: parse_pieces(&body)? }))
                .collect::<Result<_, PromptError>>()?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse(&version, &text)
    }

    pub fn default_v1() -> Self {
        Self::parse(DEFAULT_TEMPLATE_VERSION, DEFAULT_TEMPLATE).expect("bundled template is valid")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    fn fill(pieces: &[Piece], history: &str, legend: &str, horizon: usize) -> String {
        let mut out = String::new();
        for p in pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::History => out.push_str(history.trim_end()),
                Piece::Legend => out.push_str(legend.trim_end()),
                Piece::Horizon => out.push_str(&horizon.to_string()),
            }
        }
        out
    }

    pub fn build(
        &self,
        history: &EgoHistory,
        legend: &Legend,
        horizon_steps: usize,
        image_ref: &str,
    ) -> Result<PromptBundle, PromptError> {
        if history.states.is_empty() {
            return Err(PromptError::EmptyHistory);
        }
        if let Some(i) = history.states.iter().position(|s| !s.is_valid()) {
            return Err(PromptError::InvalidHistory(i));
        }
        if horizon_steps == 0 {
            return Err(PromptError::InvalidHorizon);
        }
        let history_text = format_history(history);
        let legend_text = legend.to_text();
        Ok(PromptBundle {
            template_version: self.version.clone(),
            system_preamble: Self::fill(&self.system, &history_text, &legend_text, horizon_steps)
                .trim_end()
                .to_string(),
            stages: self
                .stages
                .iter()
                .map(|s| PromptStage {
                    title: s.title.clone(),
                    body: Self::fill(&s.pieces, &history_text, &legend_text, horizon_steps),
                })
                .collect(),
            legend_text,
            image_ref: image_ref.to_string(),
        })
    }
}

/// Builds the prompt from the bundled template.
pub fn build_prompt(
    history: &EgoHistory,
    legend: &Legend,
    horizon_steps: usize,
) -> Result<PromptBundle, PromptError> {
    PromptTemplate::default_v1().build(history, legend, horizon_steps, "front_camera_overlay.png")
}

/// History as a labelled table followed by the same values in reply format.
pub fn format_history(history: &EgoHistory) -> String {
    let n = history.states.len();
    let mut out = String::new();
    for (i, s) in history.states.iter().enumerate() {
        let age = (n - i) as f64 * history.dt;
        let _ = writeln!(
            out,
            "t-{age:.1}s: speed {:.3} m/s, curvature {:.4} 1/m",
            s.speed, s.curvature
        );
    }
    let pairs: Vec<String> = history
        .states
        .iter()
        .map(|s| format!("({:.3}, {:.4})", s.speed, s.curvature))
        .collect();
    let _ = writeln!(out, "As pairs: [{}]", pairs.join(", "));
    out
}

/// Reply format for a list of actions; parses back to the same values.
pub fn serialize_motion(samples: &[VcSample]) -> String {
    let pairs: Vec<String> = samples
        .iter()
        .map(|s| format!("({}, {})", s.speed, s.curvature))
        .collect();
    format!("[{}]", pairs.join(", "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParse {
    pub samples: Vec<VcSample>,
    /// The substring the pairs were read from.
    pub raw_span: String,
    pub warnings: Vec<String>,
}

struct PairMatch {
    start: usize,
    end: usize,
    speed: f64,
    curvature: f64,
}

fn skip_ws(b: &[u8], mut i: usize) -> usize {
    while i < b.len() && b[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

/// Signed decimal with optional fraction and exponent. Returns the value and
/// the index just past it.
fn scan_number(b: &[u8], start: usize) -> Option<(f64, usize)> {
    let mut i = start;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        let frac_start = i + 1;
        let mut j = frac_start;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        digits += j - frac_start;
        if digits > 0 {
            i = j;
        }
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp_start = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_start {
            i = j;
        }
    }
    // The scanned span is pure ASCII, so the str conversion cannot fail.
    let text = std::str::from_utf8(&b[start..i]).ok()?;
    let value: f64 = text.parse().ok()?;
    value.is_finite().then_some((value, i))
}

/// `[v, c]` or `(v, c)` starting exactly at `start`.
fn scan_pair(b: &[u8], start: usize) -> Option<PairMatch> {
    let close = match b.get(start)? {
        b'[' => b']',
        b'(' => b')',
        _ => return None,
    };
    let i = skip_ws(b, start + 1);
    let (speed, i) = scan_number(b, i)?;
    let i = skip_ws(b, i);
    if b.get(i) != Some(&b',') {
        return None;
    }
    let i = skip_ws(b, i + 1);
    let (curvature, i) = scan_number(b, i)?;
    let i = skip_ws(b, i);
    (b.get(i) == Some(&close)).then_some(PairMatch {
        start,
        end: i + 1,
        speed,
        curvature,
    })
}

/// Whether only whitespace and at most one comma lie between two pairs.
fn joins(gap: &[u8]) -> bool {
    gap.iter().all(|c| c.is_ascii_whitespace() || *c == b',')
        && gap.iter().filter(|&&c| c == b',').count() <= 1
}

/// Extracts the last run of numeric pairs from a model reply.
///
/// Accepts `[v, c]` and `(v, c)` pairs, optionally wrapped in list brackets,
/// with free whitespace and signed decimals. With `expected_steps`, extra
/// pairs are truncated (with a warning) and missing pairs are an error.
pub fn parse_motion(text: &str, expected_steps: Option<usize>) -> Result<MotionParse, MotionParseError> {
    let b = text.as_bytes();
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < b.len() {
        match scan_pair(b, i) {
            Some(m) => {
                i = m.end;
                pairs.push(m);
            }
            None => i += 1,
        }
    }

    // Group into runs and keep the last one.
    let mut run_start = 0;
    for k in 1..pairs.len() {
        if !joins(&b[pairs[k - 1].end..pairs[k].start]) {
            run_start = k;
        }
    }
    let run = pairs.get(run_start..).filter(|r| !r.is_empty()).ok_or(MotionParseError::MalformedMotion)?;

    let mut warnings = Vec::new();
    let mut run = run;
    if let Some(expected) = expected_steps {
        if run.len() < expected {
            return Err(MotionParseError::TooFewSteps {
                expected,
                found: run.len(),
            });
        }
        if run.len() > expected {
            warnings.push(format!(
                "reply had {} pairs, kept the first {expected}",
                run.len()
            ));
            run = &run[..expected];
        }
    }
    if let Some((index, m)) = run.iter().enumerate().find(|(_, m)| m.speed < 0.0) {
        return Err(MotionParseError::NegativeSpeed {
            index,
            speed: m.speed,
        });
    }

    Ok(MotionParse {
        samples: run
            .iter()
            .map(|m| VcSample {
                speed: m.speed,
                curvature: m.curvature,
            })
            .collect(),
        raw_span: text[run[0].start..run[run.len() - 1].end].to_string(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual_prompt::{BroadCategory, LegendEntry};
    use proptest::prelude::*;

    fn vc(speed: f64, curvature: f64) -> VcSample {
        VcSample { speed, curvature }
    }

    fn history() -> EgoHistory {
        EgoHistory {
            states: vec![vc(1.0, 0.0), vc(1.2, 0.05), vc(1.3, -0.02)],
            dt: 1.0,
        }
    }

    fn legend() -> Legend {
        let e = |id, name: &str, color: &str, rgb| LegendEntry {
            class_id: id,
            class_name: name.into(),
            color_name: Some(color.into()),
            rgb,
            category: BroadCategory::Traversable,
            pixel_count: 10,
        };
        Legend {
            entries: vec![e(1, "grass", "green", [0, 128, 0]), e(2, "mud", "brown", [139, 69, 19])],
        }
    }

    #[test]
    fn bundle_has_four_titled_stages() {
        let bundle = build_prompt(&history(), &legend(), 5).unwrap();
        let titles: Vec<_> = bundle.stages.iter().map(|s| s.title.as_str()).collect();
        assert_eq!(titles, STAGE_TITLES);
        assert!(bundle.render_user().starts_with("Prompt step1: Scene Description"));
    }

    #[test]
    fn legend_and_history_are_embedded() {
        let bundle = build_prompt(&history(), &legend(), 5).unwrap();
        for word in ["green", "grass", "brown", "mud"] {
            assert!(bundle.legend_text.contains(word));
            assert!(bundle.stages[0].body.contains(word));
        }
        let motion = &bundle.stages[3].body;
        assert!(motion.contains("speed 1.300 m/s, curvature -0.0200 1/m"), "{motion}");
        assert!(motion.contains("next 5 seconds"));
        assert!(motion.contains("exactly\n5 pairs") || motion.contains("exactly 5 pairs"));
        assert!(motion.contains("[(v1, c1)"));
    }

    #[test]
    fn empty_history_rejected() {
        let h = EgoHistory {
            states: vec![],
            dt: 1.0,
        };
        assert_eq!(build_prompt(&h, &legend(), 5), Err(PromptError::EmptyHistory));
        assert_eq!(build_prompt(&history(), &legend(), 0), Err(PromptError::InvalidHorizon));
    }

    #[test]
    fn build_is_pure() {
        let a = build_prompt(&history(), &legend(), 5).unwrap();
        let b = build_prompt(&history(), &legend(), 5).unwrap();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn template_validation() {
        let ok = "@@system\nhi\n@@stage Scene Description\n{legend}\n@@stage Object Description\n\
                  x\n@@stage Intent Description\ny\n@@stage Generate Motion\n{history} {horizon} [(v1, c1)]\n";
        let t = PromptTemplate::parse("t", ok).unwrap();
        let b = t.build(&history(), &legend(), 3, "img").unwrap();
        assert!(b.stages[3].body.contains(" 3 [(v1, c1)]"));

        let missing = ok.replace("@@stage Intent Description\ny\n", "");
        assert!(PromptTemplate::parse("t", &missing).is_err());
        let unknown = ok.replace("{legend}", "{speed}");
        assert!(matches!(PromptTemplate::parse("t", &unknown), Err(PromptError::Template(_))));
        let no_format = ok.replace("[(v1, c1)]", "");
        assert!(PromptTemplate::parse("t", &no_format).is_err());
        let escaped = ok.replace("x\n", "{{literal}}\n");
        let t = PromptTemplate::parse("t", &escaped).unwrap();
        let b = t.build(&history(), &legend(), 3, "img").unwrap();
        assert!(b.stages[1].body.contains("{literal}"));
    }

    #[test]
    fn parses_figure_two_motion() {
        let text = "[0.3, 0.0], [0.3, 0.0], [0.3, 0.0], [0.3, 0.0], [0.3, 0.0]";
        let p = parse_motion(text, Some(5)).unwrap();
        assert_eq!(p.samples, vec![vc(0.3, 0.0); 5]);
        assert_eq!(p.raw_span, text);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn parses_tuple_list_in_prose() {
        let p = parse_motion("Here is the plan: [(1.2, 0.05), (1.3, -0.02)]", None).unwrap();
        assert_eq!(p.samples, vec![vc(1.2, 0.05), vc(1.3, -0.02)]);
        assert_eq!(p.raw_span, "(1.2, 0.05), (1.3, -0.02)");
    }

    #[test]
    fn no_pairs_is_malformed() {
        assert_eq!(
            parse_motion("I cannot determine a trajectory.", None),
            Err(MotionParseError::MalformedMotion)
        );
        assert_eq!(parse_motion("", Some(5)), Err(MotionParseError::MalformedMotion));
        assert_eq!(parse_motion("[1, 2, 3]", None), Err(MotionParseError::MalformedMotion));
    }

    #[test]
    fn takes_last_sequence() {
        let text = "History: [(1.0, 0.0), (1.0, 0.0)].\nAnswer:\n(2.0, 0.1)\n(2.5, 0.2)";
        let p = parse_motion(text, None).unwrap();
        assert_eq!(p.samples, vec![vc(2.0, 0.1), vc(2.5, 0.2)]);
    }

    #[test]
    fn truncates_and_rejects() {
        let p = parse_motion("[(1,0),(2,0),(3,0)]", Some(2)).unwrap();
        assert_eq!(p.samples, vec![vc(1.0, 0.0), vc(2.0, 0.0)]);
        assert_eq!(p.warnings.len(), 1);
        assert_eq!(
            parse_motion("[(1,0),(2,0)]", Some(3)),
            Err(MotionParseError::TooFewSteps { expected: 3, found: 2 })
        );
        assert_eq!(
            parse_motion("[(1,0),(-2,0)]", None),
            Err(MotionParseError::NegativeSpeed { index: 1, speed: -2.0 })
        );
    }

    #[test]
    fn number_forms() {
        let p = parse_motion("( +1.5e0 ,-.25 ) [ 2. , 3E-2 ]", None).unwrap();
        assert_eq!(p.samples, vec![vc(1.5, -0.25), vc(2.0, 0.03)]);
        // Overflowing values are not numbers.
        assert!(parse_motion("(1e999, 0)", None).is_err());
        // A mismatched bracket does not form a pair.
        assert!(parse_motion("(1, 0]", None).is_err());
    }

    #[test]
    fn serialize_round_trip() {
        let samples = vec![vc(0.1, -0.0), vc(1e-7, 123456.789), vc(3.0, 1.0 / 3.0)];
        let text = serialize_motion(&samples);
        assert_eq!(parse_motion(&text, None).unwrap().samples, samples);
    }

    proptest! {
        #[test]
        fn never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            if let Ok(p) = parse_motion(&text, None) {
                let again = parse_motion(&serialize_motion(&p.samples), None).unwrap();
                prop_assert_eq!(again.samples, p.samples);
            }
        }

        #[test]
        fn pair_soup_round_trips(
            pairs in prop::collection::vec((0.0..100.0f64, -2.0..2.0f64), 1..10),
            paren in any::<bool>(),
        ) {
            let body: Vec<String> = pairs.iter().map(|(v, c)| {
                if paren { format!("({v},{c})") } else { format!("[ {v} , {c} ]") }
            }).collect();
            let text = format!("Plan follows.\n{}\nDone.", body.join(",\n"));
            let p = parse_motion(&text, Some(pairs.len())).unwrap();
            let expected: Vec<_> = pairs.iter().map(|&(v, c)| vc(v, c)).collect();
            prop_assert_eq!(&p.samples, &expected);
            let again = parse_motion(&serialize_motion(&p.samples), None).unwrap();
            prop_assert_eq!(again.samples, expected);
        }
    }
}
