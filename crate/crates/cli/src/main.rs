//! `offemma`: run evaluations, render overlays and plots, print reports.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error,
//! 3 backend error, 4 dataset error.

mod plot;
mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use offemma_core::visual_prompt::{
    build_legend, consolidate_labels, overlay, ClassTable, LabelMap, VisualPromptError,
};
use offemma_pipeline::report::{paired_csv, read_records, summary_csv, write_report, RECORDS_FILE};
use offemma_pipeline::{compare_single_vs_sc, run_eval, PipelineError, RunConfig};
use thiserror::Error;

use crate::plot::{find_record, render_png, render_svg, Layers, PlotError, PlotSpec};

pub const CACHE_DIR_ENV: &str = "OFFEMMA_CACHE_DIR";
pub const COMPARISON_CSV: &str = "comparison.csv";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Visual(#[from] VisualPromptError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) => match e {
                PipelineError::Dataset(_) => 4,
                PipelineError::Backend(_) | PipelineError::AllBackendsFailed(_) => 3,
                PipelineError::ConfigInvalid(_)
                | PipelineError::VisualPrompt { .. }
                | PipelineError::Prompt(_)
                | PipelineError::Io { .. } => 2,
                PipelineError::Consistency(_) | PipelineError::Metrics(_) => 1,
            },
            CliError::Visual(_) | CliError::Plot(_) | CliError::Csv { .. } | CliError::Io { .. } => 2,
            CliError::Image { .. } => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "offemma", version, about = "Off-road VLM trajectory planning evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a dataset and write report files.
    Run(RunArgs),
    /// Paint a label map over a camera image and write its legend.
    Overlay(OverlayArgs),
    /// Draw one frame of a report as a top-down plot.
    Plot(PlotArgs),
    /// Print a summary CSV as an aligned table.
    Report {
        csv: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated scene ids.
    #[arg(long, value_delimiter = ',')]
    scenes: Option<Vec<String>>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Response cache directory; also read from OFFEMMA_CACHE_DIR.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Also score sample 0 alone and write comparison.csv.
    #[arg(long)]
    compare: bool,
}

#[derive(clap::Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    /// PNG or VPRL label map.
    #[arg(long)]
    labels: PathBuf,
    /// Class table TOML; the bundled table when absent.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = offemma_core::visual_prompt::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    consolidate: bool,
    /// Output PNG; the legend goes next to it with a .legend.txt extension.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Svg,
    Png,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Layer {
    Gt,
    Predicted,
    Ensemble,
    Obstacle,
}

#[derive(clap::Args)]
struct PlotArgs {
    /// records.jsonl, or the output directory holding it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    frame: String,
    /// Metres from the ego position to the image border.
    #[arg(long, default_value_t = 10.0)]
    extent: f64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 400)]
    size: u32,
    #[arg(long, value_delimiter = ',', default_values_t = [Layer::Gt, Layer::Predicted, Layer::Ensemble, Layer::Obstacle].map(LayerName))]
    layers: Vec<LayerName>,
    #[arg(long, value_enum, default_value_t = Format::Svg)]
    format: Format,
    #[arg(short, long)]
    out: PathBuf,
}

/// Wrapper so the layer list can carry a default.
#[derive(Clone, Copy)]
struct LayerName(Layer);

impl std::fmt::Display for LayerName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.to_possible_value().expect("no skipped variants").get_name())
    }
}

impl std::str::FromStr for LayerName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Layer::from_str(s, true).map(LayerName)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_table(csv_text: &str) {
    match table::read_csv(csv_text.as_bytes()) {
        Ok(rows) => print!("{}", table::render(&rows)),
        Err(_) => print!("{csv_text}"),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(v) = args.dataset_root {
        cfg.dataset_root = v;
    }
    if let Some(v) = args.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = args.scenes {
        cfg.scenes = Some(v);
    }
    if let Some(v) = args.method {
        cfg.method = v;
    }
    if let Some(v) = args.model {
        cfg.model = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n_paths {
        cfg.n_paths = v;
    }
    if let Some(v) = args.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    match (args.cache_dir, std::env::var_os(CACHE_DIR_ENV)) {
        (Some(dir), _) => cfg.cache_dir = Some(dir),
        (None, Some(dir)) if !dir.is_empty() => cfg.cache_dir = Some(dir.into()),
        _ => {}
    }
    cfg.validate()?;

    let (report, comparison) = if args.compare {
        let paired = compare_single_vs_sc(&cfg)?;
        let csv = paired_csv(&paired);
        (paired.report, Some(csv))
    } else {
        (run_eval(&cfg)?, None)
    };
    let written = write_report(&report, &cfg.output_dir)?;
    print_table(&summary_csv(&report.overall));
    if let Some(csv) = comparison {
        let path = cfg.output_dir.join(COMPARISON_CSV);
        fs::write(&path, &csv).map_err(io_err(&path))?;
        println!();
        print_table(&csv);
    }
    println!();
    println!("frames: {}, skipped: {}, dropped samples: {}", report.records.len(), report.skipped.len(), report.dropped_samples);
    println!("run digest: {}", report.run_digest);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn legend_path(out: &Path) -> PathBuf {
    out.with_extension("legend.txt")
}

fn cmd_overlay(args: OverlayArgs) -> Result<(), CliError> {
    let img = image::open(&args.image)
        .map_err(|source| CliError::Image {
            path: args.image.clone(),
            source,
        })?
        .to_rgb8();
    let mut labels = LabelMap::load(&args.labels)?;
    let table = match &args.table {
        Some(p) => ClassTable::load(p)?,
        None => ClassTable::rellis_default(),
    };
    if args.consolidate {
        labels = consolidate_labels(&labels, &table)?;
    }
    let annotated = overlay(&img, &labels, &table, args.alpha)?;
    let legend = build_legend(&labels, &table)?;
    fs::write(&args.out, annotated.encode_png()).map_err(io_err(&args.out))?;
    let lp = legend_path(&args.out);
    legend.write_to(&lp)?;
    println!("wrote {}", args.out.display());
    println!("wrote {}", lp.display());
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<(), CliError> {
    let records_path = if args.report.is_dir() {
        args.report.join(RECORDS_FILE)
    } else {
        args.report.clone()
    };
    let record = find_record(read_records(&records_path)?, &args.frame)?;
    let has = |l: Layer| args.layers.iter().any(|n| n.0 == l);
    let layers = Layers {
        gt: has(Layer::Gt),
        predicted: has(Layer::Predicted),
        ensemble: has(Layer::Ensemble),
        obstacle: has(Layer::Obstacle),
    };
    let spec = PlotSpec::new(record, args.extent, args.size, layers)?;
    match args.format {
        Format::Svg => fs::write(&args.out, render_svg(&spec)).map_err(io_err(&args.out))?,
        Format::Png => fs::write(&args.out, offemma_core::visual_prompt::encode_png(&render_png(&spec)))
            .map_err(io_err(&args.out))?,
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_report(path: PathBuf) -> Result<(), CliError> {
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let rows = table::read_csv(file).map_err(|source| CliError::Csv { path, source })?;
    print!("{}", table::render(&rows));
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Overlay(a) => cmd_overlay(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Report { csv } => cmd_report(csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
