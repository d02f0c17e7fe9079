//! `alpr`: run the pipeline, serve the API, evaluate detections and poke at
//! single inputs.
//!
//! Exit codes: 0 success, 1 environment error (missing files, busy port,
//! unavailable engine), 2 input error (bad config, malformed data), 3
//! degenerate data (for example a single-intensity image).

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use alpr_core::config::{self, ConfigError, PipelineConfig};
use alpr_core::eval::{self, EvalError};
use alpr_core::geometry::{self, GeometryError};
use alpr_core::imaging::{self, ImagingError};
use alpr_core::ocr::OcrError;
use alpr_core::pipeline::source::{self, SourceError};
use alpr_core::pipeline::{self, Backends, PipelineError, RunControl, RunSummary, StoreSink};
use alpr_core::store::{Store, StoreError};
use alpr_service::ServiceError;

#[derive(Parser)]
#[command(name = "alpr", version, about = "Automatic licence plate recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a source until it ends and print the summary.
    Run(RunArgs),
    /// Serve the HTTP control plane until SIGINT or SIGTERM.
    Serve(ServeArgs),
    /// Score detections against darknet labels, or compute an F1 score.
    Eval(EvalArgs),
    /// Otsu-binarize an image and print the chosen threshold.
    Preprocess(PreprocessArgs),
    /// Decode a raw detector head tensor into NMS-filtered boxes.
    Decode(DecodeArgs),
    /// Print stored events whose plate matches.
    Query(QueryArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Frame directory, video file (needs `decoder_command`) or `-` for a
    /// raw RGB24 stream on stdin. Defaults to the config's `source`.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event log path; defaults to the config's `store_path`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `port`.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct EvalArgs {
    /// NDJSON predictions `{image_id, class_id, cx, cy, w, h, score}`.
    #[arg(long, required_unless_present = "f1")]
    pred: Option<PathBuf>,
    /// Directory of images with darknet `.txt` labels.
    #[arg(long, required_unless_present = "f1")]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = eval::DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    #[arg(long, default_value_t = eval::DEFAULT_SCORE_CUTOFF)]
    cutoff: f64,
    /// Print the F1 score of a precision and recall pair instead.
    #[arg(long, num_args = 2, value_names = ["PRECISION", "RECALL"], conflicts_with_all = ["pred", "gt"])]
    f1: Option<Vec<f64>>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    tensor: PathBuf,
    /// Head spec file (`grid_size`, `anchors`, `class_count`, ...).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.45)]
    nms: f64,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    plate: String,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Environment(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Degenerate(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Environment(_) => 1,
            CliError::Input(_) => 2,
            CliError::Degenerate(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Environment(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        match e {
            ImagingError::DegenerateHistogram => CliError::Degenerate(e.to_string()),
            ImagingError::Io(_) => CliError::Environment(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SourceError> for CliError {
    fn from(e: SourceError) -> Self {
        match e {
            SourceError::Unavailable { .. } | SourceError::Decoder(_) | SourceError::Io(_) => {
                CliError::Environment(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<OcrError> for CliError {
    fn from(e: OcrError) -> Self {
        match e {
            OcrError::EngineNotFound(_) | OcrError::Io(_) => CliError::Environment(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::CorruptRecord(_) | StoreError::OutOfOrder { .. } => CliError::Input(e.to_string()),
            _ => CliError::Environment(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(e) => e.into(),
            PipelineError::Imaging(e) => e.into(),
            PipelineError::Geometry(e) => e.into(),
            PipelineError::Source(e) => e.into(),
            PipelineError::Ocr(e) => e.into(),
            PipelineError::UnknownBackend { .. } => CliError::Input(e.to_string()),
            PipelineError::BackendFailure { .. } | PipelineError::Sink(_) => CliError::Environment(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Environment(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Store(e) => e.into(),
            _ => CliError::Environment(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Environment(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn print_summary(s: &RunSummary) {
    println!(
        "frames {}  processed {}  gated_out {}  dropped {}  events {}  elapsed_ms {:.1}  fps {:.2}",
        s.frames_in, s.frames_processed, s.frames_gated_out, s.frames_dropped, s.events, s.elapsed_ms, s.fps
    );
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(src) = args.source {
        config.source = Some(src);
    }
    if let Some(out) = args.out {
        config.store_path = out;
    }
    let backends = Backends::from_config(&config)?;
    let mut source = source::open_configured(&config)?;
    let store = Store::open(&config.store_path)?;
    let mut sink = StoreSink::new(&store);
    match pipeline::run(&mut source, &mut sink, &config, &backends, &RunControl::new()) {
        Ok(summary) => {
            print_summary(&summary);
            Ok(())
        }
        Err(e) => {
            print_summary(&e.summary);
            Err(e.cause.into())
        }
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutdown requested");
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(port) = args.port {
        config.port = port;
    }
    let backends = Backends::from_config(&config)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Environment(e.to_string()))?;
    let state = runtime.block_on(alpr_service::serve(config, backends, shutdown_signal()))?;
    if let Some(s) = state.summary {
        log::info!(
            "final summary: {} frames in, {} processed, {} dropped, {} events, {:.2} fps",
            s.frames_in,
            s.frames_processed,
            s.frames_dropped,
            s.events,
            s.fps
        );
        print_summary(&s);
    }
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<(), CliError> {
    if let Some(pr) = args.f1 {
        let (p, r) = (pr[0], pr[1]);
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&r) {
            return Err(CliError::Input(format!("precision and recall must lie in [0, 1], got {p} and {r}")));
        }
        println!("{:.2}", eval::f1(p, r));
        return Ok(());
    }
    let (pred, gt) = (args.pred.expect("required by clap"), args.gt.expect("required by clap"));
    let file = std::fs::File::open(&pred).map_err(|e| io_error(&pred, e))?;
    let preds = eval::parse_predictions(BufReader::new(file))?;
    let gts = eval::parse_darknet_annotations(&gt)?;
    print!("{}", eval::evaluate(&preds, &gts, args.iou, args.cutoff).render_table());
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<(), CliError> {
    let img = imaging::read_pnm(&args.image)?;
    let gray = if img.channels() == 3 { imaging::grayscale(&img)? } else { img };
    let threshold = imaging::otsu_threshold(&imaging::histogram(&gray)?)?;
    imaging::write_pnm(&imaging::binarize(&gray, threshold)?, &args.out)?;
    println!("threshold {threshold}");
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<(), CliError> {
    let spec = config::load_head_spec(&args.spec)?;
    if !args.tensor.is_file() {
        return Err(CliError::Environment(format!("{}: no such file", args.tensor.display())));
    }
    let (header, values) = geometry::read_head_tensor(&args.tensor)?;
    if !header.matches(&spec) {
        return Err(CliError::Input(format!(
            "tensor header {} {} {} does not match the head spec {} {} {}",
            header.grid_size,
            header.anchor_count,
            header.class_count,
            spec.grid_size(),
            spec.anchor_count(),
            spec.class_count()
        )));
    }
    let boxes = geometry::nms(&geometry::decode_head(&values, &spec, args.conf)?, args.nms);
    write_ndjson(&boxes)
}

fn query(args: QueryArgs) -> Result<(), CliError> {
    if !args.store.is_file() {
        return Err(CliError::Environment(format!("{}: no such event store", args.store.display())));
    }
    let store = Store::open(&args.store)?;
    write_ndjson(&store.query_by_plate(&args.plate))
}

fn write_ndjson<T: serde::Serialize>(items: &[T]) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(out, "{line}").map_err(|e| CliError::Environment(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => evaluate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Decode(a) => decode(a),
        Command::Query(a) => query(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("alpr: {e}");
            ExitCode::from(e.code())
        }
    }
}
