mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use symspot::conngraph::{build_connections, edges_csv, ConnError};
use symspot::io::{write_atomic, IoError};
use symspot::metrics::MetricsError;
use symspot::model::ModelError;
use symspot::points::{build_point_set, points_csv};
use symspot::synth::{generate_corpus, write_corpus, SynthConfig};
use symspot::trainer::{
    ablate, ablation_csv, checkpoint_base, dataset_categories, evaluate, load_dataset, oracle_predictions,
    predict_documents, score_predictions, write_evaluation, AblationAxis, MetricsReport, TrainConfig, TrainError,
    Trainer, CONFIG_KEYS,
};
use symspot::vgio::{
    import_svg, parse_document, parse_prediction, render_panoptic, serialize_prediction, Document, VgioError,
};

const THREADS_VAR: &str = "SYMPOINT_THREADS";

fn config_help() -> String {
    let mut s = String::from("Config file keys (`key = value`, `#` comments):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<28} {d}\n"));
    }
    s.push_str(&format!("\nEnvironment: {THREADS_VAR} caps worker threads for prediction.\n"));
    s.push_str("Exit codes: 2 bad flags, 3 I/O, 4 validation, 5 numerical abort.");
    s
}

#[derive(Parser)]
#[command(name = "symspot", version, about = "Panoptic symbol spotting on vector drawings", after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus plus manifest.
    Synth(SynthArgs),
    /// Train a model on a directory of labeled documents.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Predict and score a labeled corpus with a checkpoint.
    Eval(EvalArgs),
    /// Train and score every variant along one ablation axis.
    #[command(after_help = config_help())]
    Ablate(AblateArgs),
    /// Score prediction files against ground-truth documents.
    Metrics(MetricsArgs),
    /// Predict one document (JSON or SVG).
    Predict(PredictArgs),
    /// Draw a document colored by a prediction.
    Render(RenderArgs),
    /// Write the primitive-point table of a document as CSV.
    DumpPoints(DumpPointsArgs),
    /// Write the connection edge list of a document as CSV.
    DumpGraph(DumpGraphArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of documents.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    symbols_min: usize,
    #[arg(long, default_value_t = 5)]
    symbols_max: usize,
    /// Canvas side in px.
    #[arg(long, default_value_t = 200.0)]
    canvas: f64,
    /// Unlabeled clutter primitives per document.
    #[arg(long, default_value_t = 4)]
    clutter: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(&read_text(p)?)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of labeled documents.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for loss.csv, loss.svg and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint base path or run directory.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Output directory for predictions/, metrics.json and pq.svg.
    #[arg(long)]
    out: PathBuf,
    /// Use the ground-truth labels as predictions.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Training documents.
    #[arg(long)]
    data: PathBuf,
    /// Held-out documents; defaults to the training set.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// acm | ccl | downsample
    #[arg(long)]
    axis: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory of ground-truth documents.
    #[arg(long)]
    gt: PathBuf,
    /// Directory of prediction files named `<id>.json`.
    #[arg(long)]
    pred: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Document JSON or SVG drawing.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    doc: PathBuf,
    /// Prediction file; ground truth is drawn when omitted.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpPointsArgs {
    #[arg(long)]
    doc: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpGraphArgs {
    #[arg(long)]
    doc: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Connection distance in px.
    #[arg(long, default_value_t = symspot::conngraph::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Maximum connections per primitive.
    #[arg(long, default_value_t = symspot::conngraph::DEFAULT_CAP)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Input that parsed but failed a semantic check.
#[derive(Debug, Error)]
#[error("{0}")]
struct Invalid(String);

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).map_err(|e| IoError::Io(p.display().to_string(), e).into())
}

fn read_text(p: &Path) -> Result<String> {
    String::from_utf8(read_bytes(p)?).map_err(|e| Invalid(format!("{}: {e}", p.display())).into())
}

fn read_document(p: &Path) -> Result<Document> {
    let bytes = read_bytes(p)?;
    Ok(parse_document(&bytes).with_context(|| p.display().to_string())?)
}

fn threads() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Accepts a run directory or a checkpoint base path (with or without extension).
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        checkpoint_base(p)
    } else {
        p.with_extension("")
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                symbols_min: a.symbols_min,
                symbols_max: a.symbols_max,
                canvas: a.canvas,
                clutter: a.clutter,
                seed: a.seed,
                ..SynthConfig::default()
            };
            let (docs, manifest) = generate_corpus(&cfg, a.n).map_err(Invalid)?;
            write_corpus(&a.out, &docs, &manifest)?;
            println!("wrote {} documents to {}", docs.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = a.config.load()?;
            let docs = load_dataset(&a.data)?;
            let mut trainer = if a.resume {
                Trainer::<f32>::load(&checkpoint_base(&a.out), Some(cfg))?
            } else {
                Trainer::<f32>::new(cfg, dataset_categories(&docs)?)?
            };
            trainer.train(&docs, Some(&a.out), |l| {
                log::info!("epoch {} total {:.5}", l.epoch, l.total);
            })?;
            write_atomic(&a.out.join("loss.svg"), plots::loss_chart(&trainer.history).as_bytes())?;
            if let Some(l) = trainer.history.last() {
                println!("epoch {} loss {:.6}", l.epoch, l.total);
            }
        }
        Command::Eval(a) => {
            let docs = load_dataset(&a.data)?;
            let (preds, report) = if a.oracle {
                let preds = oracle_predictions(&docs);
                let (scores, corpus) = score_predictions(&docs, &preds)?;
                (preds, MetricsReport::new(&scores, corpus))
            } else {
                let base = checkpoint_path(a.checkpoint.as_deref().expect("required unless oracle"));
                let t = Trainer::<f32>::load(&base, None)?;
                evaluate(&t.model, &docs, t.config.seed, threads())?
            };
            write_evaluation(&a.out, &preds, &report)?;
            write_atomic(&a.out.join("pq.svg"), plots::pq_bars(&report.corpus.per_class).as_bytes())?;
            let c = &report.corpus;
            println!("PQ {:.4} SQ {:.4} RQ {:.4} F1 {:.4} wF1 {:.4}", c.pq, c.sq, c.rq, c.f1, c.wf1);
        }
        Command::Ablate(a) => {
            let cfg = a.config.load()?;
            let axis: AblationAxis = a.axis.parse().map_err(Invalid)?;
            let train = load_dataset(&a.data)?;
            let eval = match &a.eval_data {
                Some(p) => load_dataset(p)?,
                None => train.clone(),
            };
            let rows = ablate::<f32>(&train, &eval, &cfg, axis, threads(), |r| {
                log::info!("{}: PQ {:.4}", r.variant, r.pq);
            })?;
            write_atomic(&a.out, ablation_csv(&rows).as_bytes())?;
            print!("{}", ablation_csv(&rows));
        }
        Command::Metrics(a) => {
            let docs = load_dataset(&a.gt)?;
            let mut preds = Vec::with_capacity(docs.len());
            for d in &docs {
                let p = a.pred.join(format!("{}.json", d.id));
                preds.push(parse_prediction(&read_bytes(&p)?).with_context(|| p.display().to_string())?);
            }
            let (scores, corpus) = score_predictions(&docs, &preds)?;
            let report = MetricsReport::new(&scores, corpus).to_json();
            match &a.out {
                Some(p) => write_atomic(p, &report)?,
                None => print!("{}", String::from_utf8_lossy(&report)),
            }
        }
        Command::Predict(a) => {
            let t = Trainer::<f32>::load(&checkpoint_path(&a.checkpoint), None)?;
            let bytes = read_bytes(&a.input)?;
            let doc = if a.input.extension().is_some_and(|e| e == "svg") {
                let id = a.input.file_stem().map_or("document".into(), |s| s.to_string_lossy().into_owned());
                let imp = import_svg(&bytes, &id, &t.model.config.categories)?;
                if imp.warnings > 0 {
                    log::warn!("{} unsupported SVG elements skipped", imp.warnings);
                }
                imp.document
            } else {
                parse_document(&bytes)?
            };
            let preds = predict_documents(&t.model, std::slice::from_ref(&doc), t.config.seed, 1)?;
            write_atomic(&a.out, &serialize_prediction(&preds[0]))?;
        }
        Command::Render(a) => {
            let doc = read_document(&a.doc)?;
            let pred = match &a.pred {
                Some(p) => parse_prediction(&read_bytes(p)?)?,
                None => symspot::vgio::PanopticPrediction::from_ground_truth(&doc),
            };
            write_atomic(&a.out, &render_panoptic(&doc, &pred)?)?;
        }
        Command::DumpPoints(a) => {
            let doc = read_document(&a.doc)?;
            write_atomic(&a.out, points_csv(&build_point_set(&doc)).as_bytes())?;
        }
        Command::DumpGraph(a) => {
            let doc = read_document(&a.doc)?;
            let g = build_connections(&doc.primitives, a.epsilon, a.cap, a.seed)?;
            write_atomic(&a.out, edges_csv(&g, &doc.primitives).as_bytes())?;
        }
    }
    Ok(())
}

/// `(exit code, category)` for an error chain.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    const IO: (u8, &str) = (3, "io");
    const INVALID: (u8, &str) = (4, "validation");
    const NUMERICAL: (u8, &str) = (5, "numerical");
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Io(_) => IO,
                _ if e.is_numerical() => NUMERICAL,
                _ => INVALID,
            };
        }
        if cause.is::<IoError>() || cause.is::<std::io::Error>() {
            return IO;
        }
        if cause.is::<VgioError>()
            || cause.is::<MetricsError>()
            || cause.is::<ConnError>()
            || cause.is::<ModelError>()
            || cause.is::<Invalid>()
        {
            return INVALID;
        }
    }
    INVALID
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, cat) = classify(&e);
            eprintln!("error[{cat}]: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
