//! `boxseg`: generate corpora, train, pseudo-label, evaluate, report.
//!
//! Failures print one JSON line on stderr (`error`, `exit_code`,
//! `message`) and exit with a status specific to the error kind.

mod config;
mod error;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxseg::eval::{
    compute_macc, corpus_macc, evaluate, nearest_center_baseline, EvalScene, MetricReport,
};
use boxseg::model::{Checkpoint, ModelParams};
use boxseg::parallel::par_map;
use boxseg::pseudolabel::teacher_step;
use boxseg::scene::{load_corpus, write_corpus, Scene};
use boxseg::tensor::Real;
use boxseg::training::{metrics_csv, train, MetricsRow, Precision, PreparedScene};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{require_path, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "boxseg", version, about = "Box-supervised pseudo-mask generation on synthetic point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a corpus of generated scenes.
    GenScenes(GenArgs),
    /// Train student and teacher on a corpus.
    Train(TrainArgs),
    /// Label overlap points with a checkpointed teacher and score them.
    PseudoLabel(PseudoArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Turn a metrics file into plot-ready CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    /// First scene seed; scenes use seeds seed..seed+n.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Teacher uses a learnable position bank instead of instance centers.
    #[arg(long)]
    no_center_refine: bool,
    /// Drop the query consistency term.
    #[arg(long)]
    no_loss_q: bool,
    /// Drop the masked-feature consistency term.
    #[arg(long)]
    no_loss_f: bool,
}

#[derive(Args)]
struct PseudoArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for per-scene label files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_center_refine: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_center_refine: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// `metrics.csv` from `train` or `metrics.json` from `eval`.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Train(a) => train_cmd(a),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn gen_scenes(a: GenArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.scene.seed = a.seed;
    cfg.scene.validate()?;
    if a.n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.n as u64).collect();
    create_dir(&a.out)?;
    let written = write_corpus(&a.out, &cfg.scene, &seeds)?;
    cfg.paths.corpus = Some(a.out.clone());
    cfg.save(&a.out)?;
    log::info!("wrote {} scenes to {}", written.len(), a.out.display());
    Ok(())
}

/// Checks that every scene fits the model before any work starts.
fn load_checked_corpus(dir: &Path, cfg: &RunConfig) -> Result<Vec<(u64, Scene)>, CliError> {
    let corpus = load_corpus(dir)?;
    for (seed, scene) in &corpus {
        if let Some(c) = scene.class_ids().iter().find(|&&c| c >= cfg.model.num_classes) {
            return Err(CliError::Data(format!(
                "scene {seed} has class {c}, model has {} classes",
                cfg.model.num_classes
            )));
        }
        if scene.num_instances() > cfg.model.num_queries || scene.num_points() < cfg.model.num_queries {
            return Err(CliError::Data(format!(
                "scene {seed} has {} instances and {} points; the model needs at most {} instances and at least as many points",
                scene.num_instances(),
                scene.num_points(),
                cfg.model.num_queries
            )));
        }
    }
    Ok(corpus)
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(p) = a.precision {
        cfg.train.precision = p;
    }
    if a.no_center_refine {
        cfg.train.center_refine = false;
    }
    if a.no_loss_q {
        cfg.train.weights.q = 0.0;
    }
    if a.no_loss_f {
        cfg.train.weights.f = 0.0;
    }
    let corpus_dir = require_path(a.corpus, &cfg.paths.corpus, "corpus")?;
    let out = require_path(a.out, &cfg.paths.out, "out")?;
    cfg.paths.corpus = Some(corpus_dir.clone());
    cfg.paths.out = Some(out.clone());
    cfg.paths.checkpoint = Some(out.join(CHECKPOINT_FILE));
    cfg.validate()?;
    let corpus = load_checked_corpus(&corpus_dir, &cfg)?;
    create_dir(&out)?;
    cfg.save(&out)?;
    match cfg.train.precision {
        Precision::F32 => run_training::<f32>(&cfg, corpus, &out),
        Precision::F64 => run_training::<f64>(&cfg, corpus, &out),
    }
}

const CHECKPOINT_FILE: &str = "checkpoint_final.json";

fn run_training<T: Real>(cfg: &RunConfig, corpus: Vec<(u64, Scene)>, out: &Path) -> Result<(), CliError> {
    let prepared: Vec<PreparedScene<T>> = corpus.into_iter().map(|(s, scene)| PreparedScene::new(s, scene)).collect();
    let every = (cfg.train.steps / 10).max(1) as u64;
    let run = train(&cfg.model, &cfg.train, &prepared, |row: &MetricsRow| {
        if row.step % every == 0 {
            log::info!("step {} total {:.4} lr {:.2e}", row.step, row.total, row.lr);
        }
    })?;
    if run.aborted > 0 {
        log::warn!("{} step(s) rolled back on non-finite values", run.aborted);
    }
    write_file(&out.join("metrics.csv"), &metrics_csv(&run.metrics))?;
    let ck = Checkpoint::new(&cfg.model, run.state.step, &run.state.student, &run.state.teacher);
    ck.save(out.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// Loads a checkpoint; with an explicit config its model section must
/// agree with the checkpoint's shapes.
fn load_checkpoint(path: &Path, cfg: &RunConfig, explicit: bool) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path, explicit.then_some(&cfg.model))?;
    Ok(ck)
}

fn eval_scenes<T: Real>(corpus: Vec<(u64, Scene)>) -> Result<Vec<(u64, EvalScene<T>)>, CliError> {
    corpus
        .into_iter()
        .map(|(seed, scene)| Ok((seed, EvalScene::new(scene)?)))
        .collect()
}

#[derive(Serialize)]
struct PseudoFile {
    seed: u64,
    /// Overlap point index -> assigned instance.
    assignments: BTreeMap<usize, usize>,
    macc: Option<f64>,
    baseline_macc: Option<f64>,
}

#[derive(Serialize)]
struct PseudoSummary {
    scenes: usize,
    scenes_with_overlap: usize,
    macc: Option<f64>,
    baseline_macc: Option<f64>,
}

fn pseudo_label(a: PseudoArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if a.no_center_refine {
        cfg.train.center_refine = false;
    }
    let ck = load_checkpoint(&a.checkpoint, &cfg, a.config.is_some())?;
    cfg.model = ck.config.clone();
    cfg.scene.num_classes = cfg.model.num_classes;
    let corpus = load_checked_corpus(&a.corpus, &cfg)?;
    let scenes = eval_scenes::<f64>(corpus)?;
    create_dir(&a.out)?;
    let files = par_map(&scenes, |(seed, s)| -> Result<PseudoFile, CliError> {
        let out = teacher_step(
            &ck.teacher,
            &cfg.model,
            &s.scene,
            &s.inputs,
            &s.partition,
            &cfg.train.weights,
            cfg.train.center_refine,
        )?;
        let baseline = nearest_center_baseline(&s.partition, &s.scene);
        Ok(PseudoFile {
            seed: *seed,
            assignments: s.partition.overlap.iter().copied().zip(out.pseudo.assignments.iter().copied()).collect(),
            macc: compute_macc(&out.pseudo, &s.oracle, &s.partition),
            baseline_macc: compute_macc(&baseline, &s.oracle, &s.partition),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    for f in &files {
        write_json(&a.out.join(format!("pseudo_{}.json", f.seed)), f)?;
    }
    let macc: Vec<Option<f64>> = files.iter().map(|f| f.macc).collect();
    let base: Vec<Option<f64>> = files.iter().map(|f| f.baseline_macc).collect();
    write_json(
        &a.out.join("pseudo_summary.json"),
        &PseudoSummary {
            scenes: files.len(),
            scenes_with_overlap: macc.iter().flatten().count(),
            macc: corpus_macc(&macc),
            baseline_macc: corpus_macc(&base),
        },
    )?;
    cfg.paths.corpus = Some(a.corpus);
    cfg.paths.checkpoint = Some(a.checkpoint);
    cfg.paths.out = Some(a.out.clone());
    cfg.save(&a.out)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if a.no_center_refine {
        cfg.train.center_refine = false;
    }
    let ck = load_checkpoint(&a.checkpoint, &cfg, a.config.is_some())?;
    cfg.model = ck.config.clone();
    cfg.scene.num_classes = cfg.model.num_classes;
    let corpus = load_checked_corpus(&a.corpus, &cfg)?;
    let report = match cfg.train.precision {
        Precision::F32 => eval_at::<f32>(&ck, &cfg, corpus)?,
        Precision::F64 => eval_at::<f64>(&ck, &cfg, corpus)?,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &report)
}

fn eval_at<T: Real>(ck: &Checkpoint, cfg: &RunConfig, corpus: Vec<(u64, Scene)>) -> Result<MetricReport, CliError> {
    let scenes: Vec<EvalScene<T>> = eval_scenes(corpus)?.into_iter().map(|(_, s)| s).collect();
    let student: ModelParams<T> = ck.student.cast();
    let teacher: ModelParams<T> = ck.teacher.cast();
    Ok(evaluate(
        &student,
        &teacher,
        &cfg.model,
        &scenes,
        &cfg.train.weights,
        cfg.train.center_refine,
    )?)
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.metrics).map_err(|e| io_err(&a.metrics, e))?;
    let csv = if let Ok(m) = serde_json::from_str::<MetricReport>(&text) {
        eval_report_csv(&m)
    } else {
        training_report_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.metrics.display())))?
    };
    write_file(&a.out, &csv)
}

/// Long format: `scope,metric,value`.
fn eval_report_csv(m: &MetricReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from("scope,metric,value\n");
    for (name, v) in [
        ("ap", Some(m.ap)),
        ("ap50", Some(m.ap50)),
        ("ap25", Some(m.ap25)),
        ("macc", m.macc),
        ("baseline_macc", m.baseline_macc),
    ] {
        out += &format!("overall,{name},{}\n", fmt(v));
    }
    for c in &m.per_class {
        for (name, v) in [("ap", c.ap), ("ap50", c.ap50), ("ap25", c.ap25)] {
            out += &format!("class_{},{name},{v}\n", c.class_id);
        }
    }
    out
}

/// Training metrics plus a trailing ten-step mean of the total.
fn training_report_csv(text: &str) -> Result<String, String> {
    let mut lines = text.lines();
    if lines.next() != Some(MetricsRow::HEADER) {
        return Err("not an eval report or a training metrics file".into());
    }
    let mut totals = Vec::new();
    let mut out = format!("{},total_mean10\n", MetricsRow::HEADER);
    for (i, line) in lines.enumerate() {
        let total: f64 = line
            .split(',')
            .nth(6)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("bad row {}", i + 1))?;
        totals.push(total);
        let window = &totals[totals.len().saturating_sub(10)..];
        out += &format!("{line},{}\n", window.iter().sum::<f64>() / window.len() as f64);
    }
    Ok(out)
}
