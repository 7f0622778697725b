mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attentionet::dsp::{archive, build_dataset, AttentionClass, DatasetOptions, FilterSpec, LabeledWindow};
use attentionet::dsp::recording::{load_manifest, write_recordings};
use attentionet::gradcheck::{format_report, gradcheck, GradcheckConfig, BLOCKS};
use attentionet::model::{checkpoint, ModelConfig, ModelParams};
use attentionet::personalize::{
    format_curve_tsv, format_summary_tsv, parse_curve_tsv, personalization_sweep, FinetuneConfig,
};
use attentionet::synth::{default_spec, generate, Profile};
use attentionet::train::metrics::{parse_metrics, write_metrics, MetricsRecord};
use attentionet::train::{aggregate_folds, evaluate, run_loso, TrainConfig};
use attentionet::{Error, Result};
use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, List};
use plot::{line_chart, Series};

#[derive(Parser)]
#[command(name = "attentionet", version, about = "EEG attention-type classification pipeline")]
struct Cli {
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for fold- and subject-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more detail on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as recording files plus a manifest.
    Synth(SynthArgs),
    /// Filter, epoch and normalize the recordings of a manifest into a window archive.
    Preprocess(PreprocessArgs),
    /// Leave-one-subject-out training; one checkpoint per held-out subject.
    TrainLoso(TrainArgs),
    /// Fine-tune each subject's LOSO checkpoint on growing calibration slices.
    Personalize(PersonalizeArgs),
    /// Score a checkpoint on an archive.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients block by block.
    Gradcheck(GradcheckArgs),
    /// Render SVG charts of a personalization curve and LOSO training.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    /// easy or shifted
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    seconds_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    low_cut: Option<f64>,
    #[arg(long)]
    high_cut: Option<f64>,
    #[arg(long)]
    filter_order: Option<usize>,
    /// Keep eyes-closed baseline segments.
    #[arg(long)]
    include_eyes_closed: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Directory for `<subject>.ckpt` files and `metrics.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// tiny or default
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
}

#[derive(Args)]
struct PersonalizeArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Output directory of `train-loso`.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Directory for `curve.tsv` and `summary.tsv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Seconds per class at each point, e.g. 10,20,30.
    #[arg(long)]
    schedule: Option<List>,
    #[arg(long)]
    finetune_learning_rate: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_batch_size: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restrict to one subject's windows.
    #[arg(long)]
    subject: Option<String>,
    /// JSON report; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// tiny or default
    #[arg(long)]
    model: Option<String>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Negate one block's analytic gradient (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// `curve.tsv` from `personalize`.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// `metrics.jsonl` from `train-loso`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_seed(seed: Option<u64>) -> CliResult<u64> {
    seed.ok_or_else(|| Failure::Usage("--seed is required (or `seed = N` in the config file)".into()))
}

fn model_config(name: &str) -> Result<ModelConfig> {
    match name {
        "tiny" => Ok(ModelConfig::tiny()),
        "default" => Ok(ModelConfig::default()),
        _ => Err(Error::invalid(format!("unknown model '{name}' (expected tiny or default)"))),
    }
}

fn jobs(cli_jobs: Option<usize>, cfg: &ConfigFile) -> Result<usize> {
    let j = cfg.get_or("jobs", cli_jobs, 1)?;
    if j == 0 {
        return Err(Error::invalid("jobs must be at least 1"));
    }
    Ok(j)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fail before any work if `out` cannot become a directory.
fn check_out_dir(out: &Path) -> Result<()> {
    if out.exists() && !out.is_dir() {
        return Err(Error::invalid(format!("{} exists and is not a directory", out.display())));
    }
    Ok(())
}

fn load_archive(path: &Path) -> Result<Vec<LabeledWindow>> {
    let windows = archive::load(path)?;
    log::info!("{}: {} windows", path.display(), windows.len());
    Ok(windows)
}

fn subjects_of(windows: &[LabeledWindow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in windows {
        if !out.contains(&w.subject_id) {
            out.push(w.subject_id.clone());
        }
    }
    out
}

fn checkpoint_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(format!("{subject}.ckpt"))
}

fn cmd_synth(a: SynthArgs, cfg: &ConfigFile) -> CliResult<()> {
    let seed = require_seed(cfg.get("seed", a.seed)?)?;
    let profile = cfg.get_or("profile", a.profile, Profile::Shifted)?;
    let mut spec = default_spec(cfg.get_or("subjects", a.subjects, 6)?, profile, seed);
    spec.seconds_per_class = cfg.get_or("seconds_per_class", a.seconds_per_class, spec.seconds_per_class)?;
    spec.validate()?;
    check_out_dir(&a.out)?;
    let recordings = generate(&spec)?;
    create_dir(&a.out)?;
    let manifest = write_recordings(&a.out, &recordings)?;
    log::info!("wrote {} subjects, manifest {}", recordings.len(), manifest.display());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs, cfg: &ConfigFile) -> CliResult<()> {
    let defaults = FilterSpec::default();
    let spec = FilterSpec {
        low_cut: cfg.get_or("low_cut", a.filter.low_cut, defaults.low_cut)?,
        high_cut: cfg.get_or("high_cut", a.filter.high_cut, defaults.high_cut)?,
        order: cfg.get_or("filter_order", a.filter.filter_order, defaults.order)?,
        ..defaults
    };
    spec.validate(attentionet::dsp::SAMPLE_RATE as f64)?;
    let options = DatasetOptions {
        include_eyes_closed: a.filter.include_eyes_closed || cfg.get_or("include_eyes_closed", None, false)?,
    };
    let recordings = load_manifest(&a.manifest)?;
    let windows = build_dataset(&recordings, &spec, &options)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    archive::save(&windows, &a.out)?;
    log::info!("{} windows from {} subjects -> {}", windows.len(), recordings.len(), a.out.display());
    Ok(())
}

fn cmd_train_loso(a: TrainArgs, jobs_flag: Option<usize>, cfg: &ConfigFile) -> CliResult<()> {
    let seed = require_seed(cfg.get("seed", a.seed)?)?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: cfg.get_or("learning_rate", a.learning_rate, d.learning_rate)?,
        batch_size: cfg.get_or("batch_size", a.batch_size, d.batch_size)?,
        max_epochs: cfg.get_or("max_epochs", a.max_epochs, d.max_epochs)?,
        plateau_patience: cfg.get_or("plateau_patience", a.plateau_patience, d.plateau_patience)?,
        early_stop_patience: cfg.get_or("early_stop_patience", a.early_stop_patience, d.early_stop_patience)?,
        seed,
        ..d
    };
    train.validate()?;
    let model = model_config(&cfg.get_or("model", a.model, "tiny".to_string())?)?;
    let jobs = jobs(jobs_flag, cfg)?;
    check_out_dir(&a.out)?;
    let windows = load_archive(&a.archive)?;

    let folds = run_loso(&windows, &model, &train, jobs)?;
    let results: Vec<_> = folds.iter().map(|f| f.result.clone()).collect();
    let agg = aggregate_folds(&results)?;
    create_dir(&a.out)?;
    for f in &folds {
        checkpoint::save(&f.params, &checkpoint_path(&a.out, &f.result.held_out_subject))?;
    }
    let mut metrics = Vec::new();
    write_metrics(&mut metrics, &results, &agg)?;
    write(&a.out.join("metrics.jsonl"), metrics)?;
    eprintln!(
        "LOSO over {} subjects: mean accuracy {:.4} (sd {:.4})",
        agg.folds, agg.mean_accuracy, agg.sd_accuracy
    );
    Ok(())
}

fn cmd_personalize(a: PersonalizeArgs, jobs_flag: Option<usize>, cfg: &ConfigFile) -> CliResult<()> {
    let seed = require_seed(cfg.get("seed", a.seed)?)?;
    let d = FinetuneConfig::default();
    let ft = FinetuneConfig {
        schedule: cfg.get("schedule", a.schedule)?.map_or(d.schedule, |l| l.0),
        learning_rate: cfg.get_or("finetune_learning_rate", a.finetune_learning_rate, d.learning_rate)?,
        epochs: cfg.get_or("finetune_epochs", a.finetune_epochs, d.epochs)?,
        batch_size: cfg.get_or("finetune_batch_size", a.finetune_batch_size, d.batch_size)?,
        seed,
    };
    ft.validate()?;
    let jobs = jobs(jobs_flag, cfg)?;
    check_out_dir(&a.out)?;
    let windows = load_archive(&a.archive)?;
    let mut bases = Vec::new();
    for s in subjects_of(&windows) {
        let path = checkpoint_path(&a.checkpoints, &s);
        if !path.is_file() {
            return Err(Error::invalid(format!(
                "no base checkpoint for subject {s} at {}; run train-loso first",
                path.display()
            ))
            .into());
        }
        bases.push((s, checkpoint::load(&path)?));
    }
    let pairs: Vec<(&ModelParams, Vec<LabeledWindow>)> = bases
        .iter()
        .map(|(s, p)| (p, windows.iter().filter(|w| &w.subject_id == s).cloned().collect()))
        .collect();

    let curve = personalization_sweep(&pairs, &ft, jobs)?;
    create_dir(&a.out)?;
    write(&a.out.join("curve.tsv"), format_curve_tsv(&curve))?;
    write(&a.out.join("summary.tsv"), format_summary_tsv(&curve))?;
    for p in std::iter::once(&curve.base).chain(&curve.points) {
        eprintln!(
            "{:>3} s/class: {:.4} ± {:.4}",
            p.seconds_per_class, p.mean_accuracy, p.standard_error
        );
    }
    eprintln!("sufficient: {} s per class", curve.sufficient_seconds);
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let params = checkpoint::load(&a.checkpoint)?;
    let windows = load_archive(&a.archive)?;
    let refs: Vec<&LabeledWindow> = windows
        .iter()
        .filter(|w| a.subject.as_ref().is_none_or(|s| &w.subject_id == s))
        .collect();
    if refs.is_empty() {
        return Err(Error::invalid(match &a.subject {
            Some(s) => format!("archive has no windows of subject {s}"),
            None => "archive is empty".into(),
        })
        .into());
    }
    let eval = evaluate(&params, &refs)?;
    let report = serde_json::json!({
        "windows": refs.len(),
        "accuracy": eval.accuracy,
        "mean_loss": eval.mean_loss,
        "classes": AttentionClass::ALL.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "confusion": eval.confusion,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Serialization(e.to_string()))? + "\n";
    match &a.out {
        Some(path) => write(path, text)?,
        None => print!("{text}"),
    }
    eprintln!("{} windows: accuracy {:.4}, loss {:.4}", refs.len(), eval.accuracy, eval.mean_loss);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, cfg: &ConfigFile) -> CliResult<bool> {
    let seed = require_seed(cfg.get("seed", a.seed)?)?;
    let model = model_config(&cfg.get_or("model", a.model, "tiny".to_string())?)?;
    if let Some(b) = &a.inject_fault {
        if !BLOCKS.contains(&b.as_str()) {
            return Err(Failure::Usage(format!("--inject-fault expects one of {}", BLOCKS.join(", "))));
        }
    }
    let report = gradcheck(&GradcheckConfig {
        model,
        seed,
        flip_sign: a.inject_fault,
        ..GradcheckConfig::default()
    })?;
    let text = format_report(&report);
    match &a.out {
        Some(path) => write(path, &text)?,
        None => print!("{text}"),
    }
    if !report.passed() {
        eprintln!("gradient check failed in: {}", report.failed_blocks().join(", "));
    }
    Ok(report.passed())
}

fn cmd_plot(a: PlotArgs) -> CliResult<()> {
    if a.curve.is_none() && a.metrics.is_none() {
        return Err(Failure::Usage("plot needs --curve and/or --metrics".into()));
    }
    check_out_dir(&a.out)?;
    let mut charts = Vec::new();
    if let Some(path) = &a.curve {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = parse_curve_tsv(&text).map_err(|e| Error::Context {
            context: path.display().to_string(),
            source: Box::new(e),
        })?;
        let mut series: Vec<Series> = Vec::new();
        for (subject, seconds, _, acc) in &rows {
            let point = (*seconds as f64, *acc);
            match series.iter_mut().find(|s| &s.name == subject) {
                Some(s) => s.points.push(point),
                None => series.push(Series {
                    name: subject.clone(),
                    points: vec![point],
                    highlight: false,
                }),
            }
        }
        let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mean = xs
            .iter()
            .map(|&x| {
                let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().filter(|p| p.0 == x).map(|p| p.1)).collect();
                (x, ys.iter().sum::<f64>() / ys.len() as f64)
            })
            .collect();
        series.push(Series {
            name: "mean".into(),
            points: mean,
            highlight: true,
        });
        charts.push((
            "personalization.svg",
            line_chart("Accuracy after fine-tuning", "calibration seconds per class", "accuracy", &series),
        ));
    }
    if let Some(path) = &a.metrics {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let series: Vec<Series> = parse_metrics(&text)?
            .into_iter()
            .filter_map(|r| match r {
                MetricsRecord::Fold(f) => Some(Series {
                    name: f.held_out_subject,
                    points: f.epochs.iter().map(|e| (e.epoch as f64, e.val_accuracy)).collect(),
                    highlight: false,
                }),
                MetricsRecord::Aggregate(_) => None,
            })
            .collect();
        charts.push((
            "loso.svg",
            line_chart("Held-out subject accuracy", "epoch", "validation accuracy", &series),
        ));
    }
    create_dir(&a.out)?;
    for (name, svg) in charts {
        write(&a.out.join(name), svg)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<bool> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg)?,
        Command::Preprocess(a) => cmd_preprocess(a, &cfg)?,
        Command::TrainLoso(a) => cmd_train_loso(a, cli.jobs, &cfg)?,
        Command::Personalize(a) => cmd_personalize(a, cli.jobs, &cfg)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a, &cfg),
        Command::Plot(a) => cmd_plot(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
