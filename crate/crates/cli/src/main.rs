//! `emodist` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data validation,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emodist::gradcheck::{run_suite, GradCheckConfig};
use emodist::io::{self, load_corpus, manifest_path, read_targets, targets_by_id, write_targets, FeaturesFormat};
use emodist::kde::{BandwidthMode, KdeConfig};
use emodist::labels::{make_targets, Target, UpsampleConfig};
use emodist::model::{ModelKind, Parameters};
use emodist::synth::{write_synth, SynthConfig};
use emodist::trainer::{evaluate, evaluate_distributions, train, EvalConfig, EvalMode, TaskMode, TrainConfig};
use emodist::Error;

#[derive(Parser)]
#[command(name = "emodist", version, about = "Annotator-aware emotion distribution modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Build the binned target distribution cache.
    Labels(LabelsArgs),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Score checkpoints or precomputed distributions.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 700)]
    utterances: usize,
    #[arg(long, default_value_t = 40)]
    annotators: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    features_format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 512)]
    grid: usize,
    #[arg(long, default_value_t = 4)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Target cache; required unless the task is 1.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long, value_parser = parse_task)]
    task: TaskMode,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Cap on training epochs; the minimum is lowered to match.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    /// Directory of `*.ckpt` files, one per seed.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    ckpt: Option<PathBuf>,
    /// Score a distribution cache instead of checkpoints.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: EvalMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the predicted distributions as a target-format CSV.
    #[arg(long)]
    dump_distributions: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn ensure_dir(dir: &Path) -> emodist::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> emodist::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn run_synth(a: &SynthArgs) -> emodist::Result<()> {
    let synth = SynthConfig::new(a.utterances, a.annotators, a.feature_dim, a.seed).generate()?;
    ensure_dir(&a.out)?;
    let format = match a.features_format {
        FormatArg::Csv => FeaturesFormat::Csv,
        FormatArg::Bin => FeaturesFormat::Bin,
    };
    let manifest = write_synth(&a.out, &synth, format)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_labels(a: &LabelsArgs) -> emodist::Result<()> {
    let corpus = load_corpus(&manifest_path(&a.corpus))?;
    let up = UpsampleConfig::new(a.k, a.seed)?;
    let kde = KdeConfig::new(a.grid, BandwidthMode::Automatic)?;
    let targets = make_targets(corpus.utterances(), &up, &kde, a.bins)?;
    ensure_parent(&a.out)?;
    write_targets(&a.out, &targets)?;
    println!("wrote {} targets to {}", targets.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> emodist::Result<()> {
    let corpus = load_corpus(&manifest_path(&a.corpus))?;
    let targets = match &a.targets {
        Some(p) => Some(targets_by_id(read_targets(p)?)?),
        None if a.task == TaskMode::Task1 => None,
        None => return Err(Error::config(format!("task {} needs --targets", a.task))),
    };
    let mut config = TrainConfig {
        task_mode: a.task,
        seeds: (0..a.seeds).collect(),
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        config.max_epochs = e;
        config.min_epochs = config.min_epochs.min(e);
    }
    ensure_dir(&a.out)?;
    for &seed in &config.seeds {
        let r = train(&corpus, targets.as_ref(), a.model, &config, seed)?;
        r.params.save(&a.out.join(format!("seed{seed}.ckpt")))?;
        r.history.write_csv(&a.out.join(format!("history_seed{seed}.csv")))?;
        let best = &r.history.epochs[r.history.best_epoch - 1];
        println!(
            "seed {seed}: {} epochs, best epoch {} (validation {:.6})",
            r.history.epochs.len(),
            r.history.best_epoch,
            best.val_total
        );
    }
    Ok(())
}

fn load_checkpoints(dir: &Path) -> emodist::Result<Vec<Parameters>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no .ckpt files in {}", dir.display())));
    }
    let mut models: Vec<Parameters> = paths
        .iter()
        .map(|p| Parameters::load(p))
        .collect::<emodist::Result<_>>()?;
    models.sort_by_key(|m| m.seed);
    Ok(models)
}

fn run_eval(a: &EvalArgs) -> emodist::Result<()> {
    let corpus = load_corpus(&manifest_path(&a.corpus))?;
    let targets = targets_by_id(read_targets(&a.targets)?)?;
    let config = EvalConfig {
        seed: a.seed,
        ..EvalConfig::for_mode(a.mode)
    };
    let out = match (&a.ckpt, &a.predictions) {
        (Some(dir), None) => evaluate(&load_checkpoints(dir)?, &corpus, &targets, a.mode, &config)?,
        (None, Some(p)) => {
            let preds = targets_by_id(read_targets(p)?)?;
            evaluate_distributions(&preds, &corpus, &targets, a.mode, &config)?
        }
        _ => return Err(Error::config("pass exactly one of --ckpt and --predictions")),
    };
    ensure_parent(&a.out)?;
    io::write_atomic(&a.out, out.report.to_json().as_bytes())?;
    if let Some(path) = &a.dump_distributions {
        let rows: Vec<Target> = out
            .distributions
            .iter()
            .flat_map(|(seed, ds)| {
                ds.iter().map(|(id, d)| Target {
                    utterance_id: id.clone(),
                    seed: *seed,
                    distribution: d.clone(),
                })
            })
            .collect();
        ensure_parent(path)?;
        write_targets(path, &rows)?;
    }
    println!("{}", out.report.table_row());
    Ok(())
}

fn run_gradcheck() -> emodist::Result<()> {
    let checks = run_suite(&GradCheckConfig::default())?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<55} {:>5} entries  max rel error {:.3e}",
            c.name, c.n_checked, c.max_rel_error
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_data_validation() {
        2
    } else if e.is_numerical() || matches!(e, Error::Shape { .. }) {
        3
    } else {
        1
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("EMODIST_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("EMODIST_THREADS must be a positive integer, got '{v}'"))?;
    if n == 0 {
        return Err("EMODIST_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Labels(a) => run_labels(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck => run_gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
