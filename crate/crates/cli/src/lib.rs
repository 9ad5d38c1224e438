//! The `cfn` command-line tool: synthetic data, co-occurrence tables,
//! gradient checks, training, evaluation and ablations.
//!
//! Every command reads an optional TOML run configuration, applies command
//! flags on top, writes the resolved configuration next to its outputs and
//! exits with 0 on success, 1 on internal or numeric failures and 2 on
//! input or configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use cfn_core::checks::{run_suite, CaseResult, GradCheckConfig};
use cfn_core::data::{load_dataset, save_dataset, synth_generate, Dataset, SynthConfig};
use cfn_core::metrics::{ers, evaluate, Convention, MetricsReport};
use cfn_core::model::{ablate, AblationConfig, AblationResult, ContextProvider, Model, Variant};
use cfn_core::stats::CooccurrenceStats;
use cfn_core::N_TARGETS;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Errors surfaced by the tool, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cfn_core::Error),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{} gradient check(s) failed", .0)]
    GradCheck(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) | CliError::GradCheck(_) => 1,
            CliError::Config { .. } | CliError::Usage(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Structured run configuration; every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset to read; commands that need data fall back to `synth`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides every seed below when set.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub run: AblationConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.run.split.seed = seed;
        self.run.model.init_seed = seed;
        self.run.train.seed = seed;
        self.gradcheck.seed = seed;
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "cfn", version, about = "Context-prior emotion fusion")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, splitting, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for ablations and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted structure.
    Synth(SynthArgs),
    /// Build co-occurrence tables from a dataset.
    Stats(StatsArgs),
    /// Check every gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Train one variant and save its checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint, a prediction file or a published triple.
    Eval(EvalArgs),
    /// Train and evaluate several variants on the same split.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub place_signal: Option<f64>,
    #[arg(long)]
    pub object_signal: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset JSONL; a synthetic set is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Attribute presence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Emotion presence threshold.
    #[arg(long)]
    pub threshold_emo: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Negate the gradient of the named case (negative control).
    #[arg(long)]
    pub inject_sign_flip: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Mixed,
    Uniform,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL file of 29-value prediction arrays aligned with the data.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Score a published (mR², mAP %, mRA %) triple and exit.
    #[arg(long, num_args = 3, value_names = ["R2", "MAP", "MRA"], allow_negative_numbers = true)]
    pub ers_only: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "mixed")]
    pub convention: ConventionArg,
    /// Dump the per-sample fusion trace.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated variants; all six by default.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolves the configuration and dispatches to the command.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed.or(config.seed) {
        config.apply_seed(seed);
    }
    if let Some(out) = cli.out {
        config.out = Some(out);
    }
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(config, a),
        Command::Stats(a) => cmd_stats(config, a),
        Command::Gradcheck(a) => cmd_gradcheck(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Eval(a) => cmd_eval(config, a, cli.jobs),
        Command::Ablate(a) => cmd_ablate(config, a, cli.jobs),
    }
}

fn prepare_out(config: &RunConfig) -> CliResult<PathBuf> {
    let dir = config.out_dir();
    fs::create_dir_all(&dir).map_err(|e| cfn_core::Error::io(&dir, e))?;
    let echo = toml::to_string(config).map_err(|e| CliError::Usage(format!("cannot echo config: {e}")))?;
    write(&dir.join("config.resolved.toml"), &echo)?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| cfn_core::Error::io(path, e).into())
}

fn dataset(config: &mut RunConfig, args: &DataArgs) -> CliResult<Dataset> {
    if let Some(path) = &args.data {
        config.data = Some(path.clone());
    }
    match &config.data {
        Some(path) => Ok(load_dataset(path)?),
        None => {
            log::info!("no dataset given; generating {} synthetic samples", config.synth.n);
            Ok(synth_generate(&config.synth)?.dataset)
        }
    }
}

pub fn cmd_synth(mut config: RunConfig, args: SynthArgs) -> CliResult<()> {
    let s = &mut config.synth;
    s.n = args.n.unwrap_or(s.n);
    s.noise = args.noise.unwrap_or(s.noise);
    s.place_signal = args.place_signal.unwrap_or(s.place_signal);
    s.object_signal = args.object_signal.unwrap_or(s.object_signal);
    let output = synth_generate(&config.synth)?;
    let dir = prepare_out(&config)?;
    save_dataset(&output.dataset, dir.join("dataset.jsonl"))?;
    let planted = serde_json::to_string_pretty(&output.planted).map_err(cfn_core::Error::from)?;
    write(&dir.join("planted.json"), &planted)?;
    println!("wrote {} samples to {}", output.dataset.len(), dir.display());
    Ok(())
}

pub fn cmd_stats(mut config: RunConfig, args: StatsArgs) -> CliResult<()> {
    if let Some(t) = args.threshold {
        config.run.stats.threshold_attr = t;
    }
    if let Some(t) = args.threshold_emo {
        config.run.stats.threshold_emo = t;
    }
    let ds = dataset(&mut config, &args.data)?;
    let stats = CooccurrenceStats::build(&ds, &config.run.stats)?;
    let dir = prepare_out(&config)?;
    stats.save_json(dir.join("stats.json"))?;
    write(&dir.join("p_plus.csv"), &stats.p_plus_csv())?;
    println!(
        "{} samples, {} attributes, threshold {}",
        stats.n,
        stats.n_attributes(),
        config.run.stats.threshold_attr
    );
    Ok(())
}

fn gradcheck_csv(results: &[CaseResult]) -> String {
    let mut out = String::from("case,points,max_rel_error,passed\n");
    for r in results {
        out += &format!("{},{},{:e},{}\n", r.name, r.points, r.max_rel_error, r.passed);
    }
    out
}

pub fn cmd_gradcheck(mut config: RunConfig, args: GradcheckArgs) -> CliResult<()> {
    let g = &mut config.gradcheck;
    g.points = args.points.unwrap_or(g.points);
    g.eps = args.eps.unwrap_or(g.eps);
    g.tolerance = args.tolerance.unwrap_or(g.tolerance);
    if args.inject_sign_flip.is_some() {
        g.inject_sign_flip = args.inject_sign_flip;
    }
    let results = run_suite(&config.gradcheck)?;
    let dir = prepare_out(&config)?;
    write(&dir.join("gradcheck.csv"), &gradcheck_csv(&results))?;
    for r in &results {
        println!(
            "{:<24} {:>4} points  max rel error {:.3e}  {}",
            r.name,
            r.points,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::GradCheck(failed));
    }
    Ok(())
}

fn write_result(dir: &Path, result: &AblationResult) -> CliResult<()> {
    result.model.save(dir.join("model.json"))?;
    write(&dir.join("history.csv"), &result.history.to_csv())?;
    write_report(dir, &result.report)?;
    save_dataset(&result.test, dir.join("test.jsonl"))?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> CliResult<()> {
    let json = serde_json::to_string_pretty(report).map_err(cfn_core::Error::from)?;
    write(&dir.join("metrics.json"), &json)?;
    write(
        &dir.join("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )?;
    write(&dir.join("per_class.csv"), &report.per_class_csv())
}

pub fn cmd_train(mut config: RunConfig, args: TrainArgs) -> CliResult<()> {
    if let Some(e) = args.max_epochs {
        config.run.train.max_epochs = e;
    }
    let ds = dataset(&mut config, &args.data)?;
    let result = ablate(args.variant, &ds, &config.run)?;
    let dir = prepare_out(&config)?;
    write_result(&dir, &result)?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", result.report.csv_row());
    Ok(())
}

/// Predictions over `dataset`, split across `jobs` threads.
pub fn predict_parallel(
    model: &Model,
    dataset: &Dataset,
    provider: &ContextProvider,
    jobs: usize,
) -> CliResult<Vec<[f64; N_TARGETS]>> {
    let n = dataset.len();
    let chunk = n.div_ceil(jobs.max(1)).max(1);
    let parts: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(chunk).map(<[usize]>::to_vec).collect();
    let results: Vec<cfn_core::Result<Vec<[f64; N_TARGETS]>>> = thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|idx| s.spawn(move || model.predict(&dataset.subset(idx)?, provider)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn read_predictions(path: &Path) -> CliResult<Vec<[f64; N_TARGETS]>> {
    let text = fs::read_to_string(path).map_err(|e| cfn_core::Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<[f64; N_TARGETS]>(line).map_err(|e| {
                cfn_core::Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

/// ERS of a triple given in published units (R² fraction, mAP and mRA in
/// percent).
pub fn ers_published(r2: f64, map_pct: f64, mra_pct: f64, convention: ConventionArg) -> CliResult<f64> {
    let value = match convention {
        ConventionArg::Mixed => ers(r2, map_pct, mra_pct)?,
        ConventionArg::Uniform => Convention::Uniform.ers_from_fractions(r2, map_pct / 100.0, mra_pct / 100.0)?,
    };
    Ok(value)
}

pub fn cmd_eval(mut config: RunConfig, args: EvalArgs, jobs: usize) -> CliResult<()> {
    if let Some(triple) = &args.ers_only {
        let value = ers_published(triple[0], triple[1], triple[2], args.convention)?;
        println!("{value:.2}");
        return Ok(());
    }
    let ds = dataset(&mut config, &args.data)?;
    let provider = ContextProvider::DatasetColumn;
    let (predictions, model) = match (&args.checkpoint, &args.predictions) {
        (Some(path), None) => {
            let model = Model::load(path)?;
            (predict_parallel(&model, &ds, &provider, jobs)?, Some(model))
        }
        (None, Some(path)) => (read_predictions(path)?, None),
        _ => {
            return Err(CliError::Usage(
                "eval needs one of --checkpoint, --predictions or --ers-only".into(),
            ))
        }
    };
    let report = evaluate(&predictions, ds.targets(), &config.run.eval)?;
    let dir = prepare_out(&config)?;
    write_report(&dir, &report)?;
    if args.trace {
        let model = model.ok_or_else(|| CliError::Usage("--trace needs --checkpoint".into()))?;
        let mut lines = String::new();
        for (sample, trace) in ds.samples().iter().zip(model.traces(&ds, &provider)?) {
            let row = serde_json::json!({ "id": sample.id, "trace": trace });
            lines += &row.to_string();
            lines.push('\n');
        }
        write(&dir.join("trace.jsonl"), &lines)?;
    }
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

pub fn cmd_ablate(mut config: RunConfig, args: AblateArgs, jobs: usize) -> CliResult<()> {
    if let Some(e) = args.max_epochs {
        config.run.train.max_epochs = e;
    }
    let variants = args.variants.unwrap_or_else(|| Variant::ALL.to_vec());
    let ds = dataset(&mut config, &args.data)?;
    let (ds, run) = (&ds, &config.run);
    let mut results: Vec<Option<cfn_core::Result<AblationResult>>> = (0..variants.len()).map(|_| None).collect();
    for (batch, slots) in variants.chunks(jobs.max(1)).zip(results.chunks_mut(jobs.max(1))) {
        thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|&v| s.spawn(move || ablate(v, ds, run))).collect();
            for (slot, h) in slots.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("ablation worker panicked"));
            }
        });
    }
    let dir = prepare_out(&config)?;
    let mut csv = format!("variant,{}\n", MetricsReport::CSV_HEADER);
    for (variant, result) in variants.iter().zip(results) {
        let result = result.expect("every variant ran")?;
        let sub = dir.join(variant.name());
        fs::create_dir_all(&sub).map_err(|e| cfn_core::Error::io(&sub, e))?;
        write_result(&sub, &result)?;
        csv += &format!("{variant},{}\n", result.report.csv_row());
    }
    write(&dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
