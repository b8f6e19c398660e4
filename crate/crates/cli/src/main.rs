mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ptvseg::cvharness::{assign_folds, evaluate_patient, run_cross_validation, run_rotation, CvOptions};
use ptvseg::dataprep::{load_dataset, write_dataset, write_prepared, PatientRecord};
use ptvseg::phantom::generate_dataset;
use ptvseg::report::{
    aggregate, read_metrics_csv, render_boxplot_svg, write_metrics_csv, write_summary_csv, Metric, MetricRow,
};
use ptvseg::tensor::Padding;
use ptvseg::unet::load_checkpoint;
use ptvseg::LossKind;

use config::RunConfig;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, bad flag value)
  3  invalid configuration (bad config file, missing seed, out-of-range value)
  4  missing input (manifest, checkpoint or metrics CSV not found)
  5  run failure (malformed data, training or evaluation error)
  6  cross-validation finished but some rotations failed

On failure the last stderr line is machine-readable:
  ptvseg-error code=<n> kind=<kind> message=\"<text>\"

The output root defaults to $PTVSEG_OUT, then ./ptvseg-out.";

#[derive(Parser)]
#[command(name = "ptvseg", version, about = "U-Net segmentation of planning target volumes", after_help = EXIT_CODES)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CT phantom dataset and its manifest.
    Phantom(PhantomArgs),
    /// Window images and rasterize contours into a model-ready dataset.
    Prep(PrepArgs),
    /// Train and evaluate a single cross-validation rotation.
    Train(TrainArgs),
    /// Run the full k-fold cross-validation protocol.
    Cv(CvArgs),
    /// Score a checkpoint against every patient in a manifest.
    Eval(EvalArgs),
    /// Aggregate metrics CSVs into summary statistics and boxplot SVGs.
    Report(ReportArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of patients.
    #[arg(long)]
    patients: Option<usize>,
    /// Slice width and height in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    min_slices: Option<usize>,
    #[arg(long)]
    max_slices: Option<usize>,
    /// Standard deviation of the HU noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct ManifestArg {
    /// Dataset manifest (JSON).
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct PrepArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_parser = ["same", "valid"])]
    padding: Option<String>,
}

#[derive(Args)]
struct TrainFlags {
    /// Seed for weight init and shuffling; required here or in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["bcel", "dice"])]
    loss: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Probability threshold for the binary prediction.
    #[arg(long)]
    threshold: Option<f64>,
    /// Number of folds.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Rotation to run; its test fold is the rotation index.
    #[arg(long, default_value_t = 0)]
    rotation: usize,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Rotations trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    manifest: ManifestArg,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    threshold: Option<f64>,
    /// Value written to the fold column.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-patient metrics CSVs, one per compared configuration.
    #[arg(required = true, value_name = "CSV")]
    inputs: Vec<PathBuf>,
    /// Label for each input, in order; defaults to the file or directory name.
    #[arg(long)]
    label: Vec<String>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    MissingInput(PathBuf),
    Run(anyhow::Error),
    Partial(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Run(_) => 5,
            CliError::Partial(_) => 6,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Run(_) => "run_failure",
            CliError::Partial(_) => "partial_failure",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) | CliError::Partial(m) => m.clone(),
            CliError::MissingInput(p) => format!("{} not found", p.display()),
            CliError::Run(e) => format!("{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn error_line(code: u8, kind: &str, message: &str) {
    eprintln!("ptvseg-error code={code} kind={kind} message={message:?}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            error_line(2, "usage", e.kind().as_str().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.code(), e.kind(), &e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let loaded = config::load(cli.config.as_deref()).map_err(|m| match cli.config.as_ref() {
        Some(p) if !p.exists() => CliError::MissingInput(p.clone()),
        _ => CliError::Config(m),
    })?;
    let mut cfg = loaded.config;
    match cli.command {
        Command::Phantom(a) => cmd_phantom(cfg, a),
        Command::Prep(a) => {
            apply_common(&mut cfg, a.manifest, a.out);
            cmd_prep(cfg)
        }
        Command::Train(a) => {
            apply_common(&mut cfg, a.manifest, a.out);
            apply_training(&mut cfg, a.model, a.train, loaded.train_seed_set)?;
            cmd_train(cfg, a.rotation)
        }
        Command::Cv(a) => {
            apply_common(&mut cfg, a.manifest, a.out);
            apply_training(&mut cfg, a.model, a.train, loaded.train_seed_set)?;
            if let Some(j) = a.jobs {
                cfg.eval.jobs = j;
            }
            cmd_cv(cfg)
        }
        Command::Eval(a) => {
            apply_common(&mut cfg, a.manifest, a.out);
            if let Some(t) = a.threshold {
                cfg.eval.threshold = t;
            }
            cmd_eval(cfg, &a.checkpoint, a.fold)
        }
        Command::Report(a) => {
            if let Some(o) = a.out.out {
                cfg.out = Some(o);
            }
            cmd_report(cfg, &a.inputs, &a.label)
        }
    }
}

fn apply_common(cfg: &mut RunConfig, manifest: ManifestArg, out: OutArg) {
    if let Some(m) = manifest.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(o) = out.out {
        cfg.out = Some(o);
    }
}

fn apply_training(cfg: &mut RunConfig, model: ModelFlags, train: TrainFlags, seed_in_file: bool) -> CliResult {
    let m = &mut cfg.model;
    m.base_channels = model.base_channels.unwrap_or(m.base_channels);
    m.depth = model.depth.unwrap_or(m.depth);
    if let Some(p) = model.padding {
        m.padding = if p == "valid" { Padding::Valid } else { Padding::Same };
    }
    if train.seed.is_none() && !seed_in_file {
        return Err(CliError::Config(
            "a training seed is required (--seed or [train] seed)".into(),
        ));
    }
    let t = &mut cfg.train;
    t.seed = train.seed.unwrap_or(t.seed);
    if let Some(l) = train.loss {
        t.loss = l.parse::<LossKind>().map_err(CliError::Config)?;
    }
    t.batch_size = train.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = train.lr.unwrap_or(t.learning_rate);
    t.patience = train.patience.unwrap_or(t.patience);
    t.max_epochs = train.max_epochs.unwrap_or(t.max_epochs);
    cfg.eval.threshold = train.threshold.unwrap_or(cfg.eval.threshold);
    cfg.eval.folds = train.folds.unwrap_or(cfg.eval.folds);
    Ok(())
}

fn print_effective(command: &str, cfg: &RunConfig, sections: &[&str]) {
    println!("# ptvseg {command}: effective configuration");
    print!("{}", cfg.render(sections));
    println!("# end configuration");
}

fn require_manifest(cfg: &RunConfig) -> CliResult<PathBuf> {
    let m = cfg
        .manifest
        .clone()
        .ok_or_else(|| CliError::Config("no manifest given (--manifest or `manifest` in the config file)".into()))?;
    if !m.is_file() {
        return Err(CliError::MissingInput(m));
    }
    Ok(m)
}

fn create_out(out: &Path) -> CliResult {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(CliError::Run)
}

fn validate_eval(cfg: &RunConfig) -> CliResult {
    let e = &cfg.eval;
    if !(e.threshold > 0.0 && e.threshold < 1.0) {
        return Err(CliError::Config(format!(
            "threshold must lie in (0, 1), got {}",
            e.threshold
        )));
    }
    if e.jobs == 0 {
        return Err(CliError::Config("jobs must be at least 1".into()));
    }
    Ok(())
}

fn validate_training(cfg: &RunConfig) -> CliResult {
    cfg.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    validate_eval(cfg)
}

fn load_records(manifest: &Path) -> CliResult<Vec<PatientRecord>> {
    load_dataset(manifest)
        .with_context(|| format!("loading {}", manifest.display()))
        .map_err(CliError::Run)
}

fn cmd_phantom(mut cfg: RunConfig, a: PhantomArgs) -> CliResult {
    if let Some(o) = a.out.out {
        cfg.out = Some(o);
    }
    let p = &mut cfg.phantom;
    p.seed = a.seed.unwrap_or(p.seed);
    p.n_patients = a.patients.unwrap_or(p.n_patients);
    p.size = a.size.unwrap_or(p.size);
    p.min_slices = a.min_slices.unwrap_or(p.min_slices);
    p.max_slices = a.max_slices.unwrap_or(p.max_slices);
    p.noise_hu = a.noise.unwrap_or(p.noise_hu);
    let out = cfg.resolve_out();
    cfg.phantom.validate().map_err(|e| CliError::Config(e.to_string()))?;
    print_effective("phantom", &cfg, &["out", "phantom"]);
    create_out(&out)?;
    let records = generate_dataset(&cfg.phantom).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = write_dataset(&records, &out).context("writing dataset")?;
    println!("wrote {} patients to {}", records.len(), manifest.display());
    Ok(())
}

fn cmd_prep(mut cfg: RunConfig) -> CliResult {
    let manifest = require_manifest(&cfg)?;
    let out = cfg.resolve_out();
    print_effective("prep", &cfg, &["manifest", "out"]);
    let records = load_records(&manifest)?;
    create_out(&out)?;
    let prepared = write_prepared(&records, &out).context("writing prepared dataset")?;
    println!("wrote {} patients to {}", records.len(), prepared.display());
    Ok(())
}

fn mean_dsc(rows: &[MetricRow]) -> f64 {
    rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len().max(1) as f64
}

fn cmd_train(mut cfg: RunConfig, rotation: usize) -> CliResult {
    let manifest = require_manifest(&cfg)?;
    let out = cfg.resolve_out();
    validate_training(&cfg)?;
    if rotation >= cfg.eval.folds {
        return Err(CliError::Config(format!(
            "rotation {rotation} out of range for {} folds",
            cfg.eval.folds
        )));
    }
    print_effective("train", &cfg, &["manifest", "out", "model", "train", "eval"]);
    let records = load_records(&manifest)?;
    let plan = assign_folds(&records, cfg.eval.folds).map_err(|e| CliError::Config(e.to_string()))?;
    create_out(&out)?;
    let opts = cv_options(&cfg, &out);
    let res = run_rotation(&records, &plan, rotation, cfg.model, &cfg.train, &opts).context("training")?;
    println!(
        "rotation {rotation}: best epoch {} of {}, val loss {:.6}, mean test DSC {:.4} over {} patients",
        res.outcome.best_epoch,
        res.outcome.history.len(),
        res.outcome.best_val_loss,
        mean_dsc(&res.rows),
        res.rows.len()
    );
    Ok(())
}

fn cv_options(cfg: &RunConfig, out: &Path) -> CvOptions {
    CvOptions {
        threshold: cfg.eval.threshold,
        jobs: cfg.eval.jobs,
        metrics: cfg.eval.metrics,
        out_dir: Some(out.to_path_buf()),
    }
}

fn cmd_cv(mut cfg: RunConfig) -> CliResult {
    let manifest = require_manifest(&cfg)?;
    let out = cfg.resolve_out();
    validate_training(&cfg)?;
    print_effective("cv", &cfg, &["manifest", "out", "model", "train", "eval"]);
    let records = load_records(&manifest)?;
    let plan = assign_folds(&records, cfg.eval.folds).map_err(|e| CliError::Config(e.to_string()))?;
    create_out(&out)?;
    let run = run_cross_validation(&records, &plan, cfg.model, &cfg.train, &cv_options(&cfg, &out))
        .context("cross-validation")?;
    let rows = run.rows();
    println!(
        "{} rotations, {} patients scored, mean test DSC {:.4}",
        run.rotations.len(),
        rows.len(),
        mean_dsc(&rows)
    );
    let failures = run.failures();
    if !failures.is_empty() {
        let list: Vec<String> = failures.iter().map(|(r, e)| format!("rotation {r}: {e}")).collect();
        return Err(CliError::Partial(list.join("; ")));
    }
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, checkpoint: &Path, fold: usize) -> CliResult {
    let manifest = require_manifest(&cfg)?;
    if !checkpoint.is_file() {
        return Err(CliError::MissingInput(checkpoint.to_path_buf()));
    }
    let out = cfg.resolve_out();
    validate_eval(&cfg)?;
    print_effective("eval", &cfg, &["manifest", "out", "eval"]);
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let records = load_records(&manifest)?;
    let rows = records
        .iter()
        .map(|p| evaluate_patient(&model, p, fold, cfg.eval.threshold, cfg.eval.metrics))
        .collect::<Result<Vec<_>, _>>()
        .context("evaluating")?;
    create_out(&out)?;
    let path = out.join("metrics.csv");
    write_metrics_csv(&rows, &path).context("writing metrics")?;
    println!(
        "{} patients, mean DSC {:.4}, wrote {}",
        rows.len(),
        mean_dsc(&rows),
        path.display()
    );
    Ok(())
}

/// `runs/bcel/metrics.csv` is labelled `bcel`; `dice.csv` is labelled `dice`.
fn default_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn cmd_report(mut cfg: RunConfig, inputs: &[PathBuf], labels: &[String]) -> CliResult {
    if !labels.is_empty() && labels.len() != inputs.len() {
        return Err(CliError::Config(format!(
            "{} labels given for {} inputs",
            labels.len(),
            inputs.len()
        )));
    }
    if let Some(missing) = inputs.iter().find(|p| !p.is_file()) {
        return Err(CliError::MissingInput(missing.clone()));
    }
    let out = cfg.resolve_out();
    print_effective("report", &cfg, &["out"]);
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, path) in inputs.iter().enumerate() {
        let label = labels.get(i).cloned().unwrap_or_else(|| default_label(path));
        let rows = read_metrics_csv(path).with_context(|| format!("reading {}", path.display()))?;
        let rep = aggregate(&label, &rows).with_context(|| format!("aggregating {}", path.display()))?;
        let line = |name: &str, s: Option<&ptvseg::report::Summary>| match s {
            Some(s) => format!("{name} mean {:.6} std {:.6} n {}", s.mean, s.std, s.n),
            None => format!("{name} undefined"),
        };
        println!(
            "{label}: {}; {}",
            line("DSC", rep.summary(Metric::Dsc)),
            line("HD95", rep.summary(Metric::Hd95))
        );
        reports.push(rep);
    }
    create_out(&out)?;
    write_summary_csv(&reports, &out.join("summary.csv")).context("writing summary")?;
    for (metric, name) in [(Metric::Dsc, "boxplot_dsc.svg"), (Metric::Hd95, "boxplot_hd95.svg")] {
        let svg = render_boxplot_svg(&reports, metric).context("rendering boxplot")?;
        let path = out.join(name);
        std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "wrote summary.csv, boxplot_dsc.svg and boxplot_hd95.svg to {}",
        out.display()
    );
    Ok(())
}
