//! `ckconv`: run continuous-kernel convolution experiments from JSON configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use ckconv::experiment::{self, emit_report, ExperimentConfig, OUT_DIR_ENV};
use ckconv::fields::FieldVariant;
use ckconv::spectral::survey_magnets;
use ckconv::tasks::{FieldTarget, FlexMaskConfig, KernelConfig, TaskKind, TaskSpec, TrainConfig};
use ckconv::Precision;

#[derive(Parser)]
#[command(name = "ckconv", version, about = "Continuous kernel convolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment config and write its report.
    Run(Common),
    /// Train a sequence model (copy_memory, adding or resolution_shift).
    Train(Common),
    /// Fit a kernel field to a target function.
    FitField(FitArgs),
    /// Evaluate a trained resolution_shift run at other sampling rates.
    EvalResolution(EvalArgs),
    /// Compare analytic and measured bandwidth of random MAGNet fields.
    AnalyzeSpectrum(SpectrumArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    SineMlp,
    Magnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Gaussian,
    Step,
    Sawtooth,
    SineMixture,
    Noise,
}

impl From<TargetArg> for FieldTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Gaussian => FieldTarget::Gaussian,
            TargetArg::Step => FieldTarget::Step,
            TargetArg::Sawtooth => FieldTarget::Sawtooth,
            TargetArg::SineMixture => FieldTarget::SineMixture,
            TargetArg::Noise => FieldTarget::Noise,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Full config; the remaining flags build one when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, value_enum, default_value = "step")]
    target: TargetArg,
    #[arg(long, value_enum, default_value = "sine-mlp")]
    field: FieldArg,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_alias: f64,
    /// Multiply the field by a learnable Gaussian size mask.
    #[arg(long)]
    mask: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of a finished resolution_shift run.
    #[arg(long)]
    run: PathBuf,
    /// Rate factors; repeat the flag for several.
    #[arg(long = "factor", required = true)]
    factors: Vec<f64>,
    /// Skip the output rescale by the inverse factor.
    #[arg(long)]
    no_correct: bool,
    /// Where to write `resolution_eval.csv`; the run directory when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Dense samples per field.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Writes `spectrum.csv` here; prints to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] ckconv::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use ckconv::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::Format(_) | E::Io { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn out_dir(flag: Option<PathBuf>, configured: PathBuf) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or(configured)
}

fn apply(cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>, precision: Option<PrecisionArg>) -> ExperimentConfig {
    let outputs = out_dir(out, cfg.outputs.clone());
    let mut cfg = cfg.with_outputs(outputs);
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(p) = precision {
        cfg = cfg.with_precision(p.into());
    }
    cfg
}

fn execute(cfg: &ExperimentConfig) -> CliResult<()> {
    experiment::run(cfg)?;
    let s = emit_report(&cfg.outputs)?;
    for c in &s.criteria {
        println!("{}: {} ({})", c.name, if c.pass { "pass" } else { "fail" }, c.threshold);
    }
    println!("report written to {}", cfg.outputs.join("summary.json").display());
    Ok(())
}

fn run_common(c: Common, sequence_only: bool) -> CliResult<()> {
    let cfg = apply(ExperimentConfig::load(&c.config)?, c.seed, c.out, c.precision);
    if sequence_only && cfg.task.kind == TaskKind::FunctionFit {
        return Err(CliError::Usage("train expects a sequence task; use fit-field for function_fit".into()));
    }
    execute(&cfg)
}

fn fit(a: FitArgs) -> CliResult<()> {
    let cfg = match &a.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.task.kind != TaskKind::FunctionFit {
                return Err(CliError::Usage("fit-field expects a function_fit task".into()));
            }
            cfg
        }
        None => {
            let Some(out) = a.out.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)) else {
                return Err(CliError::Usage("fit-field needs --config or --out".into()));
            };
            let field = match a.field {
                FieldArg::SineMlp => FieldVariant::SineMlp { omega0: 30.0 },
                FieldArg::Magnet => FieldVariant::Magnet { alpha: 6.0, beta: 1.0 },
            };
            let mut kernel = KernelConfig::new(field);
            if a.mask {
                kernel.mask = Some(FlexMaskConfig { init_fraction: 1.0, threshold: 0.1, mu: Some(0.0), learn_mu: false });
            }
            let mut train = TrainConfig::new(a.steps, 0);
            train.optimizer.lr = a.lr;
            train.lambda_alias = a.lambda_alias;
            train.mask_lr_factor = 1.0;
            ExperimentConfig {
                seed: a.seed.unwrap_or(0),
                task: TaskSpec {
                    kind: TaskKind::FunctionFit,
                    length: a.points,
                    samples: 1,
                    test_samples: 1,
                    seed: 0,
                    target: Some(a.target.into()),
                    resolution: None,
                },
                model: None,
                field: Some(kernel),
                train,
                outputs: out,
                formats: vec![experiment::ReportFormat::Csv, experiment::ReportFormat::Json],
                resolution_factors: None,
                cache: None,
            }
        }
    };
    execute(&apply(cfg, a.seed, a.out, a.precision))
}

#[derive(Serialize)]
struct EvalRow {
    factor: f64,
    corrected: bool,
    mse: f64,
    max_layer_rel_err: Option<f64>,
}

fn write_csv<T: Serialize>(rows: &[T], path: Option<&Path>) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Core(ckconv::Error::Format(e.to_string())))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Core(ckconv::Error::Format(e.to_string())))?;
    match path {
        Some(p) => {
            ckconv::io::write_atomic(p, &bytes)?;
            println!("wrote {}", p.display());
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn eval_resolution(a: EvalArgs) -> CliResult<()> {
    let metrics = experiment::eval_resolution_dir(&a.run, &a.factors, !a.no_correct)?;
    let rows: Vec<EvalRow> = metrics
        .iter()
        .map(|m| EvalRow {
            factor: m.factor,
            corrected: m.corrected,
            mse: m.mse,
            max_layer_rel_err: m.layers.iter().map(|l| l.rel_err).reduce(f64::max),
        })
        .collect();
    let dir = out_dir(a.out, a.run);
    write_csv(&rows, Some(&dir.join("resolution_eval.csv")))
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    f_plus: f64,
    dominant: f64,
    tail_above_f_plus: f64,
}

fn analyze_spectrum(a: SpectrumArgs) -> CliResult<()> {
    if a.count == 0 || a.samples < 8 {
        return Err(CliError::Usage("analyze-spectrum needs --count ≥ 1 and --samples ≥ 8".into()));
    }
    let rows: Vec<SpectrumRow> = survey_magnets(a.count, a.seed, a.layers, a.hidden, a.samples)?
        .into_iter()
        .enumerate()
        .map(|(index, c)| SpectrumRow { index, f_plus: c.f_plus, dominant: c.dominant, tail_above_f_plus: c.tail })
        .collect();
    let path = a.out.map(|d| d.join("spectrum.csv"));
    write_csv(&rows, path.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => run_common(c, false),
        Command::Train(c) => run_common(c, true),
        Command::FitField(a) => fit(a),
        Command::EvalResolution(a) => eval_resolution(a),
        Command::AnalyzeSpectrum(a) => analyze_spectrum(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
