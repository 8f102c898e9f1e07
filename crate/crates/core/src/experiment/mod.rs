//! Config-driven experiment runs and their on-disk reports.
//!
//! A run directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `metrics.csv` | one row per optimizer step, schema [`METRICS_SCHEMA`] |
//! | `evals.csv` | test-split evaluations, schema [`EVALS_SCHEMA`] |
//! | `frequency_budget.csv` | per-layer analytic bandwidth against Nyquist, schema [`BUDGET_SCHEMA`] |
//! | `resolution.csv` | rate-shift evaluations (resolution tasks), schema [`RESOLUTION_SCHEMA`] |
//! | `architecture.json` | found architecture |
//! | `series/<quantity>.csv` | `step,value` pairs per tracked quantity |
//! | `params.json` | trained parameters |
//! | `run.json` | config echo, final metrics and wall-clock |
//! | `summary.json` | written by [`emit_report`] |
//!
//! Every CSV carries its schema version in a leading `schema` column.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::io::write_atomic;
use crate::params::ParamStore;
use crate::rng::substream;
use crate::spectral::BudgetRow;
use crate::tasks::{
    cached, eval_resolution_shift, fit_field, train, Backbone, BackboneConfig, Dataset, EvalMetrics, FitConfig,
    KernelConfig, ShiftMetrics, StepRecord, TaskKind, TaskSpec, TrainConfig, SUPPORTED_FACTORS,
};
use crate::Precision;

pub use report::{emit_report, Criterion, Summary, SUMMARY_SCHEMA};

pub const METRICS_SCHEMA: &str = "ckconv.metrics.v1";
pub const EVALS_SCHEMA: &str = "ckconv.evals.v1";
pub const BUDGET_SCHEMA: &str = "ckconv.budget.v1";
pub const RESOLUTION_SCHEMA: &str = "ckconv.resolution.v1";

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "CKCONV_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

/// A complete experiment. `model` is required for sequence tasks and `field` for function fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, initialization and batching.
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: Option<BackboneConfig>,
    #[serde(default)]
    pub field: Option<KernelConfig>,
    pub train: TrainConfig,
    pub outputs: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
    /// Rates evaluated after training on resolution tasks.
    #[serde(default)]
    pub resolution_factors: Option<Vec<f64>>,
    /// Directory for cached datasets.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse JSON, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err!("at `{path}`: {}", e.inner())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.train.precision = precision;
        self
    }

    pub fn with_outputs(mut self, dir: PathBuf) -> Self {
        self.outputs = dir;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.outputs.as_os_str().is_empty() {
            return Err(config_err!("outputs must name a directory"));
        }
        if self.outputs.exists() && !self.outputs.is_dir() {
            return Err(config_err!("outputs {} exists and is not a directory", self.outputs.display()));
        }
        if let Some(c) = &self.cache {
            if c.exists() && !c.is_dir() {
                return Err(config_err!("cache {} exists and is not a directory", c.display()));
            }
        }
        if self.formats.is_empty() {
            return Err(config_err!("formats must list at least one of csv, json"));
        }
        match (self.task.kind, &self.model, &self.field) {
            (TaskKind::FunctionFit, _, None) => Err(config_err!("field is required for function_fit tasks")),
            (TaskKind::FunctionFit, Some(_), _) => Err(config_err!("model is not used by function_fit tasks; use field")),
            (TaskKind::FunctionFit, None, Some(_)) => Ok(()),
            (_, None, _) => Err(config_err!("model is required for sequence tasks")),
            (_, Some(_), Some(_)) => Err(config_err!("field is only used by function_fit tasks")),
            (kind, Some(m), None) => {
                m.validate()?;
                let expect = match kind {
                    TaskKind::CopyMemory => (crate::tasks::COPY_CLASSES, crate::tasks::COPY_CLASSES),
                    TaskKind::Adding => (2, 1),
                    _ => (1, 1),
                };
                if (m.in_channels, m.out_channels) != expect {
                    return Err(config_err!(
                        "model.in_channels/out_channels must be {}/{} for this task, got {}/{}",
                        expect.0,
                        expect.1,
                        m.in_channels,
                        m.out_channels
                    ));
                }
                if let Some(f) = &self.resolution_factors {
                    for &x in f {
                        if !SUPPORTED_FACTORS.contains(&x) {
                            return Err(config_err!("resolution_factors: unsupported factor {x}"));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn derived_seed(&self, stream: u64) -> u64 {
        substream(self.seed, u64::MAX - stream).next_u64()
    }

    fn seeded_task(&self) -> TaskSpec {
        TaskSpec { seed: self.seed, ..self.task.clone() }
    }

    fn seeded_train(&self) -> TrainConfig {
        TrainConfig { seed: self.derived_seed(1), ..self.train.clone() }
    }

    fn fit_config(&self, kc: &KernelConfig) -> FitConfig {
        let t = self.seeded_train();
        FitConfig {
            field: kc.field.clone(),
            layers: kc.layers,
            hidden: kc.hidden,
            weight_norm: kc.weight_norm,
            target: self.task.target.expect("validated"),
            points: self.task.length,
            steps: t.steps,
            optimizer: t.optimizer,
            lambda_alias: t.lambda_alias,
            alias_mode: t.alias_mode,
            mask: kc.mask.clone(),
            mask_lr_factor: t.mask_lr_factor,
            seed: self.seed,
            precision: t.precision,
        }
    }
}

/// What a run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: TaskKind,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub final_mse: Option<f64>,
    pub final_cost_ratio: Option<f64>,
    /// Fraction of steps whose cost ratio lay in `[0.8, 1.2]`.
    pub cost_ratio_in_band: Option<f64>,
    pub max_violation: Option<f64>,
    pub resolution: Vec<ShiftMetrics>,
    pub wall_clock_seconds: f64,
    pub config: ExperimentConfig,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    schema: &'a str,
    step: usize,
    loss: f64,
    task_loss: f64,
    alias_loss: f64,
    complexity_loss: f64,
    cost_ratio: Option<f64>,
    grad_norm: f64,
    lr: f64,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    schema: &'a str,
    step: usize,
    loss: f64,
    accuracy: Option<f64>,
    mse: Option<f64>,
}

#[derive(Serialize)]
struct BudgetCsvRow<'a> {
    schema: &'a str,
    block: usize,
    layer: &'a str,
    f_plus: f64,
    f_nyq: f64,
    violation: f64,
}

#[derive(Serialize)]
struct ResolutionRow<'a> {
    schema: &'a str,
    factor: f64,
    corrected: bool,
    mse: f64,
    layer: Option<usize>,
    rel_err: Option<f64>,
}

#[derive(Serialize)]
struct SeriesRow {
    step: usize,
    value: f64,
}

/// Serialize rows as LF-terminated CSV with a header; `header` is used when there are no rows.
pub(crate) fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).has_headers(true).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Metrics CSV exactly as written by [`run`].
pub fn metrics_csv(steps: &[StepRecord]) -> Result<Vec<u8>> {
    let rows: Vec<MetricsRow> = steps
        .iter()
        .map(|s| MetricsRow {
            schema: METRICS_SCHEMA,
            step: s.step,
            loss: s.loss,
            task_loss: s.task_loss,
            alias_loss: s.alias_loss,
            complexity_loss: s.complexity_loss,
            cost_ratio: s.cost_ratio,
            grad_norm: s.grad_norm,
            lr: s.lr,
        })
        .collect();
    csv_bytes(
        &rows,
        &["schema", "step", "loss", "task_loss", "alias_loss", "complexity_loss", "cost_ratio", "grad_norm", "lr"],
    )
}

fn budget_csv(rows: &[(usize, Vec<BudgetRow>)]) -> Result<Vec<u8>> {
    let flat: Vec<BudgetCsvRow> = rows
        .iter()
        .flat_map(|(b, rs)| {
            rs.iter().map(move |r| BudgetCsvRow {
                schema: BUDGET_SCHEMA,
                block: *b,
                layer: &r.layer,
                f_plus: r.f_plus,
                f_nyq: r.f_nyq,
                violation: r.violation,
            })
        })
        .collect();
    csv_bytes(&flat, &["schema", "block", "layer", "f_plus", "f_nyq", "violation"])
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_series(dir: &Path, steps: &[StepRecord]) -> Result<()> {
    type Get = fn(&StepRecord) -> Option<f64>;
    let quantities: [(&str, Get); 7] = [
        ("loss", |s| Some(s.loss)),
        ("task_loss", |s| Some(s.task_loss)),
        ("alias_loss", |s| Some(s.alias_loss)),
        ("complexity_loss", |s| Some(s.complexity_loss)),
        ("cost_ratio", |s| s.cost_ratio),
        ("grad_norm", |s| Some(s.grad_norm)),
        ("lr", |s| Some(s.lr)),
    ];
    for (name, get) in quantities {
        let rows: Vec<SeriesRow> = steps.iter().filter_map(|s| get(s).map(|value| SeriesRow { step: s.step, value })).collect();
        write_atomic(&dir.join("series").join(format!("{name}.csv")), &csv_bytes(&rows, &["step", "value"])?)?;
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, task: &TaskSpec) -> Result<(Dataset, Dataset)> {
    let Some(dir) = &cfg.cache else { return task.build() };
    let key = task.cache_key();
    let stem = format!("{:?}-{}-{}", task.kind, task.length, task.seed).to_lowercase();
    let tr = cached(&dir.join(format!("{stem}.train.bin")), task.seed, &key, || Ok(task.build()?.0))?;
    let te = cached(&dir.join(format!("{stem}.test.bin")), task.seed, &key, || Ok(task.build()?.1))?;
    Ok((tr, te))
}

/// Execute `cfg`, writing every report file into `cfg.outputs`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.outputs;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = cfg.formats.contains(&ReportFormat::Csv);
    let json = cfg.formats.contains(&ReportFormat::Json);

    let (steps, evals, final_eval, cost_ratio, budgets, arch, store, resolution) = match cfg.task.kind {
        TaskKind::FunctionFit => {
            let kc = cfg.field.as_ref().expect("validated");
            let r = fit_field(&cfg.fit_config(kc))?;
            let eval = EvalMetrics { step: r.steps.len(), loss: r.final_mse, accuracy: None, mse: Some(r.final_mse) };
            let budgets: Vec<(usize, Vec<BudgetRow>)> = r.budget.iter().map(|b| (0, b.rows())).collect();
            let arch = serde_json::json!({ "kernel_size": r.mask.as_ref().map_or(cfg.task.length as f64, |m| m.size_value(&r.store).min(cfg.task.length as f64)) });
            (r.steps, vec![eval.clone()], eval, None, budgets, arch, r.store, Vec::new())
        }
        _ => {
            let task = cfg.seeded_task();
            let (tr, te) = load_data(cfg, &task)?;
            let mut store = ParamStore::new();
            let model = Backbone::new(&mut store, cfg.model.clone().expect("validated"), task.seq_len(), cfg.derived_seed(2))?;
            let tc = cfg.seeded_train();
            let o = train(&model, &mut store, &tr, &te, &tc, |_| {})?;
            let budgets = model.frequency_budgets(&store)?.into_iter().map(|(l, b)| (l, b.rows())).collect();
            let arch = serde_json::to_value(model.snapshot(&store)).map_err(|e| Error::Format(e.to_string()))?;
            let mut res = Vec::new();
            if task.kind == TaskKind::ResolutionShift {
                let factors = cfg.resolution_factors.clone().unwrap_or_else(|| SUPPORTED_FACTORS.to_vec());
                for f in factors {
                    for correct in [true, false] {
                        res.push(eval_resolution_shift(&model, &store, &task, f, correct)?);
                    }
                }
            }
            (o.steps, o.evals, o.final_eval, o.final_cost_ratio, budgets, arch, store, res)
        }
    };

    let eval_rows: Vec<EvalRow> = evals
        .iter()
        .map(|e| EvalRow { schema: EVALS_SCHEMA, step: e.step, loss: e.loss, accuracy: e.accuracy, mse: e.mse })
        .collect();
    if csv {
        write_atomic(&out.join("metrics.csv"), &metrics_csv(&steps)?)?;
        write_atomic(&out.join("evals.csv"), &csv_bytes(&eval_rows, &["schema", "step", "loss", "accuracy", "mse"])?)?;
        write_atomic(&out.join("frequency_budget.csv"), &budget_csv(&budgets)?)?;
        write_series(out, &steps)?;
        if !resolution.is_empty() {
            let rows: Vec<ResolutionRow> = resolution
                .iter()
                .flat_map(|m| {
                    let head = ResolutionRow { schema: RESOLUTION_SCHEMA, factor: m.factor, corrected: m.corrected, mse: m.mse, layer: None, rel_err: None };
                    std::iter::once(head).chain(m.layers.iter().map(|l| ResolutionRow {
                        schema: RESOLUTION_SCHEMA,
                        factor: m.factor,
                        corrected: m.corrected,
                        mse: m.mse,
                        layer: Some(l.layer),
                        rel_err: Some(l.rel_err),
                    }))
                })
                .collect();
            write_atomic(&out.join("resolution.csv"), &csv_bytes(&rows, &["schema", "factor", "corrected", "mse", "layer", "rel_err"])?)?;
        }
    }
    if json {
        write_json(&out.join("metrics.json"), &serde_json::json!({ "schema": METRICS_SCHEMA, "steps": steps, "evals": evals }))?;
    }
    write_json(&out.join("architecture.json"), &arch)?;
    write_atomic(&out.join("params.json"), store.to_json().as_bytes())?;

    let ratios: Vec<f64> = steps.iter().filter_map(|s| s.cost_ratio).collect();
    let record = RunRecord {
        task: cfg.task.kind,
        seed: cfg.seed,
        steps: steps.len(),
        final_loss: final_eval.loss,
        final_accuracy: final_eval.accuracy,
        final_mse: final_eval.mse,
        final_cost_ratio: cost_ratio,
        cost_ratio_in_band: (!ratios.is_empty())
            .then(|| ratios.iter().filter(|r| (0.8..=1.2).contains(*r)).count() as f64 / ratios.len() as f64),
        max_violation: budgets.iter().flat_map(|(_, r)| r.iter().map(|r| r.violation)).reduce(f64::max),
        resolution,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    write_json(&out.join("run.json"), &record)?;
    Ok(record)
}

/// Evaluate a trained resolution-task model stored in `dir` (as written by [`run`]) at `factors`.
pub fn eval_resolution_dir(dir: &Path, factors: &[f64], correct: bool) -> Result<Vec<ShiftMetrics>> {
    let rec: RunRecord = read_json(&dir.join("run.json"))?;
    let cfg = rec.config;
    if cfg.task.kind != TaskKind::ResolutionShift {
        return Err(config_err!("{} holds a {:?} run, not a resolution_shift run", dir.display(), cfg.task.kind));
    }
    let task = cfg.seeded_task();
    let mut store = ParamStore::new();
    let model = Backbone::new(&mut store, cfg.model.clone().expect("validated"), task.seq_len(), cfg.derived_seed(2))?;
    let pp = dir.join("params.json");
    store.load(&pp)?;
    factors.iter().map(|&f| eval_resolution_shift(&model, &store, &task, f, correct)).collect()
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
