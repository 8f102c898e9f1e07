use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tasks::TaskKind;

use super::{read_json, ReportFormat, RunRecord, BUDGET_SCHEMA, EVALS_SCHEMA, METRICS_SCHEMA};

pub const SUMMARY_SCHEMA: &str = "ckconv.summary.v1";

/// One success flag of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub threshold: String,
    pub value: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub task: TaskKind,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub final_mse: Option<f64>,
    pub final_cost_ratio: Option<f64>,
    pub criteria: Vec<Criterion>,
    pub all_pass: bool,
    pub wall_clock_seconds: f64,
}

fn flag(name: &str, threshold: &str, value: Option<f64>, pass: bool) -> Criterion {
    Criterion { name: name.into(), threshold: threshold.into(), value, pass }
}

fn criteria(r: &RunRecord) -> Vec<Criterion> {
    let mut out = Vec::new();
    match r.task {
        TaskKind::CopyMemory => {
            let acc = r.final_accuracy.unwrap_or(0.0);
            out.push(flag(
                "copy_memory_solved",
                "accuracy = 1 or loss <= 1e-4",
                Some(r.final_loss),
                acc >= 1.0 || r.final_loss <= 1e-4,
            ));
        }
        TaskKind::Adding | TaskKind::FunctionFit => {
            let mse = r.final_mse.unwrap_or(f64::INFINITY);
            out.push(flag("mse", "mse < 1e-3", Some(mse), mse < 1e-3));
        }
        TaskKind::ResolutionShift => {
            let worst = r
                .resolution
                .iter()
                .filter(|m| m.factor == 0.5 && m.corrected)
                .flat_map(|m| m.layers.iter().map(|l| l.rel_err))
                .reduce(f64::max);
            if let Some(w) = worst {
                out.push(flag("half_rate_layer_scaling", "max relative error <= 0.05", Some(w), w <= 0.05));
            }
        }
    }
    if let Some(v) = r.max_violation {
        out.push(flag("frequency_budget", "f_plus <= f_nyq + 0.05 on every layer", Some(v), v <= 0.05));
    }
    if let (Some(band), Some(fin)) = (r.cost_ratio_in_band, r.final_cost_ratio) {
        out.push(flag("cost_ratio_in_band", "ratio in [0.8, 1.2] on >= 90% of steps", Some(band), band >= 0.9));
        out.push(flag("final_cost_ratio", "|ratio - 1| <= 0.05", Some(fin), (fin - 1.0).abs() <= 0.05));
    }
    out
}

fn expected_files(formats: &[ReportFormat]) -> Vec<&'static str> {
    let mut v = vec!["architecture.json", "params.json", "run.json"];
    if formats.contains(&ReportFormat::Csv) {
        v.extend(["evals.csv", "frequency_budget.csv", "metrics.csv"]);
    }
    if formats.contains(&ReportFormat::Json) {
        v.push("metrics.json");
    }
    v.sort_unstable();
    v
}

fn check_schema(dir: &Path, file: &str, schema: &str) -> Result<()> {
    let path = dir.join(file);
    let mut rd = csv::Reader::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let head = rd.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
    if head.get(0) != Some("schema") {
        return Err(Error::Format(format!("{}: first column must be `schema`", path.display())));
    }
    if let Some(row) = rd.records().next() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if row.get(0) != Some(schema) {
            return Err(Error::Format(format!(
                "{}: schema {:?} does not match {schema}",
                path.display(),
                row.get(0).unwrap_or("")
            )));
        }
    }
    Ok(())
}

/// Consolidate the run in `dir` into `summary.json`.
pub fn emit_report(dir: &Path) -> Result<Summary> {
    let run_path = dir.join("run.json");
    let formats = if run_path.is_file() {
        read_json::<RunRecord>(&run_path)?.config.formats
    } else {
        vec![ReportFormat::Csv, ReportFormat::Json]
    };
    let missing: Vec<&str> = expected_files(&formats).into_iter().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("{} is missing {}", dir.display(), missing.join(", "))));
    }
    let r: RunRecord = read_json(&run_path)?;
    if formats.contains(&ReportFormat::Csv) {
        check_schema(dir, "metrics.csv", METRICS_SCHEMA)?;
        check_schema(dir, "evals.csv", EVALS_SCHEMA)?;
        check_schema(dir, "frequency_budget.csv", BUDGET_SCHEMA)?;
    }
    let crit = criteria(&r);
    let summary = Summary {
        schema: SUMMARY_SCHEMA.into(),
        task: r.task,
        seed: r.seed,
        steps: r.steps,
        final_loss: r.final_loss,
        final_accuracy: r.final_accuracy,
        final_mse: r.final_mse,
        final_cost_ratio: r.final_cost_ratio,
        all_pass: crit.iter().all(|c| c.pass),
        criteria: crit,
        wall_clock_seconds: r.wall_clock_seconds,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(&dir.join("summary.json"), text.as_bytes())?;
    Ok(summary)
}
