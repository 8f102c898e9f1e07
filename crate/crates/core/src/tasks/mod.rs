//! Desk-scale experiments: synthetic datasets, residual backbones, training and
//! resolution-shift evaluation.

mod backbone;
mod data;
mod fit;
mod optim;
mod resolution;
mod train;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use backbone::{
    Backbone, BackboneConfig, Block, BlockActivation, Deployment, EndActivation, FlexMaskConfig, KernelConfig,
    NormKind, Pointwise, Readout, Trace,
};
pub use data::{
    cached, load_dataset, make_adding, make_adding_range, make_copy_memory, make_copy_memory_range,
    make_field_targets, save_dataset, select_rows, CacheHeader, Dataset, FieldTarget, ResolutionTask, TargetLayout,
    TaskKind, COPY_CLASSES, TEST_STREAM_OFFSET,
};
pub use fit::{fit_field, sampled_kernel_values, spectrum_tail_above, FitConfig, FitResult};
pub use optim::{Adam, AdamConfig, Schedule};
pub use resolution::{eval_resolution_shift, layer_scaling_errors, LayerScaling, ShiftMetrics, SUPPORTED_FACTORS};
pub use train::{evaluate, train, EvalMetrics, StepRecord, TrainConfig, TrainOutcome};

/// Which dataset to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// `T`: memory horizon, sequence length, field points or duration in samples.
    pub length: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target: Option<FieldTarget>,
    #[serde(default)]
    pub resolution: Option<ResolutionTask>,
}

fn default_samples() -> usize {
    10_000
}
fn default_test_samples() -> usize {
    1000
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::FunctionFit if self.target.is_none() => {
                Err(config_err!("task.target is required for function_fit"))
            }
            TaskKind::FunctionFit if self.length < 8 => Err(config_err!("task.length must be ≥ 8 for function_fit")),
            TaskKind::CopyMemory if self.length < 1 => Err(config_err!("task.length must be ≥ 1")),
            TaskKind::Adding if self.length < 2 => Err(config_err!("task.length must be ≥ 2 for adding")),
            _ if self.kind != TaskKind::FunctionFit && (self.samples == 0 || self.test_samples == 0) => {
                Err(config_err!("task.samples and task.test_samples must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn resolution_task(&self) -> ResolutionTask {
        let base = self.resolution.unwrap_or_default();
        ResolutionTask { duration: self.length as f64 / base.sample_rate, ..base }
    }

    /// Input length seen by a model.
    pub fn seq_len(&self) -> usize {
        match self.kind {
            TaskKind::CopyMemory => self.length + 20,
            TaskKind::ResolutionShift => self.resolution_task().len(),
            _ => self.length,
        }
    }

    /// `(train, test)` splits drawn from disjoint per-sample streams.
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let (n, m, s, t) = (self.samples, self.test_samples, self.seed, self.length);
        match self.kind {
            TaskKind::CopyMemory => Ok((
                make_copy_memory_range(t, 0, n, s)?,
                make_copy_memory_range(t, TEST_STREAM_OFFSET, m, s)?,
            )),
            TaskKind::Adding => {
                Ok((make_adding_range(t, 0, n, s)?, make_adding_range(t, TEST_STREAM_OFFSET, m, s)?))
            }
            TaskKind::ResolutionShift => {
                let r = self.resolution_task();
                Ok((r.make_range(0, n, s)?, r.make_range(TEST_STREAM_OFFSET, m, s)?))
            }
            TaskKind::FunctionFit => Err(config_err!("function_fit has no sequence dataset; use fit_field")),
        }
    }

    /// Test split at a sampling rate `factor` times the training rate, same duration.
    pub fn build_test_at(&self, factor: f64) -> Result<Dataset> {
        if self.kind != TaskKind::ResolutionShift {
            return Err(config_err!("rate-shifted data exists only for resolution_shift tasks"));
        }
        let r = self.resolution_task();
        r.at_rate(r.sample_rate * factor).make_range(TEST_STREAM_OFFSET, self.test_samples, self.seed)
    }

    /// Cache key describing the generating request.
    pub fn cache_key(&self) -> String {
        serde_json::to_string(self).expect("task spec serializes")
    }
}
