use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::backbone::{Backbone, Deployment};
use super::data::{Dataset, TargetLayout};
use super::TaskSpec;

/// Rate factors accepted by [`eval_resolution_shift`].
pub const SUPPORTED_FACTORS: [f64; 4] = [2.0, 1.0, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScaling {
    pub layer: usize,
    /// `‖conv_shifted − factor · conv_full‖ / ‖factor · conv_full‖` at matched time points.
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftMetrics {
    pub factor: f64,
    pub corrected: bool,
    pub mse: f64,
    /// Per-layer conv scaling, for factors below one.
    pub layers: Vec<LayerScaling>,
}

fn check_factor(factor: f64) -> Result<()> {
    if SUPPORTED_FACTORS.contains(&factor) {
        Ok(())
    } else {
        Err(config_err!("unsupported resolution factor {factor}; expected one of 2, 1, 0.5, 0.25"))
    }
}

/// Evaluate `model`, trained at the task's rate, on test data re-sampled at `factor` times
/// that rate, with kernels re-sampled to match.
pub fn eval_resolution_shift(
    model: &Backbone,
    store: &ParamStore,
    task: &TaskSpec,
    factor: f64,
    correct: bool,
) -> Result<ShiftMetrics> {
    check_factor(factor)?;
    let ds = task.build_test_at(factor)?;
    let mse = shifted_mse(model, store, &ds, Deployment { factor, correct })?;
    let layers = if factor < 1.0 {
        let full = task.build_test_at(1.0)?;
        let take: Vec<usize> = (0..full.len().min(16)).collect();
        layer_scaling_errors(model, store, &full.batch(&take).0, factor)?
    } else {
        Vec::new()
    };
    Ok(ShiftMetrics { factor, corrected: correct, mse, layers })
}

fn shifted_mse(model: &Backbone, store: &ParamStore, ds: &Dataset, deploy: Deployment) -> Result<f64> {
    if ds.layout != TargetLayout::PerStep {
        return Err(config_err!("resolution evaluation expects per-step regression targets"));
    }
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let tr = model.forward_trace(&p, store, tape.constant(ds.inputs.clone()), deploy)?;
    Ok(tr.output.sub(tape.constant(ds.targets.clone()))?.square().mean().item())
}

/// For each block, feed the full-rate block input subsampled by `1/factor` through the conv
/// stage at the lower rate and compare with `factor ×` the full-rate conv output.
pub fn layer_scaling_errors(model: &Backbone, store: &ParamStore, x: &Tensor, factor: f64) -> Result<Vec<LayerScaling>> {
    let stride = (1.0 / factor).round() as usize;
    if !(factor > 0.0 && factor < 1.0) || (stride as f64 * factor - 1.0).abs() > 1e-12 {
        return Err(config_err!("layer scaling needs factor 1/m for an integer m > 1, got {factor}"));
    }
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let tr = model.forward_trace(&p, store, tape.constant(x.clone()), Deployment::default())?;
    let mut out = Vec::new();
    for (l, blk) in model.blocks.iter().enumerate() {
        let full_in = tr.inputs[l].value();
        let (b, c, t) = (full_in.shape()[0], full_in.shape()[1], full_in.shape()[2]);
        let t2 = t.div_ceil(stride);
        let sub = Tensor::from_fn(&[b, c, t2], |i| {
            let (row, j) = (i / t2, i % t2);
            full_in.data()[row * t + j * stride]
        });
        let low = model.block_conv(blk, &p, store, tape.constant(sub), factor)?.value();
        let high = tr.conv_raw[l].value();
        let o = high.shape()[1];
        let (mut num, mut den) = (0.0, 0.0);
        for bi in 0..b {
            for oi in 0..o {
                for j in 0..t2 {
                    let want = factor * high.at(&[bi, oi, j * stride]);
                    num += (low.at(&[bi, oi, j]) - want).powi(2);
                    den += want * want;
                }
            }
        }
        out.push(LayerScaling { layer: l, rel_err: (num / den.max(f64::MIN_POSITIVE)).sqrt() });
    }
    Ok(out)
}
