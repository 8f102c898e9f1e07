use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvMode, Precision, Tape};
use crate::error::{config_err, Error, Result};
use crate::fields::{coord_grid, linspace, FieldSpec, FieldVariant, KernelField};
use crate::masks::Mask;
use crate::params::{Bound, ParamStore};
use crate::spectral::{alias_loss, power_fraction_above, power_spectrum, AliasMode, FrequencyBudget, DEFAULT_SIGMA_CUT};
use crate::tensor::Tensor;

use super::backbone::FlexMaskConfig;
use super::data::{make_field_targets, FieldTarget};
use super::optim::{Adam, AdamConfig};
use super::train::StepRecord;

/// Direct regression of a kernel field (optionally masked) onto a target function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub field: FieldVariant,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub weight_norm: bool,
    pub target: FieldTarget,
    /// Grid points, which is also the kernel length `k`.
    pub points: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub lambda_alias: f64,
    #[serde(default)]
    pub alias_mode: AliasMode,
    #[serde(default)]
    pub mask: Option<FlexMaskConfig>,
    #[serde(default = "default_mask_lr")]
    pub mask_lr_factor: f64,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_layers() -> usize {
    3
}
fn default_hidden() -> usize {
    32
}
fn default_steps() -> usize {
    2000
}
fn default_mask_lr() -> f64 {
    1.0
}

pub struct FitResult {
    pub steps: Vec<StepRecord>,
    pub final_mse: f64,
    pub target: Vec<f64>,
    pub field: KernelField,
    pub mask: Option<Mask>,
    pub store: ParamStore,
    /// Present for MAGNet fields.
    pub budget: Option<FrequencyBudget>,
}

fn masked_values<'t>(field: &KernelField, mask: Option<&Mask>, p: &Bound<'t>, n: usize) -> Result<crate::Var<'t>> {
    let pts = p.tape().constant(coord_grid(n, 1, ConvMode::Centered)?.points);
    let v = field.forward(p, pts)?;
    match mask {
        Some(m) => v.mul(m.eval(p, pts)?),
        None => Ok(v),
    }
}

/// Kernel values on `linspace(n)` with the mask left unthresholded.
pub fn sampled_kernel_values(field: &KernelField, mask: Option<&Mask>, store: &ParamStore, n: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let pts = tape.constant(Tensor::new(&[n, 1], linspace(n))?);
    let mut v = field.forward(&p, pts)?;
    if let Some(m) = mask {
        v = v.mul(m.raw(&p, pts)?)?;
    }
    Ok(v.value().into_data())
}

/// Fraction of spectral power above `f` (cycles per unit) of `linspace` samples on `[-1, 1]`.
pub fn spectrum_tail_above(samples: &[f64], f: f64) -> f64 {
    let n = samples.len() as f64;
    power_fraction_above(&power_spectrum(samples, 2.0 * n / (n - 1.0)), f)
}

pub fn fit_field(cfg: &FitConfig) -> Result<FitResult> {
    cfg.optimizer.validate()?;
    if !(cfg.lambda_alias >= 0.0) {
        return Err(config_err!("fit.lambda_alias must be ≥ 0"));
    }
    let n = cfg.points;
    let target = make_field_targets(cfg.target, n, cfg.seed)?;
    let mut store = ParamStore::new();
    let spec = FieldSpec {
        variant: cfg.field.clone(),
        layers: cfg.layers,
        hidden: cfg.hidden,
        in_dim: 1,
        out_channels: 1,
        in_channels: 1,
        weight_norm: cfg.weight_norm,
    };
    let field = KernelField::new(&mut store, "field", spec, cfg.seed)?;
    let mask = match &cfg.mask {
        Some(m) => Some(Mask::gaussian_with_size(
            &mut store,
            "mask",
            m.init_fraction * n as f64,
            2.0 / (n - 1) as f64,
            m.mu.unwrap_or(0.0),
            m.threshold,
            m.learn_mu,
        )?),
        None => None,
    };
    let masks: Vec<Mask> = mask.iter().cloned().collect();
    let tgt = Tensor::new(&[n, 1], target.clone())?;
    let ids: Vec<_> = store.ids().collect();
    let mut opt = Adam::new(cfg.optimizer, cfg.mask_lr_factor);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mse_of = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        Ok(masked_values(&field, mask.as_ref(), &p, n)?.sub(tape.constant(tgt.clone()))?.square().mean().item())
    };
    for step in 0..cfg.steps {
        let tape = Tape::with_precision(cfg.precision);
        let p = store.bind(&tape);
        let mse = masked_values(&field, mask.as_ref(), &p, n)?.sub(tape.constant(tgt.clone()))?.square().mean();
        let mut loss = mse;
        let mut alias = 0.0;
        if cfg.lambda_alias > 0.0 && field.is_magnet() {
            let a = alias_loss(&field, &masks, &p, n, cfg.alias_mode, DEFAULT_SIGMA_CUT)?;
            alias = a.item();
            loss = loss.add(a.scale(cfg.lambda_alias))?;
        }
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Training { step, reason: format!("loss is {lv}") });
        }
        let grads = p.collect(&tape.backward(loss)?);
        let gn = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !gn.is_finite() {
            return Err(Error::Training { step, reason: format!("gradient norm is {gn}") });
        }
        drop(p);
        opt.step(&mut store, &ids, &grads, 1.0);
        field.project(&mut store);
        if let Some(m) = &mask {
            m.project(&mut store);
        }
        steps.push(StepRecord {
            step,
            loss: lv,
            task_loss: mse.item(),
            alias_loss: alias,
            complexity_loss: 0.0,
            cost_ratio: None,
            grad_norm: gn,
            lr: cfg.optimizer.lr,
        });
    }
    let final_mse = mse_of(&store)?;
    let budget = if field.is_magnet() {
        Some(FrequencyBudget::compute(&field, &masks, &store, n, DEFAULT_SIGMA_CUT)?)
    } else {
        None
    };
    Ok(FitResult { steps, final_mse, target, field, mask, store, budget })
}
