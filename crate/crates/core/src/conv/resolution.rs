use crate::autodiff::{ConvMode, Var};
use crate::error::{config_err, Result};
use crate::fields::{grid_from_coords, KernelField};
use crate::masks::Mask;
use crate::params::Bound;
use crate::spectral::blur_kernel;
use crate::tensor::Tensor;

use super::{conv_with_path, pointwise, ConvPlan};

/// Deployment of a trained kernel at another sampling rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossResolution {
    pub sr_train: f64,
    pub sr_eval: f64,
    /// Multiply by `sr_train / sr_eval` so outputs keep their training-rate scale.
    pub correct: bool,
    /// Blur the resampled kernel when the evaluation rate is higher.
    pub blur: bool,
}

impl CrossResolution {
    pub fn new(sr_train: f64, sr_eval: f64) -> Self {
        Self { sr_train, sr_eval, correct: false, blur: true }
    }

    pub fn ratio(&self) -> f64 {
        self.sr_eval / self.sr_train
    }
}

/// Normalized kernel coordinates at the evaluation rate and the matching tap shift.
/// The physical extent of the trained kernel is preserved, so tap spacing shrinks or grows
/// by the rate ratio and the last trained position keeps its coordinate.
pub fn cross_resolution_offsets(k: usize, mode: ConvMode, sr_train: f64, sr_eval: f64) -> Result<(Vec<f64>, isize)> {
    if !(sr_train > 0.0 && sr_eval > 0.0) {
        return Err(config_err!("sampling rates must be positive (train {sr_train}, eval {sr_eval})"));
    }
    if k < 2 {
        return Err(config_err!("cross-resolution kernels need k ≥ 2"));
    }
    let r = sr_eval / sr_train;
    let span = r * (k - 1) as f64;
    // Tolerance keeps exact ratios such as 2·16 from flooring down.
    let snap = |v: f64| (v + 1e-9).floor() as usize;
    match mode {
        ConvMode::Causal => {
            let k2 = snap(span) + 1;
            let coords = (0..k2).map(|j| -1.0 + 2.0 * j as f64 / span).collect();
            Ok((coords, 0))
        }
        ConvMode::Centered => {
            if k % 2 == 0 {
                return Err(config_err!("centered cross-resolution needs an odd kernel length, got {k}"));
            }
            let h = snap(span / 2.0);
            let coords = (0..2 * h + 1).map(|j| (j as f64 - h as f64) * 2.0 / span).collect();
            Ok((coords, h as isize))
        }
    }
}

/// Convolve `x`, sampled at `cfg.sr_eval`, with a kernel trained at `cfg.sr_train`.
///
/// Uncorrected outputs scale approximately by `sr_eval / sr_train`.
pub fn conv_cross_resolution<'t>(
    x: Var<'t>,
    field: &KernelField,
    mask: Option<&Mask>,
    plan: &ConvPlan,
    p: &Bound<'t>,
    cfg: CrossResolution,
    mix: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let (coords, shift) = cross_resolution_offsets(plan.kernel_size, plan.mode, cfg.sr_train, cfg.sr_eval)?;
    let k2 = coords.len();
    let grid = grid_from_coords(coords, plan.mode)?;
    let pts = p.tape().constant(grid.points.clone());
    let mut flat = field.forward(p, pts)?; // [k2, O·C]
    if let Some(m) = mask {
        flat = flat.mul(m.eval(p, pts)?)?;
    }
    let (o, c) = (field.spec.out_channels, field.spec.in_channels);
    let mut taps = if plan.separable { flat.t()? } else { flat.reshape(&[k2, o, c])?.permute(&[1, 2, 0])? };
    if cfg.blur && cfg.ratio() > 1.0 {
        taps = blur_taps(taps, cfg.sr_train, cfg.sr_eval)?;
    }
    let mut y = conv_with_path(x, taps, shift, plan.path)?;
    if plan.separable {
        let w = mix.ok_or_else(|| config_err!("separable plan needs a pointwise mixing matrix"))?;
        y = pointwise(y, w, None)?;
    }
    if cfg.correct {
        y = y.scale(cfg.sr_train / cfg.sr_eval);
    }
    Ok(y)
}

fn blur_taps<'t>(taps: Var<'t>, sr_train: f64, sr_eval: f64) -> Result<Var<'t>> {
    let filter = blur_kernel(sr_train, sr_eval)?;
    let shape = taps.shape();
    let k = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let len = filter.taps.len();
    let bank = Tensor::new(&[rows, len], filter.taps.iter().copied().cycle().take(rows * len).collect())?;
    let y = taps.reshape(&[1, rows, k])?.conv1d(taps.tape().constant(bank), ConvMode::Centered, true)?;
    y.reshape(&shape)
}
