use crate::autodiff::{ConvMode, Var};
use crate::error::{config_err, Result};
use crate::fields::{coord_grid, KernelField};
use crate::masks::Mask;
use crate::params::{Bound, ParamStore};

use super::{conv_with_path, pointwise, ConvPlan};

/// A kernel sampled on the grid, possibly cropped to its mask support.
pub struct SampledKernel<'t> {
    /// `[O, C, K']`, or `[C, K']` for separable plans.
    pub taps: Var<'t>,
    /// Full length before cropping.
    pub full_len: usize,
    /// Kept tap range `[lo, hi)` of the full grid.
    pub crop: (usize, usize),
    pub mode: ConvMode,
}

impl SampledKernel<'_> {
    /// Tap shift that keeps cropped taps at their original offsets.
    pub fn shift(&self) -> isize {
        self.mode.offset(self.full_len) as isize - self.crop.0 as isize
    }
}

/// Evaluate `field` on `k` evenly spaced coordinates, multiply by `mask` and crop taps whose
/// unthresholded mask value falls below the threshold.
pub fn sample_kernel<'t>(
    field: &KernelField,
    p: &Bound<'t>,
    store: &ParamStore,
    k: usize,
    mode: ConvMode,
    mask: Option<&Mask>,
    depthwise: bool,
) -> Result<SampledKernel<'t>> {
    if k == 0 {
        return Err(config_err!("kernel length must be positive"));
    }
    let grid = coord_grid(k, field.spec.in_dim, mode)?;
    let (o, c) = (field.spec.out_channels, field.spec.in_channels);
    let flat = field.forward(p, p.tape().constant(grid.points.clone()))?; // [k, O·C]
    let (values, crop) = match mask {
        None => (flat, (0, k)),
        Some(m) => {
            if field.spec.in_dim != 1 {
                return Err(config_err!("masked kernels are one-dimensional"));
            }
            let coords = grid.points.data().to_vec();
            let crop = m.support_range(store, &coords);
            if crop.1 <= crop.0 {
                return Err(config_err!("mask support is empty on a {k}-tap grid"));
            }
            let x = p.tape().constant(grid.points.clone());
            (flat.mul(m.eval(p, x)?)?.slice(0, crop.0, crop.1 - crop.0)?, crop)
        }
    };
    let kk = crop.1 - crop.0;
    let taps = if depthwise {
        if c != 1 {
            return Err(config_err!("separable kernels need a single input channel per field output"));
        }
        values.t()?
    } else {
        values.reshape(&[kk, o, c])?.permute(&[1, 2, 0])?
    };
    Ok(SampledKernel { taps, full_len: k, crop, mode })
}

/// Masked continuous convolution: sample, crop to the mask support and convolve.
/// A separable plan convolves channelwise and then applies `mix` `[O, C]`.
pub fn flexconv_forward<'t>(
    x: Var<'t>,
    field: &KernelField,
    mask: Option<&Mask>,
    plan: &ConvPlan,
    p: &Bound<'t>,
    store: &ParamStore,
    mix: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let kern = sample_kernel(field, p, store, plan.kernel_size, plan.mode, mask, plan.separable)?;
    let y = conv_with_path(x, kern.taps, kern.shift(), plan.path)?;
    match (plan.separable, mix) {
        (true, Some(w)) => pointwise(y, w, None),
        (true, None) => Err(config_err!("separable plan needs a pointwise mixing matrix")),
        (false, _) => Ok(y),
    }
}
