use crate::autodiff::Var;
use crate::error::{config_err, Result};
use crate::fields::KernelField;
use crate::masks::{Mask, MaskKind};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::{conv_fft_shifted, sample_kernel, ConvPlan};

/// Output of a resolution-masked convolution.
pub struct Downsampled<'t> {
    /// `[B, O, T']`.
    pub y: Var<'t>,
    /// Masked spectrum before cropping, `[B, O, T/2+1, 2]`.
    pub spectrum: Var<'t>,
    pub len: usize,
}

/// Convolve, then apply [`spectral_downsample`].
pub fn spectral_downsample_conv<'t>(
    x: Var<'t>,
    field: &KernelField,
    size_mask: Option<&Mask>,
    res_mask: &Mask,
    plan: &ConvPlan,
    p: &Bound<'t>,
    store: &ParamStore,
) -> Result<Downsampled<'t>> {
    if plan.separable {
        return Err(config_err!("resolution masking expects a dense kernel"));
    }
    let kern = sample_kernel(field, p, store, plan.kernel_size, plan.mode, size_mask, false)?;
    let y = conv_fft_shifted(x, kern.taps, kern.shift())?;
    spectral_downsample(y, res_mask, p, store)
}

/// Multiply the spectrum of `y` `[B, O, T]` by a sigmoid resolution mask and crop it to the
/// mask support. The mask spans `T_ref ≥ T` cells; frequency bin `q` reads cell `2q`, so a
/// signal already resampled to `T` samples of the same duration sees the same physical band.
/// The kept length is the counted mask support, capped at `T`.
pub fn spectral_downsample<'t>(y: Var<'t>, res_mask: &Mask, p: &Bound<'t>, store: &ParamStore) -> Result<Downsampled<'t>> {
    if res_mask.kind != MaskKind::Sigmoid {
        return Err(config_err!("resolution masks are sigmoid masks"));
    }
    let t = *y.shape().last().ok_or_else(|| config_err!("cannot downsample a scalar"))?;
    let axis = y.shape().len() - 1;
    let cells = (1.0 / res_mask.spacing).round() as usize;
    if cells < t {
        return Err(config_err!("resolution mask spans {cells} cells but the signal has {t} samples"));
    }
    let coords = res_mask.axis_coords(cells);
    let t2 = res_mask.support_count(store, &coords).min(t);
    if t2 < 2 {
        return Err(config_err!("resolution mask support {t2} is below two samples"));
    }
    let bins = t / 2 + 1;
    let cell_coords: Vec<f64> = (0..bins).map(|q| coords[(2 * q).min(cells - 1)]).collect();
    let m = res_mask.eval(p, p.tape().constant(Tensor::new(&[bins, 1], cell_coords)?))?;
    let spectrum = y.rfft(t)?.mul(m)?;
    let kept = (t2 / 2 + 1).min(bins);
    let y2 = spectrum.slice(axis, 0, kept)?.irfft(t2)?.scale(t2 as f64 / t as f64);
    Ok(Downsampled { y: y2, spectrum, len: t2 })
}

/// Resample the last axis to `len` samples by cropping or zero-padding the spectrum.
pub fn spectral_resample<'t>(x: Var<'t>, len: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let t = *shape.last().ok_or_else(|| config_err!("cannot resample a scalar"))?;
    if len == t {
        return Ok(x);
    }
    if len < 1 {
        return Err(config_err!("resample length must be positive"));
    }
    let axis = shape.len();
    let f = x.rfft(t)?;
    let (have, want) = (t / 2 + 1, len / 2 + 1);
    let f = if want <= have { f.slice(axis - 1, 0, want)? } else { f.pad(axis - 1, 0, want - have)? };
    Ok(f.irfft(len)?.scale(len as f64 / t as f64))
}
