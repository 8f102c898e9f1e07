//! Analytic frequency bounds for MAGNet kernels, Nyquist limits, the anti-alias penalty and
//! the resolution-change blur filter.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::fields::KernelField;
use crate::masks::{Mask, MaskKind};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Standard deviations of a Gaussian spectrum counted as its bandwidth.
pub const DEFAULT_SIGMA_CUT: f64 = 2.0;
/// Default weight of the anti-alias penalty.
pub const DEFAULT_ALIAS_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AliasMode {
    Summed,
    #[default]
    PerLayer,
}

/// Nyquist frequency of a `k`-tap kernel on `[-1, 1]`, in cycles per unit.
pub fn nyquist_freq(k: usize) -> f64 {
    k.saturating_sub(1) as f64 / 4.0
}

/// Per-channel and layer-wide maximum frequency of one Gabor layer.
pub struct GaborFreq<'t> {
    /// `[N_hid]`
    pub per_channel: Var<'t>,
    /// Scalar maximum over channels.
    pub max: Var<'t>,
}

/// `max_j |W_g[i,j]|/2π + σ_cut·min_d γ_d[i]/2π` per channel, then the max over channels.
pub fn gabor_max_freq<'t>(
    field: &KernelField,
    p: &Bound<'t>,
    layer: usize,
    sigma_cut: f64,
) -> Result<GaborFreq<'t>> {
    let g = field
        .gabor_layers()
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("field has no Gabor layer {layer}")))?;
    let w = g.filter.weight(p)?; // [N, D]
    let sine = w.abs().max_axis(1)?.t()?; // [1, N]
    let env = p.get(g.gamma).min_axis(0)?.scale(sigma_cut); // [1, N]
    let per_channel = sine.add(env)?.scale(1.0 / (2.0 * PI));
    let n = per_channel.shape()[1];
    let per_channel = per_channel.reshape(&[n])?;
    Ok(GaborFreq { per_channel, max: per_channel.max_all()? })
}

fn require_magnet(field: &KernelField) -> Result<()> {
    if field.is_magnet() {
        Ok(())
    } else {
        Err(Error::Contract("frequency analysis requires a MAGNet field".into()))
    }
}

/// Layer maxima of a MAGNet field.
pub fn magnet_layer_freqs<'t>(field: &KernelField, p: &Bound<'t>, sigma_cut: f64) -> Result<Vec<Var<'t>>> {
    require_magnet(field)?;
    (0..field.gabor_layers().len()).map(|l| Ok(gabor_max_freq(field, p, l, sigma_cut)?.max)).collect()
}

/// Sum of layer maxima.
pub fn magnet_max_freq<'t>(field: &KernelField, p: &Bound<'t>, sigma_cut: f64) -> Result<Var<'t>> {
    let layers = magnet_layer_freqs(field, p, sigma_cut)?;
    let mut total = layers[0];
    for l in &layers[1..] {
        total = total.add(*l)?;
    }
    Ok(total)
}

/// Bandwidth added by Gaussian size masks: `σ_cut / (max_d σ_d · 2π)`.
pub fn mask_freq<'t>(masks: &[Mask], p: &Bound<'t>, sigma_cut: f64) -> Result<Var<'t>> {
    let mut widest: Option<Var<'t>> = None;
    for m in masks {
        if m.kind != MaskKind::Gaussian {
            return Err(Error::Contract("mask bandwidth is defined for Gaussian masks".into()));
        }
        let s = p.get(m.sigma2.expect("gaussian")).sqrt();
        widest = Some(match widest {
            Some(w) => w.maximum(s)?,
            None => s,
        });
    }
    let widest = widest.ok_or_else(|| config_err!("no size mask given"))?;
    p.tape().scalar(sigma_cut / (2.0 * PI)).div(widest)
}

/// MAGNet bound plus the mask term.
pub fn flexconv_max_freq<'t>(field: &KernelField, masks: &[Mask], p: &Bound<'t>, sigma_cut: f64) -> Result<Var<'t>> {
    magnet_max_freq(field, p, sigma_cut)?.add(mask_freq(masks, p, sigma_cut)?)
}

/// Anti-alias penalty, before multiplication by its weight.
pub fn alias_loss<'t>(
    field: &KernelField,
    masks: &[Mask],
    p: &Bound<'t>,
    k: usize,
    mode: AliasMode,
    sigma_cut: f64,
) -> Result<Var<'t>> {
    if k < 2 {
        return Err(config_err!("alias penalty needs k ≥ 2, got {k}"));
    }
    let nyq = nyquist_freq(k);
    let tape = p.tape();
    match mode {
        AliasMode::Summed => {
            let f = if masks.is_empty() {
                magnet_max_freq(field, p, sigma_cut)?
            } else {
                flexconv_max_freq(field, masks, p, sigma_cut)?
            };
            Ok(f.maximum(tape.scalar(nyq))?.add_scalar(-nyq).square())
        }
        AliasMode::PerLayer => {
            let layers = magnet_layer_freqs(field, p, sigma_cut)?;
            let n = layers.len() as f64;
            let env = if masks.is_empty() { None } else { Some(mask_freq(masks, p, sigma_cut)?.scale(1.0 / n)) };
            let share = nyq / n;
            let mut total: Option<Var<'t>> = None;
            for l in layers {
                let f = match env {
                    Some(e) => l.add(e)?,
                    None => l,
                };
                let term = f.maximum(tape.scalar(share))?.add_scalar(-share).square();
                total = Some(match total {
                    Some(t) => t.add(term)?,
                    None => term,
                });
            }
            Ok(total.expect("MAGNet has at least one layer"))
        }
    }
}

/// Frequency budget of one kernel, as reported per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBudget {
    pub f_plus_per_layer: Vec<f64>,
    /// Mask bandwidth, when a size mask is present.
    pub mask_term: Option<f64>,
    pub f_plus_total: f64,
    pub f_nyquist: f64,
    pub sigma_cut: f64,
}

/// One row of the frequency-budget report.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetRow {
    pub layer: String,
    pub f_plus: f64,
    pub f_nyq: f64,
    pub violation: f64,
}

impl FrequencyBudget {
    pub fn compute(field: &KernelField, masks: &[Mask], store: &ParamStore, k: usize, sigma_cut: f64) -> Result<Self> {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let f_plus_per_layer: Vec<f64> = magnet_layer_freqs(field, &p, sigma_cut)?.iter().map(|v| v.item()).collect();
        let mask_term = if masks.is_empty() { None } else { Some(mask_freq(masks, &p, sigma_cut)?.item()) };
        let f_plus_total = f_plus_per_layer.iter().sum::<f64>() + mask_term.unwrap_or(0.0);
        Ok(Self { f_plus_per_layer, mask_term, f_plus_total, f_nyquist: nyquist_freq(k), sigma_cut })
    }

    /// Per-layer rows against the uniformly split Nyquist budget, then a `total` row.
    pub fn rows(&self) -> Vec<BudgetRow> {
        let n = self.f_plus_per_layer.len() as f64;
        let env = self.mask_term.unwrap_or(0.0) / n;
        let share = self.f_nyquist / n;
        let mut rows: Vec<BudgetRow> = self
            .f_plus_per_layer
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let f_plus = f + env;
                BudgetRow { layer: (i + 1).to_string(), f_plus, f_nyq: share, violation: (f_plus - share).max(0.0) }
            })
            .collect();
        rows.push(BudgetRow {
            layer: "total".into(),
            f_plus: self.f_plus_total,
            f_nyq: self.f_nyquist,
            violation: (self.f_plus_total - self.f_nyquist).max(0.0),
        });
        rows
    }
}

/// Normalized Gaussian smoothing taps used before evaluating a kernel at a higher rate.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurFilter {
    pub taps: Vec<f64>,
    /// Set when the rate ratio was not an integer and had to be rounded.
    pub rounded_from: Option<f64>,
}

/// Gaussian taps (`μ = 0`, `σ = 0.5`) of length `2·ratio + 1`, normalized to unit sum.
pub fn blur_kernel(sr_train: f64, sr_test: f64) -> Result<BlurFilter> {
    if !(sr_train > 0.0 && sr_test > 0.0) {
        return Err(config_err!("sampling rates must be positive"));
    }
    let ratio = sr_test / sr_train;
    if ratio < 1.0 {
        return Err(config_err!("blur applies only when the test rate exceeds the training rate"));
    }
    let r = (ratio + 0.5).floor();
    let rounded_from = if (r - ratio).abs() > 1e-9 { Some(ratio) } else { None };
    let half = r as i64;
    let raw: Vec<f64> = (-half..=half).map(|i| (-0.5 * (i as f64 / 0.5).powi(2)).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(BlurFilter { taps: raw.iter().map(|v| v / z).collect(), rounded_from })
}

/// One-sided power spectrum of `samples` spread over a span of `span` units.
/// Returns `(frequency in cycles per unit, power)` per bin.
pub fn power_spectrum(samples: &[f64], span: f64) -> Vec<(f64, f64)> {
    let n = samples.len();
    let spec = crate::autodiff::fft::rfft_bins(n);
    let z = {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(samples.to_vec()));
        x.rfft(n).expect("length matches").value()
    };
    (0..spec)
        .map(|k| {
            let (re, im) = (z.data()[2 * k], z.data()[2 * k + 1]);
            // Interior bins stand for a conjugate pair.
            let mult = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            (k as f64 / span, mult * (re * re + im * im))
        })
        .collect()
}

/// Fraction of total power in bins strictly above `f`.
pub fn power_fraction_above(spectrum: &[(f64, f64)], f: f64) -> f64 {
    let total: f64 = spectrum.iter().map(|b| b.1).sum();
    if total == 0.0 {
        return 0.0;
    }
    spectrum.iter().filter(|b| b.0 > f).map(|b| b.1).sum::<f64>() / total
}

/// Frequency of the strongest bin (the first on ties).
pub fn dominant_frequency(spectrum: &[(f64, f64)]) -> f64 {
    let mut best = 0;
    for (i, b) in spectrum.iter().enumerate() {
        if b.1 > spectrum[best].1 {
            best = i;
        }
    }
    spectrum[best].0
}

/// Analytic bound against the measured spectrum of one field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCheck {
    pub f_plus: f64,
    pub dominant: f64,
    /// Power fraction above `f_plus`.
    pub tail: f64,
}

/// Sample a single-output MAGNet densely on `[-1, 1]` and compare its spectrum with the
/// analytic bound.
pub fn check_field_spectrum(field: &KernelField, store: &ParamStore, samples: usize) -> Result<SpectrumCheck> {
    let tape = Tape::new();
    let f_plus = magnet_max_freq(field, &store.bind_constant(&tape), DEFAULT_SIGMA_CUT)?.item();
    let grid = crate::fields::coord_grid(samples, 1, crate::autodiff::ConvMode::Centered)?;
    let k = field.eval_value(store, &grid)?;
    let spec = power_spectrum(k.data(), samples as f64 * grid.spacing());
    Ok(SpectrumCheck { f_plus, dominant: dominant_frequency(&spec), tail: power_fraction_above(&spec, f_plus) })
}

/// [`check_field_spectrum`] over `count` default-initialized MAGNets with seeds `seed..seed+count`.
pub fn survey_magnets(count: usize, seed: u64, layers: usize, hidden: usize, samples: usize) -> Result<Vec<SpectrumCheck>> {
    (0..count as u64)
        .map(|i| {
            let mut spec = crate::fields::FieldSpec::magnet(1, 1);
            spec.layers = layers;
            spec.hidden = hidden;
            let mut store = ParamStore::new();
            let f = KernelField::new(&mut store, "k", spec, seed + i)?;
            check_field_spectrum(&f, &store, samples)
        })
        .collect()
}

#[cfg(test)]
mod tests;
