//! Convolution engine: direct and FFT paths, sampled continuous kernels, masked kernels,
//! cross-resolution deployment, irregular sampling and spectral downsampling.
//!
//! Signals are laid out `[B, C, T]` and kernels `[O, C, K]` (depthwise: `[C, K]`).

mod downsample;
mod irregular;
mod kernel;
mod resolution;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvMode, Var};
use crate::error::{dim_err, Result};

pub use downsample::{spectral_downsample, spectral_downsample_conv, spectral_resample, Downsampled};
pub use irregular::{conv_irregular, nearest_gap_weights, IrregularSamples};
pub use kernel::{flexconv_forward, sample_kernel, SampledKernel};
pub use resolution::{conv_cross_resolution, cross_resolution_offsets, CrossResolution};

/// Kernel length from which the automatic path switches to FFT.
pub const FFT_THRESHOLD: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPath {
    Direct,
    Fft,
    #[default]
    Auto,
}

impl ConvPath {
    pub fn resolve(self, k: usize) -> ConvPath {
        match self {
            ConvPath::Auto if k >= FFT_THRESHOLD => ConvPath::Fft,
            ConvPath::Auto => ConvPath::Direct,
            p => p,
        }
    }
}

/// Static description of one convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvPlan {
    pub mode: ConvMode,
    #[serde(default)]
    pub path: ConvPath,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channelwise continuous kernel followed by a pointwise mix.
    #[serde(default)]
    pub separable: bool,
    #[serde(default = "one")]
    pub sr_train: f64,
    #[serde(default = "one")]
    pub sr_eval: f64,
}

fn one() -> f64 {
    1.0
}

impl ConvPlan {
    pub fn new(mode: ConvMode, kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            mode,
            path: ConvPath::Auto,
            kernel_size,
            in_channels,
            out_channels,
            separable: false,
            sr_train: 1.0,
            sr_eval: 1.0,
        }
    }

    /// Channel shape the kernel field must produce: `(N_out, N_in)`.
    pub fn field_channels(&self) -> (usize, usize) {
        if self.separable {
            (self.in_channels, 1)
        } else {
            (self.out_channels, self.in_channels)
        }
    }
}

fn signal_len(x: &Var<'_>) -> Result<usize> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(dim_err!("signal must be [B, C, T], got {:?}", s));
    }
    Ok(s[2])
}

/// Direct convolution with the tap alignment of `mode`.
pub fn conv_direct<'t>(x: Var<'t>, w: Var<'t>, mode: ConvMode) -> Result<Var<'t>> {
    let depthwise = w.shape().len() == 2;
    x.conv1d(w, mode, depthwise)
}

/// FFT convolution, equal to [`conv_direct`] up to rounding.
pub fn conv_fft<'t>(x: Var<'t>, w: Var<'t>, mode: ConvMode) -> Result<Var<'t>> {
    let k = *w.shape().last().expect("kernel rank ≥ 2");
    conv_fft_shifted(x, w, mode.offset(k) as isize)
}

/// FFT form of [`Var::conv1d_shifted`]. The transform length is the next power of two
/// covering the full linear convolution.
pub fn conv_fft_shifted<'t>(x: Var<'t>, w: Var<'t>, shift: isize) -> Result<Var<'t>> {
    let t = signal_len(&x)?;
    let ws = w.shape();
    let k = *ws.last().expect("kernel rank ≥ 2");
    let depthwise = ws.len() == 2;
    let n = (t + k - 1).next_power_of_two();
    let xf = x.rfft(n)?;
    let wf = w.rfft(n)?;
    let yf = if depthwise { xf.complex_mul(wf)? } else { xf.spectral_mix(wf)? };
    let y = yf.irfft(n)?;
    if shift >= 0 {
        y.slice(2, shift as usize, t)
    } else {
        let lead = (-shift) as usize;
        if lead >= t {
            let s = y.shape();
            return y.slice(2, 0, 1)?.scale(0.0).broadcast_to(&[s[0], s[1], t]);
        }
        y.slice(2, 0, t - lead)?.pad(2, lead, 0)
    }
}

/// Convolution along `path` with an explicit tap shift.
pub fn conv_with_path<'t>(x: Var<'t>, w: Var<'t>, shift: isize, path: ConvPath) -> Result<Var<'t>> {
    let k = *w.shape().last().expect("kernel rank ≥ 2");
    match path.resolve(k) {
        ConvPath::Fft => conv_fft_shifted(x, w, shift),
        _ => x.conv1d_shifted(w, shift, w.shape().len() == 2),
    }
}

/// Pointwise channel mix: `w` `[O, C]` applied to `[B, C, T]`, plus optional bias `[O]`.
pub fn pointwise<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let y = w.matmul(x)?;
    match b {
        Some(b) => {
            let o = b.shape()[0];
            y.add(b.reshape(&[o, 1])?)
        }
        None => Ok(y),
    }
}
