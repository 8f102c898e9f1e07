//! Real FFT helpers over the last axis, backed by `rustfft`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Number of non-redundant bins of a length-`n` real transform.
pub fn rfft_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Row-wise real FFT: each of `rows` rows of length `len` is zero-padded to `n`.
/// Output holds `rows × (n/2+1)` interleaved (re, im) pairs.
pub(crate) fn rfft_rows(x: &[f64], rows: usize, len: usize, n: usize) -> Vec<f64> {
    let f = rfft_bins(n);
    let plan = forward_plan(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![0.0; rows * f * 2];
    for r in 0..rows {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < len { Complex64::new(x[r * len + i], 0.0) } else { Complex64::new(0.0, 0.0) };
        }
        plan.process(&mut buf);
        let o = &mut out[r * f * 2..(r + 1) * f * 2];
        for k in 0..f {
            o[2 * k] = buf[k].re;
            o[2 * k + 1] = buf[k].im;
        }
    }
    out
}

/// Row-wise inverse real FFT of `rows × (n/2+1)` (re, im) bins to length `n`, with `1/n`
/// normalization. Imaginary parts of the DC and (even `n`) Nyquist bins are ignored.
pub(crate) fn irfft_rows(z: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let f = rfft_bins(n);
    let plan = inverse_plan(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![0.0; rows * n];
    let inv = 1.0 / n as f64;
    for r in 0..rows {
        let zr = &z[r * f * 2..(r + 1) * f * 2];
        buf[0] = Complex64::new(zr[0], 0.0);
        for k in 1..f {
            let c = Complex64::new(zr[2 * k], zr[2 * k + 1]);
            if 2 * k == n {
                buf[k] = Complex64::new(c.re, 0.0);
            } else {
                buf[k] = c;
                buf[n - k] = c.conj();
            }
        }
        plan.process(&mut buf);
        for t in 0..n {
            out[r * n + t] = buf[t].re * inv;
        }
    }
    out
}

/// Adjoint of [`rfft_rows`]: maps bin gradients back to the `len` input samples.
pub(crate) fn rfft_rows_adjoint(g: &[f64], rows: usize, len: usize, n: usize) -> Vec<f64> {
    let f = rfft_bins(n);
    let plan = inverse_plan(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![0.0; rows * len];
    for r in 0..rows {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for k in 0..f {
            buf[k] = Complex64::new(g[r * f * 2 + 2 * k], g[r * f * 2 + 2 * k + 1]);
        }
        plan.process(&mut buf);
        for t in 0..len {
            out[r * len + t] = buf[t].re;
        }
    }
    out
}

/// Adjoint of [`irfft_rows`].
pub(crate) fn irfft_rows_adjoint(g: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let f = rfft_bins(n);
    let mut out = rfft_rows(g, rows, n, n);
    let inv = 1.0 / n as f64;
    for r in 0..rows {
        for k in 0..f {
            let edge = k == 0 || 2 * k == n;
            let c = if edge { inv } else { 2.0 * inv };
            let o = &mut out[r * f * 2 + 2 * k..r * f * 2 + 2 * k + 2];
            o[0] *= c;
            o[1] = if edge { 0.0 } else { o[1] * c };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_odd_and_even() {
        for &n in &[1usize, 2, 7, 16, 33, 4096] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64).sin()).collect();
            let z = rfft_rows(&x, 1, n, n);
            let y = irfft_rows(&z, 1, n);
            let err = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn dc_bin_is_sum() {
        let z = rfft_rows(&[1.0, 2.0, 3.0], 1, 3, 8);
        assert_eq!(z.len(), 10);
        assert!((z[0] - 6.0).abs() < 1e-12 && z[1].abs() < 1e-12);
    }
}
