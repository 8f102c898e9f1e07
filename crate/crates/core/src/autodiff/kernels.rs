//! Raw loops behind the differentiable primitives.

use serde::{Deserialize, Serialize};

/// Alignment of kernel taps relative to the output position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Tap `j` sees the input `j` steps in the past.
    Causal,
    /// Tap `j` sees offset `j - k/2`; even `k` puts the extra tap on the negative side.
    Centered,
}

impl ConvMode {
    pub fn offset(self, k: usize) -> usize {
        match self {
            ConvMode::Causal => 0,
            ConvMode::Centered => k / 2,
        }
    }
}

/// Valid output range `[lo, hi)` for tap `j` when `s = t + off - j` must lie in `[0, t_len)`.
#[inline]
fn tap_range(j: usize, off: isize, t_len: usize) -> (usize, usize) {
    let d = j as isize - off;
    let lo = d.max(0) as usize;
    let hi = (t_len as isize + d).clamp(0, t_len as isize) as usize;
    (lo.min(t_len), hi.max(lo.min(t_len)))
}

/// `x`: [B, C, T]; `w`: [O, C, K] or, if depthwise, [C, K]. Output [B, O, T].
pub(crate) fn conv1d(
    x: &[f64],
    (b, c, t): (usize, usize, usize),
    w: &[f64],
    o: usize,
    k: usize,
    off: isize,
    depthwise: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; b * o * t];
    for bi in 0..b {
        for oi in 0..o {
            let y = &mut out[(bi * o + oi) * t..(bi * o + oi + 1) * t];
            let chans: Box<dyn Iterator<Item = usize>> =
                if depthwise { Box::new(std::iter::once(oi)) } else { Box::new(0..c) };
            for ci in chans {
                let xr = &x[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let wr = if depthwise { &w[ci * k..(ci + 1) * k] } else { &w[(oi * c + ci) * k..(oi * c + ci + 1) * k] };
                for (j, &wv) in wr.iter().enumerate() {
                    let (lo, hi) = tap_range(j, off, t);
                    for ti in lo..hi {
                        y[ti] += xr[(ti as isize + off) as usize - j] * wv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d`] w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    (b, c, t): (usize, usize, usize),
    w: &[f64],
    o: usize,
    k: usize,
    off: isize,
    depthwise: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for bi in 0..b {
        for oi in 0..o {
            let gr = &g[(bi * o + oi) * t..(bi * o + oi + 1) * t];
            let chans: Box<dyn Iterator<Item = usize>> =
                if depthwise { Box::new(std::iter::once(oi)) } else { Box::new(0..c) };
            for ci in chans {
                let xoff = (bi * c + ci) * t;
                let woff = if depthwise { ci * k } else { (oi * c + ci) * k };
                for j in 0..k {
                    let wv = w[woff + j];
                    let (lo, hi) = tap_range(j, off, t);
                    let mut acc = 0.0;
                    #[allow(clippy::needless_range_loop)]
                    for ti in lo..hi {
                        let s = (ti as isize + off) as usize - j;
                        dx[xoff + s] += gr[ti] * wv;
                        acc += gr[ti] * x[xoff + s];
                    }
                    dw[woff + j] += acc;
                }
            }
        }
    }
    (dx, dw)
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn mm_nt(out: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn mm_tn(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
