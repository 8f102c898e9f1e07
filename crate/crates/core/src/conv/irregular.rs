use crate::autodiff::{ConvMode, Var};
use crate::error::{config_err, Result};
use crate::fields::KernelField;
use crate::params::Bound;
use crate::tensor::Tensor;

/// Irregularly spaced observations of a `C`-channel signal.
#[derive(Clone, Debug, PartialEq)]
pub struct IrregularSamples {
    pub times: Vec<f64>,
    /// `[C, n]`.
    pub values: Tensor,
    /// Quadrature weight per sample, all positive.
    pub weights: Vec<f64>,
}

impl IrregularSamples {
    pub fn new(times: Vec<f64>, values: Tensor, weights: Vec<f64>) -> Result<Self> {
        let n = times.len();
        if values.rank() != 2 || values.shape()[1] != n || weights.len() != n {
            return Err(config_err!(
                "irregular samples: {n} times, values {:?}, {} weights",
                values.shape(),
                weights.len()
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(config_err!("sample weights must be positive"));
        }
        Ok(Self { times, values, weights })
    }
}

/// Weights from half the distance between neighbours; endpoints use their single gap.
/// A simple density heuristic, not an estimator with guarantees.
pub fn nearest_gap_weights(times: &[f64]) -> Result<Vec<f64>> {
    let n = times.len();
    if n < 2 {
        return Err(config_err!("gap weights need at least two samples"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config_err!("sample times must increase strictly"));
    }
    Ok((0..n)
        .map(|i| match i {
            0 => times[1] - times[0],
            _ if i == n - 1 => times[n - 1] - times[n - 2],
            _ => (times[i + 1] - times[i - 1]) / 2.0,
        })
        .collect())
}

/// Kernel coordinate of a time offset, or `None` outside the kernel support.
fn offset_coord(delta: f64, horizon: f64, mode: ConvMode) -> Option<f64> {
    let c = match mode {
        ConvMode::Causal => -1.0 + 2.0 * delta / horizon,
        ConvMode::Centered => delta / (horizon / 2.0),
    };
    const EPS: f64 = 1e-12;
    (-1.0 - EPS..=1.0 + EPS).contains(&c).then(|| c.clamp(-1.0, 1.0))
}

/// `out[o, q] = Σ_i s_i Σ_c x_c(τ_i) ψ_{o,c}(t_q − τ_i)` with the field evaluated at exact
/// offsets. `horizon` is the time span covered by the kernel. Output `[O, Q]`.
pub fn conv_irregular<'t>(
    samples: &IrregularSamples,
    field: &KernelField,
    p: &Bound<'t>,
    horizon: f64,
    mode: ConvMode,
    queries: &[f64],
) -> Result<Var<'t>> {
    if !(horizon > 0.0) {
        return Err(config_err!("kernel horizon must be positive"));
    }
    let (o, c) = (field.spec.out_channels, field.spec.in_channels);
    if samples.values.shape()[0] != c {
        return Err(config_err!("samples carry {} channels, field expects {c}", samples.values.shape()[0]));
    }
    if queries.is_empty() {
        return Err(config_err!("no query times"));
    }
    let n = samples.times.len();
    let (mut coords, mut weighted, mut owner) = (Vec::new(), Vec::new(), Vec::new());
    for (q, &t) in queries.iter().enumerate() {
        for i in 0..n {
            if let Some(u) = offset_coord(t - samples.times[i], horizon, mode) {
                coords.push(u);
                owner.push(q);
                weighted.extend((0..c).map(|ch| samples.weights[i] * samples.values.at(&[ch, i])));
            }
        }
    }
    let tape = p.tape();
    let nq = queries.len();
    if coords.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[o, nq])));
    }
    let np = coords.len();
    let psi = field.forward(p, tape.constant(Tensor::new(&[np, 1], coords)?))?.reshape(&[np, o, c])?;
    let xs = tape.constant(Tensor::new(&[np, 1, c], weighted)?);
    let per_pair = psi.mul(xs)?.sum_axis(2)?.reshape(&[np, o])?;
    let mut scatter = vec![0.0; nq * np];
    for (pi, &q) in owner.iter().enumerate() {
        scatter[q * np + pi] = 1.0;
    }
    tape.constant(Tensor::new(&[nq, np], scatter)?).matmul(per_pair)?.t()
}
