use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum relative error between the tape gradient of `f` at `x` and central differences.
///
/// Per coordinate: `|analytic − fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let y = f(&tape, v)?.item();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite ({y})")));
        }
        Ok(y)
    };
    eval(x)?;
    let analytic = {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let y = f(&tape, v)?;
        tape.backward(y)?.wrt(v)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}
