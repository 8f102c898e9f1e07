//! Gaussian and sigmoid masks with a hard threshold, their support boundaries and
//! differentiable sizes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default hard threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// `exp(-½ (x − μ)² / σ²)`, parameter `σ²`.
    Gaussian,
    /// `1 − sigmoid(τ (x − μ))` with fixed steepness `τ`.
    Sigmoid,
}

/// A one-axis differentiable mask.
#[derive(Clone, Debug)]
pub struct Mask {
    pub kind: MaskKind,
    pub mu: ParamId,
    /// `σ²` for Gaussian masks; unused for sigmoid masks.
    pub sigma2: Option<ParamId>,
    pub tau: f64,
    pub threshold: f64,
    /// Reference size at construction.
    pub n_ref: f64,
    /// Reference boundary at construction: half-width for Gaussians, `x_Tm` for sigmoids.
    pub x0: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Grid spacing of the masked axis.
    pub spacing: f64,
    /// Multiply by the `value ≥ T_m` indicator during evaluation.
    pub threshold_in_value: bool,
}

/// `√(−2 ln T_m)`: Gaussian half-width per unit σ.
fn gauss_width_factor(t: f64) -> f64 {
    (-2.0 * t.ln()).sqrt()
}

/// `ln(1/(1−T_m) − 1)`; sigmoid boundary is `μ − (1/τ)·this`.
fn sigmoid_offset(t: f64) -> f64 {
    (1.0 / (1.0 - t) - 1.0).ln()
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(config_err!("mask threshold must lie in (0, 1), got {t}"));
    }
    Ok(())
}

impl Mask {
    /// Gaussian mask whose analytic size equals `n` points of spacing `spacing` at init.
    /// Centred at `mu`; the centre trains only when `learn_mu`.
    pub fn gaussian_with_size(
        store: &mut ParamStore,
        name: &str,
        n: f64,
        spacing: f64,
        mu: f64,
        threshold: f64,
        learn_mu: bool,
    ) -> Result<Self> {
        check_threshold(threshold)?;
        if !(n > 0.0 && spacing > 0.0) {
            return Err(config_err!("mask size and spacing must be positive"));
        }
        let x0 = n * spacing / 2.0;
        let sigma = x0 / gauss_width_factor(threshold);
        Ok(Self::gaussian_raw(store, name, mu, sigma * sigma, x0, n, spacing, threshold, learn_mu))
    }

    /// Gaussian mask from an initial variance; the reference size is the implied point count.
    pub fn gaussian_with_variance(
        store: &mut ParamStore,
        name: &str,
        sigma2: f64,
        spacing: f64,
        mu: f64,
        threshold: f64,
        learn_mu: bool,
    ) -> Result<Self> {
        check_threshold(threshold)?;
        if !(sigma2 > 0.0 && spacing > 0.0) {
            return Err(config_err!("mask variance and spacing must be positive"));
        }
        let x0 = sigma2.sqrt() * gauss_width_factor(threshold);
        let n = 2.0 * x0 / spacing;
        Ok(Self::gaussian_raw(store, name, mu, sigma2, x0, n, spacing, threshold, learn_mu))
    }

    #[allow(clippy::too_many_arguments)]
    fn gaussian_raw(
        store: &mut ParamStore,
        name: &str,
        mu: f64,
        sigma2: f64,
        x0: f64,
        n: f64,
        spacing: f64,
        threshold: f64,
        learn_mu: bool,
    ) -> Self {
        let mu_group = if learn_mu { Group::Mask } else { Group::Frozen };
        Self {
            kind: MaskKind::Gaussian,
            mu: store.add(format!("{name}.mu"), Tensor::scalar(mu), mu_group),
            sigma2: Some(store.add(format!("{name}.sigma2"), Tensor::scalar(sigma2), Group::Mask)),
            tau: 0.0,
            threshold,
            n_ref: n,
            x0,
            x_min: -1.0,
            x_max: 1.0,
            spacing,
            threshold_in_value: true,
        }
    }

    /// Sigmoid mask over `n_max` cells of the unit axis whose analytic size is `n` at init.
    /// Cell `i` sits at `(i + ½)/n_max`.
    pub fn sigmoid_with_size(
        store: &mut ParamStore,
        name: &str,
        n: f64,
        n_max: usize,
        tau: f64,
        threshold: f64,
    ) -> Result<Self> {
        check_threshold(threshold)?;
        if !(tau > 0.0) || n_max == 0 || !(n > 0.0) || n > n_max as f64 {
            return Err(config_err!("sigmoid mask needs tau > 0 and 0 < n ≤ n_max (n={n}, n_max={n_max}, tau={tau})"));
        }
        let spacing = 1.0 / n_max as f64;
        let x0 = n * spacing;
        let mu = x0 + sigmoid_offset(threshold) / tau;
        let m = Self {
            kind: MaskKind::Sigmoid,
            mu: store.add(format!("{name}.mu"), Tensor::scalar(mu), Group::Mask),
            sigma2: None,
            tau,
            threshold,
            n_ref: n,
            x0,
            x_min: 0.0,
            x_max: 1.0,
            spacing,
            threshold_in_value: true,
        };
        let (lo, hi) = m.mu_bounds();
        if mu < lo || mu > hi {
            return Err(config_err!(
                "sigmoid mask {name}: initial centre {mu:.4} outside [{lo:.4}, {hi:.4}]; increase tau or the base size"
            ));
        }
        Ok(m)
    }

    /// Cell coordinates of a sigmoid axis, or the grid for a Gaussian axis of `n` points.
    pub fn axis_coords(&self, n: usize) -> Vec<f64> {
        match self.kind {
            MaskKind::Sigmoid => (0..n).map(|i| self.x_min + (i as f64 + 0.5) * self.spacing).collect(),
            MaskKind::Gaussian => crate::fields::linspace(n),
        }
    }

    /// `[μ_lo, μ_hi]` for sigmoid masks: value 0.95 at `x_min` and 0.85 at `x_max`.
    pub fn mu_bounds(&self) -> (f64, f64) {
        match self.kind {
            MaskKind::Sigmoid => (
                self.x_min + 19f64.ln() / self.tau,
                self.x_max + (0.85f64 / 0.15).ln() / self.tau,
            ),
            MaskKind::Gaussian => (self.x_min, self.x_max),
        }
    }

    /// Smallest `σ²` keeping at least two grid points inside the support.
    pub fn sigma2_floor(&self) -> f64 {
        let w = self.spacing / gauss_width_factor(self.threshold);
        w * w
    }

    /// Unthresholded mask value at `x` (any shape).
    pub fn raw<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let d = x.sub(p.get(self.mu))?;
        match self.kind {
            MaskKind::Gaussian => Ok(d.square().div(p.get(self.sigma2.expect("gaussian")).scale(-2.0))?.exp()),
            MaskKind::Sigmoid => Ok(d.scale(-self.tau).sigmoid()),
        }
    }

    /// Mask value, zeroed below the threshold when `threshold_in_value`.
    pub fn eval<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let m = self.raw(p, x)?;
        if !self.threshold_in_value {
            return Ok(m);
        }
        let keep = m.with_value(|v| v.map(|a| if a >= self.threshold { 1.0 } else { 0.0 }));
        m.mul(p.tape().constant(keep))
    }

    /// Half-width `√(−2σ² ln T_m)` of a Gaussian support.
    pub fn half_width<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        match self.sigma2 {
            Some(s) => Ok(p.get(s).sqrt().scale(gauss_width_factor(self.threshold))),
            None => Err(crate::Error::Contract("half-width is defined for Gaussian masks only".into())),
        }
    }

    /// Support boundary `x_Tm`. Gaussian: `(μ − w, μ + w)`; sigmoid: both entries equal.
    pub fn boundary<'t>(&self, p: &Bound<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mu = p.get(self.mu);
        match self.kind {
            MaskKind::Gaussian => {
                let w = self.half_width(p)?;
                Ok((mu.sub(w)?, mu.add(w)?))
            }
            MaskKind::Sigmoid => {
                let b = mu.add_scalar(-sigmoid_offset(self.threshold) / self.tau);
                Ok((b, b))
            }
        }
    }

    /// Differentiable size relative to the reference boundary.
    pub fn size<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        match self.kind {
            MaskKind::Gaussian => Ok(self.half_width(p)?.scale(self.n_ref / self.x0)),
            MaskKind::Sigmoid => {
                let (b, _) = self.boundary(p)?;
                Ok(b.add_scalar(-self.x_min).scale(self.n_ref / (self.x0 - self.x_min)))
            }
        }
    }

    pub fn size_value(&self, store: &ParamStore) -> f64 {
        let tape = Tape::new();
        self.size(&store.bind_constant(&tape)).expect("mask parameters are scalars").item()
    }

    pub fn boundary_value(&self, store: &ParamStore) -> (f64, f64) {
        let tape = Tape::new();
        let (a, b) = self.boundary(&store.bind_constant(&tape)).expect("mask parameters are scalars");
        (a.item(), b.item())
    }

    /// Mask values at plain coordinates, without recording gradients.
    pub fn eval_value(&self, store: &ParamStore, coords: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let x = tape.constant(Tensor::vector(coords.to_vec()));
        self.eval(&p, x).expect("vector coordinates").value().into_data()
    }

    /// Number of coordinates with an unthresholded value at or above `T_m`.
    pub fn support_count(&self, store: &ParamStore, coords: &[f64]) -> usize {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let x = tape.constant(Tensor::vector(coords.to_vec()));
        let v = self.raw(&p, x).expect("vector coordinates").value();
        v.data().iter().filter(|&&a| a >= self.threshold).count()
    }

    /// Indices `[lo, hi)` of `coords` (sorted) whose mask value is at or above `T_m`.
    pub fn support_range(&self, store: &ParamStore, coords: &[f64]) -> (usize, usize) {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let x = tape.constant(Tensor::vector(coords.to_vec()));
        let v = self.raw(&p, x).expect("vector coordinates").value();
        let inside: Vec<usize> = (0..coords.len()).filter(|&i| v.data()[i] >= self.threshold).collect();
        match (inside.first(), inside.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => (0, 0),
        }
    }

    /// Clamp parameters into their invariant region. No-op when already inside.
    pub fn project(&self, store: &mut ParamStore) {
        let (lo, hi) = self.mu_bounds();
        let mu = store.get(self.mu).item();
        let clamped = mu.clamp(lo, hi);
        if clamped != mu {
            store.set(self.mu, Tensor::scalar(clamped));
        }
        if let Some(s) = self.sigma2 {
            let v = store.get(s).item();
            let floor = self.sigma2_floor();
            if v < floor {
                store.set(s, Tensor::scalar(floor));
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.mu];
        v.extend(self.sigma2);
        v
    }
}

/// `min(size, N_max)` forward; gradient passes unchanged.
pub fn clip_size_straight_through<'t>(size: Var<'t>, n_max: f64) -> Result<Var<'t>> {
    if !(n_max >= 1.0) {
        return Err(config_err!("clip cap must be at least 1, got {n_max}"));
    }
    Ok(size.clip_max_straight_through(n_max))
}

/// Product of per-axis masks over `coords` `[P, D]`; `masks[d]` acts on column `d`.
pub fn eval_product<'t>(masks: &[Mask], p: &Bound<'t>, coords: Var<'t>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (d, m) in masks.iter().enumerate() {
        let v = m.eval(p, coords.slice(1, d, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.mul(v)?,
            None => v,
        });
    }
    acc.ok_or_else(|| config_err!("product mask needs at least one axis"))
}


/// Plain-number counterpart of [`clip_size_straight_through`].
pub fn clip_value(size: f64, n_max: f64) -> f64 {
    size.min(n_max)
}
