//! Neural-field kernel generators: coordinate networks mapping positions in `[-1, 1]^D`
//! to `N_out × N_in` kernel values.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvMode, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::rng::{normal, seeded, uniform};
use crate::tensor::Tensor;

/// Scale applied to MAGNet filter weights on top of the envelope-matched Gamma draw.
pub const MAGNET_FILTER_SCALE: f64 = 25.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldVariant {
    SineMlp {
        #[serde(default = "default_omega0")]
        omega0: f64,
    },
    Magnet {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    FourierFeature {
        #[serde(default = "default_ff_scale")]
        omega0: f64,
    },
    PiecewiseMlp {
        activation: Activation,
    },
}

fn default_omega0() -> f64 {
    30.0
}
fn default_alpha() -> f64 {
    6.0
}
fn default_beta() -> f64 {
    1.0
}
fn default_ff_scale() -> f64 {
    1.0
}

/// Static description of a field; the parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub variant: FieldVariant,
    /// Number of layers. For MAGNet this counts Gabor filters.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_in_dim")]
    pub in_dim: usize,
    pub out_channels: usize,
    pub in_channels: usize,
    #[serde(default)]
    pub weight_norm: bool,
}

fn default_layers() -> usize {
    3
}
fn default_hidden() -> usize {
    32
}
fn default_in_dim() -> usize {
    1
}

impl FieldSpec {
    pub fn siren(out_channels: usize, in_channels: usize, omega0: f64) -> Self {
        Self {
            variant: FieldVariant::SineMlp { omega0 },
            layers: 3,
            hidden: 32,
            in_dim: 1,
            out_channels,
            in_channels,
            weight_norm: false,
        }
    }

    pub fn magnet(out_channels: usize, in_channels: usize) -> Self {
        Self {
            variant: FieldVariant::Magnet { alpha: 6.0, beta: 1.0 },
            layers: 3,
            hidden: 32,
            in_dim: 1,
            out_channels,
            in_channels,
            weight_norm: false,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_channels * self.in_channels
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_channels == 0 || self.in_channels == 0 {
            return Err(config_err!("field widths must be positive"));
        }
        if !(1..=2).contains(&self.in_dim) {
            return Err(config_err!("field input dimension must be 1 or 2, got {}", self.in_dim));
        }
        match self.variant {
            FieldVariant::SineMlp { omega0 } => {
                if self.layers < 2 {
                    return Err(config_err!("SineMLP needs at least 2 layers, got {}", self.layers));
                }
                if !(omega0 > 0.0) {
                    return Err(config_err!("omega0 must be positive, got {omega0}"));
                }
            }
            FieldVariant::Magnet { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0) {
                    return Err(config_err!("MAGNet Gamma parameters must be positive (alpha={alpha}, beta={beta})"));
                }
                if self.layers < 1 {
                    return Err(config_err!("MAGNet needs at least 1 layer"));
                }
            }
            FieldVariant::FourierFeature { omega0 } => {
                if !(omega0 > 0.0) {
                    return Err(config_err!("Fourier-feature scale must be positive, got {omega0}"));
                }
                if self.layers < 1 {
                    return Err(config_err!("Fourier-feature field needs at least 1 layer"));
                }
            }
            FieldVariant::PiecewiseMlp { .. } => {
                if self.layers < 2 {
                    return Err(config_err!("piecewise MLP needs at least 2 layers"));
                }
            }
        }
        Ok(())
    }
}

/// Affine map `x Wᵀ + b`, optionally weight-normalized per output row.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Weight,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug)]
enum Weight {
    Plain(ParamId),
    /// `W = g · V / ‖V‖` row-wise; `g` is `[out, 1]`.
    Normed { v: ParamId, g: ParamId },
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor, weight_norm: bool) -> Self {
        let (out_features, in_features) = (w.shape()[0], w.shape()[1]);
        let weight = if weight_norm {
            let norms = row_norms(&w);
            let g = Tensor::new(&[out_features, 1], norms).expect("row count matches");
            Weight::Normed {
                v: store.add(format!("{name}.v"), w, Group::Main),
                g: store.add(format!("{name}.g"), g, Group::Main),
            }
        } else {
            Weight::Plain(store.add(format!("{name}.w"), w, Group::Main))
        };
        let bias = store.add(format!("{name}.b"), b, Group::Main);
        Self { weight, bias, in_features, out_features }
    }

    /// Effective weight `[out, in]`.
    pub fn weight<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        match &self.weight {
            Weight::Plain(w) => Ok(p.get(*w)),
            Weight::Normed { v, g } => {
                let v = p.get(*v);
                let norm = v.square().sum_axis(1)?.sqrt();
                v.div(norm)?.mul(p.get(*g))
            }
        }
    }

    /// Stored weight tensor: the weight itself, or its direction when normalized.
    pub fn weight_id(&self) -> ParamId {
        match &self.weight {
            Weight::Plain(w) => *w,
            Weight::Normed { v, .. } => *v,
        }
    }

    /// Effective weight as a plain tensor.
    pub fn weight_value(&self, store: &ParamStore) -> Tensor {
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        self.weight(&b).expect("stored shapes are consistent").value()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.weight(p)?;
        x.matmul(w.t()?)?.add(p.get(self.bias))
    }

    /// Multiply the effective weight and bias by `factor`.
    pub fn scale_output(&self, store: &mut ParamStore, factor: f64) {
        let id = match &self.weight {
            Weight::Plain(w) => *w,
            Weight::Normed { g, .. } => *g,
        };
        let w = store.get(id).scale(factor);
        store.set(id, w);
        let b = store.get(self.bias).scale(factor);
        store.set(self.bias, b);
    }

    /// Ids of every stored tensor of this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.weight {
            Weight::Plain(w) => vec![*w, self.bias],
            Weight::Normed { v, g } => vec![*v, *g, self.bias],
        }
    }
}

fn row_norms(w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// One anisotropic Gabor filter bank: `exp(-½ Σ_d (γ_d (x_d − μ_d))²) · sin(W_g x + b_g)`.
#[derive(Clone, Debug)]
pub struct GaborLayer {
    /// `[D, N_hid]`
    pub gamma: ParamId,
    /// `[D, N_hid]`
    pub mu: ParamId,
    /// `[N_hid, D]` weights and `[N_hid]` phases.
    pub filter: Linear,
}

impl GaborLayer {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let d = x.shape()[1];
        let (gamma, mu) = (p.get(self.gamma), p.get(self.mu));
        let mut quad: Option<Var<'t>> = None;
        for i in 0..d {
            let xi = x.slice(1, i, 1)?;
            let z = xi.sub(mu.slice(0, i, 1)?)?.mul(gamma.slice(0, i, 1)?)?.square();
            quad = Some(match quad {
                Some(q) => q.add(z)?,
                None => z,
            });
        }
        let envelope = quad.expect("at least one input dimension").scale(-0.5).exp();
        envelope.mul(self.filter.forward(p, x)?.sin())
    }
}

#[derive(Clone, Debug)]
enum Body {
    Sine { layers: Vec<Linear>, omega0: f64 },
    Magnet { gabors: Vec<GaborLayer>, hidden: Vec<Linear>, out: Linear },
    Fourier { proj: ParamId, omega0: f64, layers: Vec<Linear> },
    Piecewise { layers: Vec<Linear>, activation: Activation },
}

/// A neural-field kernel generator.
#[derive(Clone, Debug)]
pub struct KernelField {
    pub spec: FieldSpec,
    body: Body,
}

fn uniform_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    (out_f, in_f): (usize, usize),
    w_bound: f64,
    b_bound: f64,
    weight_norm: bool,
) -> Linear {
    let w = uniform(rng, &[out_f, in_f], -w_bound, w_bound);
    let b = if b_bound > 0.0 { uniform(rng, &[out_f], -b_bound, b_bound) } else { Tensor::zeros(&[out_f]) };
    Linear::new(store, name, w, b, weight_norm)
}

impl KernelField {
    /// Build a field from its spec, registering parameters under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, spec: FieldSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let (d, h, out, wn) = (spec.in_dim, spec.hidden, spec.out_dim(), spec.weight_norm);
        let body = match spec.variant {
            FieldVariant::SineMlp { omega0 } => {
                let mut layers = Vec::with_capacity(spec.layers);
                for l in 0..spec.layers {
                    let name = format!("{prefix}.l{l}");
                    let last = l + 1 == spec.layers;
                    let in_f = if l == 0 { d } else { h };
                    let out_f = if last { out } else { h };
                    let bound = if l == 0 { 1.0 / d as f64 } else { (6.0 / h as f64).sqrt() / omega0 };
                    let w = uniform(&mut rng, &[out_f, in_f], -bound, bound);
                    let b = if last {
                        Tensor::zeros(&[out_f])
                    } else {
                        let norms = row_norms(&w);
                        Tensor::vector(
                            norms
                                .iter()
                                .map(|n| {
                                    let r = PI / n.max(1e-12);
                                    rng.gen_range(-r..=r)
                                })
                                .collect(),
                        )
                    };
                    layers.push(Linear::new(store, &name, w, b, wn));
                }
                Body::Sine { layers, omega0 }
            }
            FieldVariant::Magnet { alpha, beta } => {
                let mut gabors = Vec::with_capacity(spec.layers);
                let mut hidden = Vec::with_capacity(spec.layers.saturating_sub(1));
                for l in 1..=spec.layers {
                    let dist = Gamma::new(alpha / l as f64, 1.0 / beta).map_err(|e| config_err!("{e}"))?;
                    let g = Tensor::from_fn(&[d, h], |_| dist.sample(&mut rng));
                    let mu = uniform(&mut rng, &[d, h], -1.0, 1.0);
                    let fb = 1.0 / (d as f64).sqrt();
                    let w = Tensor::from_fn(&[h, d], |idx| {
                        let (i, j) = (idx / d, idx % d);
                        MAGNET_FILTER_SCALE * g.at(&[j, i]).sqrt() * rng.gen_range(-fb..fb)
                    });
                    let b = uniform(&mut rng, &[h], -PI, PI);
                    let name = format!("{prefix}.g{l}");
                    let gamma = store.add(format!("{name}.gamma"), g, Group::Main);
                    let mu = store.add(format!("{name}.mu"), mu, Group::Main);
                    let filter = Linear::new(store, &format!("{name}.filter"), w, b, false);
                    gabors.push(GaborLayer { gamma, mu, filter });
                    if l > 1 {
                        let bound = 1.0 / (h as f64).sqrt();
                        hidden.push(uniform_linear(store, &mut rng, &format!("{prefix}.h{l}"), (h, h), bound, bound, wn));
                    }
                }
                let bound = 1.0 / (h as f64).sqrt();
                let out = uniform_linear(store, &mut rng, &format!("{prefix}.out"), (out, h), bound, 0.0, wn);
                Body::Magnet { gabors, hidden, out }
            }
            FieldVariant::FourierFeature { omega0 } => {
                let m = h.div_ceil(2);
                let proj = store.add(format!("{prefix}.proj"), normal(&mut rng, &[m, d], 1.0), Group::Frozen);
                let mut layers = Vec::with_capacity(spec.layers);
                for l in 0..spec.layers {
                    let in_f = if l == 0 { 2 * m } else { h };
                    let last = l + 1 == spec.layers;
                    let out_f = if last { out } else { h };
                    let bound = 1.0 / (in_f as f64).sqrt();
                    let bb = if last { 0.0 } else { bound };
                    layers.push(uniform_linear(store, &mut rng, &format!("{prefix}.l{l}"), (out_f, in_f), bound, bb, wn));
                }
                Body::Fourier { proj, omega0, layers }
            }
            FieldVariant::PiecewiseMlp { activation } => {
                let mut layers = Vec::with_capacity(spec.layers);
                for l in 0..spec.layers {
                    let in_f = if l == 0 { d } else { h };
                    let last = l + 1 == spec.layers;
                    let out_f = if last { out } else { h };
                    let bound = 1.0 / (in_f as f64).sqrt();
                    let bb = if last { 0.0 } else { bound };
                    layers.push(uniform_linear(store, &mut rng, &format!("{prefix}.l{l}"), (out_f, in_f), bound, bb, wn));
                }
                Body::Piecewise { layers, activation }
            }
        };
        Ok(Self { spec, body })
    }

    /// Raw evaluation: `coords` `[P, D]` to `[P, N_out·N_in]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, coords: Var<'t>) -> Result<Var<'t>> {
        let s = coords.shape();
        if s.len() != 2 || s[1] != self.spec.in_dim {
            return Err(Error::Contract(format!(
                "field expects coordinates [P, {}], got {:?}",
                self.spec.in_dim, s
            )));
        }
        match &self.body {
            Body::Sine { layers, omega0 } => {
                let mut h = coords;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(p, h)?;
                    if i + 1 < layers.len() {
                        h = h.scale(*omega0).sin();
                    }
                }
                Ok(h)
            }
            Body::Magnet { gabors, hidden, out } => {
                let mut h = gabors[0].forward(p, coords)?;
                for (g, lin) in gabors[1..].iter().zip(hidden) {
                    h = lin.forward(p, h)?.mul(g.forward(p, coords)?)?;
                }
                out.forward(p, h)
            }
            Body::Fourier { proj, omega0, layers } => {
                let z = coords.matmul(p.get(*proj).t()?)?.scale(2.0 * PI * omega0);
                let mut h = crate::autodiff::concat(&[z.cos(), z.sin()], 1)?;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(p, h)?;
                    if i + 1 < layers.len() {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
            Body::Piecewise { layers, activation } => {
                let mut h = coords;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(p, h)?;
                    if i + 1 < layers.len() {
                        h = match activation {
                            Activation::Relu => h.relu(),
                            Activation::Swish => h.swish()?,
                        };
                    }
                }
                Ok(h)
            }
        }
    }

    /// Evaluate on a grid: `[|grid|, N_out, N_in]`.
    pub fn eval<'t>(&self, p: &Bound<'t>, grid: &CoordGrid) -> Result<Var<'t>> {
        if grid.dims != self.spec.in_dim {
            return Err(Error::Contract(format!(
                "grid has {} dims, field expects {}",
                grid.dims, self.spec.in_dim
            )));
        }
        let coords = p.tape().constant(grid.points.clone());
        self.forward(p, coords)?.reshape(&[grid.len(), self.spec.out_channels, self.spec.in_channels])
    }

    /// Evaluate without recording gradients.
    pub fn eval_value(&self, store: &ParamStore, grid: &CoordGrid) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        Ok(self.eval(&p, grid)?.value())
    }

    pub fn final_layer(&self) -> &Linear {
        match &self.body {
            Body::Sine { layers, .. } | Body::Fourier { layers, .. } | Body::Piecewise { layers, .. } => {
                layers.last().expect("validated depth")
            }
            Body::Magnet { out, .. } => out,
        }
    }

    /// Gabor layers; empty for non-MAGNet variants.
    pub fn gabor_layers(&self) -> &[GaborLayer] {
        match &self.body {
            Body::Magnet { gabors, .. } => gabors,
            _ => &[],
        }
    }

    pub fn is_magnet(&self) -> bool {
        matches!(self.body, Body::Magnet { .. })
    }

    /// Ids of every tensor owned by the field.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |ls: &[Linear]| ls.iter().flat_map(|l| l.param_ids()).collect::<Vec<_>>();
        match &self.body {
            Body::Sine { layers, .. } | Body::Piecewise { layers, .. } => lin(layers),
            Body::Fourier { proj, layers, .. } => {
                let mut v = vec![*proj];
                v.extend(lin(layers));
                v
            }
            Body::Magnet { gabors, hidden, out } => {
                let mut v = Vec::new();
                for g in gabors {
                    v.extend([g.gamma, g.mu]);
                    v.extend(g.filter.param_ids());
                }
                v.extend(lin(hidden));
                v.extend(out.param_ids());
                v
            }
        }
    }

    /// Multiply the last linear layer by `gain² / √(N_in · K)` and return the factor.
    pub fn rescale_output_variance(&self, store: &mut ParamStore, n_in: usize, k: usize, gain: f64) -> Result<f64> {
        if k == 0 || n_in == 0 {
            return Err(config_err!("variance rescale needs N_in ≥ 1 and K ≥ 1 (got {n_in}, {k})"));
        }
        let factor = gain * gain / ((n_in * k) as f64).sqrt();
        self.final_layer().scale_output(store, factor);
        Ok(factor)
    }

    /// Keep envelope precisions strictly positive after an update.
    pub fn project(&self, store: &mut ParamStore) {
        for g in self.gabor_layers() {
            let t = store.get_mut(g.gamma);
            t.data_mut().iter_mut().for_each(|v| *v = v.max(GAMMA_FLOOR));
        }
    }
}

/// Lower bound kept on MAGNet envelope precisions.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// A regular coordinate grid in `[-1, 1]^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    pub dims: usize,
    /// Points per axis.
    pub per_axis: usize,
    /// `[N^D, D]` row-major Cartesian product.
    pub points: Tensor,
    pub mode: ConvMode,
}

impl CoordGrid {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spacing between neighbouring points along an axis (2 for a single point).
    pub fn spacing(&self) -> f64 {
        if self.per_axis > 1 {
            2.0 / (self.per_axis - 1) as f64
        } else {
            2.0
        }
    }
}

/// `N` evenly spaced values from -1 to 1, or `[0]` for a single point.
pub fn linspace(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Regular grid with `n` points per axis on `[-1, 1]^dims`.
pub fn coord_grid(n: usize, dims: usize, mode: ConvMode) -> Result<CoordGrid> {
    if n == 0 || !(1..=2).contains(&dims) {
        return Err(config_err!("grid needs n ≥ 1 and 1 ≤ D ≤ 2 (n={n}, D={dims})"));
    }
    let axis = linspace(n);
    let data: Vec<f64> = if dims == 1 {
        axis
    } else {
        axis.iter().flat_map(|&a| axis.iter().flat_map(move |&b| [a, b])).collect()
    };
    let points = Tensor::new(&[n.pow(dims as u32), dims], data)?;
    Ok(CoordGrid { dims, per_axis: n, points, mode })
}

/// A 1-D grid from explicit coordinates (must lie in `[-1, 1]` and increase strictly).
pub fn grid_from_coords(coords: Vec<f64>, mode: ConvMode) -> Result<CoordGrid> {
    if coords.is_empty() {
        return Err(config_err!("empty coordinate list"));
    }
    if coords.iter().any(|c| !(-1.0 - 1e-12..=1.0 + 1e-12).contains(c)) {
        return Err(config_err!("coordinates must lie in [-1, 1]"));
    }
    if coords.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config_err!("coordinates must increase strictly"));
    }
    let n = coords.len();
    Ok(CoordGrid { dims: 1, per_axis: n, points: Tensor::new(&[n, 1], coords)?, mode })
}
