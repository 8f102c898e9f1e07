//! Residual continuous-kernel networks.

use serde::{Deserialize, Serialize};

use crate::archmask::{
    depth_mask_apply, width_mask_apply, ArchConfig, ArchMasks, ArchSnapshot, BlockSnapshot,
};
use crate::autodiff::{ConvMode, Var};
use crate::conv::{
    conv_with_path, pointwise, sample_kernel, spectral_resample, ConvPath, ConvPlan,
};
use crate::error::{config_err, Result};
use crate::fields::{FieldSpec, FieldVariant, KernelField};
use crate::masks::{Mask, DEFAULT_THRESHOLD};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::rng::{substream, uniform};
use crate::spectral::{alias_loss, AliasMode, FrequencyBudget, DEFAULT_SIGMA_CUT};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per time step over channels, with learned gain and bias.
    #[default]
    Layer,
    /// Per channel over batch and time, current-batch statistics only.
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockActivation {
    #[default]
    Gelu,
    Relu,
}

/// Where the closing nonlinearity of a block sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndActivation {
    /// After the residual sum.
    #[default]
    AfterResidual,
    /// Inside the residual branch, so a zero branch weight leaves the block an identity.
    OnBranch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    PerStep,
    LastStep,
    Mean,
}

/// Gaussian size mask on the kernel axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexMaskConfig {
    /// Initial support as a fraction of the kernel length.
    #[serde(default = "default_init_fraction")]
    pub init_fraction: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Mask centre; the lag-zero end for causal kernels and 0 for centered ones when absent.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_learn_mu")]
    pub learn_mu: bool,
}

fn default_learn_mu() -> bool {
    true
}

fn default_init_fraction() -> f64 {
    0.5
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub field: FieldVariant,
    #[serde(default = "default_field_layers")]
    pub layers: usize,
    #[serde(default = "default_field_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub weight_norm: bool,
    /// Kernel length; the sequence length when absent.
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default = "default_mode")]
    pub mode: ConvMode,
    #[serde(default)]
    pub path: ConvPath,
    #[serde(default)]
    pub mask: Option<FlexMaskConfig>,
    #[serde(default)]
    pub separable: bool,
    /// Gain of the output-variance rescale applied to each field.
    #[serde(default = "default_gain")]
    pub variance_gain: f64,
}

fn default_field_layers() -> usize {
    3
}
fn default_field_hidden() -> usize {
    32
}
fn default_mode() -> ConvMode {
    ConvMode::Causal
}
fn default_gain() -> f64 {
    1.0
}

impl KernelConfig {
    pub fn new(field: FieldVariant) -> Self {
        Self {
            field,
            layers: default_field_layers(),
            hidden: default_field_hidden(),
            weight_norm: false,
            size: None,
            mode: ConvMode::Causal,
            path: ConvPath::Auto,
            mask: None,
            separable: false,
            variance_gain: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden width; the channel cap when architecture masks are on.
    pub hidden: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub activation: BlockActivation,
    #[serde(default)]
    pub end_activation: EndActivation,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub arch: Option<ArchConfig>,
}

fn default_blocks() -> usize {
    2
}

impl BackboneConfig {
    pub fn new(in_channels: usize, out_channels: usize, hidden: usize, kernel: KernelConfig) -> Self {
        Self {
            in_channels,
            out_channels,
            hidden,
            blocks: 2,
            kernel,
            norm: NormKind::Layer,
            activation: BlockActivation::Gelu,
            end_activation: EndActivation::AfterResidual,
            readout: Readout::PerStep,
            arch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            return Err(config_err!("model channels must be positive"));
        }
        if self.blocks == 0 && self.arch.is_none() {
            return Err(config_err!("model.blocks must be at least 1"));
        }
        if let Some(a) = &self.arch {
            a.validate()?;
            if a.max_channels != self.hidden {
                return Err(config_err!(
                    "model.arch.max_channels ({}) must equal model.hidden ({})",
                    a.max_channels,
                    self.hidden
                ));
            }
            if self.end_activation != EndActivation::OnBranch {
                return Err(config_err!("depth masking needs model.end_activation = on_branch"));
            }
            if self.kernel.separable {
                return Err(config_err!("architecture masks expect dense kernels"));
            }
        }
        if let Some(m) = &self.kernel.mask {
            if !(m.init_fraction > 0.0 && m.init_fraction <= 1.0) {
                return Err(config_err!("model.kernel.mask.init_fraction must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        self.arch.as_ref().map_or(self.blocks, |a| a.max_depth)
    }
}

/// Pointwise layer `[O, C]` plus bias, PyTorch-style uniform init.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Pointwise {
    fn new(store: &mut ParamStore, name: &str, out: usize, inp: usize, seed: u64) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let mut rng = substream(seed, 0);
        let w = store.add(format!("{name}.w"), uniform(&mut rng, &[out, inp], -bound, bound), Group::Main);
        let b = store.add(format!("{name}.b"), uniform(&mut rng, &[out], -bound, bound), Group::Main);
        Self { w, b }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        pointwise(x, p.get(self.w), Some(p.get(self.b)))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// One residual block.
#[derive(Clone, Debug)]
pub struct Block {
    pub field: KernelField,
    pub mask: Option<Mask>,
    pub conv_bias: ParamId,
    /// Channel mix after a separable kernel.
    pub mix: Option<ParamId>,
    pub norm: Option<Norm>,
    pub pw: Pointwise,
    /// Fixed residual weight, used when depth is not masked.
    pub branch_scale: f64,
    /// Index of this block's architecture masks.
    pub arch_index: usize,
}

/// Per-block intermediate values of one forward pass.
pub struct Trace<'t> {
    /// Block inputs.
    pub inputs: Vec<Var<'t>>,
    /// Conv outputs before bias, at the block's evaluation rate and before any rate correction.
    pub conv_raw: Vec<Var<'t>>,
    pub hidden: Var<'t>,
    pub output: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub seq_len: usize,
    pub encoder: Pointwise,
    pub blocks: Vec<Block>,
    pub decoder: Pointwise,
    pub arch: Option<ArchMasks>,
    /// Residual branches weighted by the depth mask rather than `branch_scale`.
    pub depth_masked: bool,
}

/// Rate change applied at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deployment {
    /// Evaluation rate over training rate.
    pub factor: f64,
    /// Rescale conv outputs by the inverse factor.
    pub correct: bool,
}

impl Default for Deployment {
    fn default() -> Self {
        Self { factor: 1.0, correct: true }
    }
}

impl Backbone {
    /// Build a network for length-`seq_len` inputs. Every parameter is a pure function of
    /// `config` and `seed`.
    pub fn new(store: &mut ParamStore, config: BackboneConfig, seq_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if seq_len == 0 {
            return Err(config_err!("sequence length must be positive"));
        }
        let kc = &config.kernel;
        let k = kc.size.unwrap_or(seq_len);
        if k == 0 {
            return Err(config_err!("model.kernel.size must be positive"));
        }
        let n = config.hidden;
        let encoder = Pointwise::new(store, "enc", n, config.in_channels, substream(seed, 1).next_seed());
        let mut blocks = Vec::new();
        for l in 0..config.depth() {
            let (fo, fi) = if kc.separable { (n, 1) } else { (n, n) };
            let spec = FieldSpec {
                variant: kc.field.clone(),
                layers: kc.layers,
                hidden: kc.hidden,
                in_dim: 1,
                out_channels: fo,
                in_channels: fi,
                weight_norm: kc.weight_norm,
            };
            let bseed = substream(seed, 100 + l as u64).next_seed();
            let field = KernelField::new(store, &format!("b{l}.kernel"), spec, bseed)?;
            field.rescale_output_variance(store, if kc.separable { 1 } else { n }, k, kc.variance_gain)?;
            let mask = match &kc.mask {
                Some(m) => {
                    let spacing = 2.0 / (k.max(2) - 1) as f64;
                    let mu = m.mu.unwrap_or(match kc.mode {
                        ConvMode::Causal => -1.0,
                        ConvMode::Centered => 0.0,
                    });
                    Some(Mask::gaussian_with_size(
                        store,
                        &format!("b{l}.mask"),
                        m.init_fraction * k as f64,
                        spacing,
                        mu,
                        m.threshold,
                        m.learn_mu,
                    )?)
                }
                None => None,
            };
            let conv_bias = store.add(format!("b{l}.conv.b"), Tensor::zeros(&[n]), Group::Main);
            let mix = kc.separable.then(|| {
                let bound = 1.0 / (n as f64).sqrt();
                let w = uniform(&mut substream(bseed, 3), &[n, n], -bound, bound);
                store.add(format!("b{l}.mix"), w, Group::Main)
            });
            let norm = match config.norm {
                NormKind::None => None,
                _ => Some(Norm {
                    gain: store.add(format!("b{l}.norm.g"), Tensor::ones(&[n]), Group::Main),
                    bias: store.add(format!("b{l}.norm.b"), Tensor::zeros(&[n]), Group::Main),
                }),
            };
            let pw = Pointwise::new(store, &format!("b{l}.pw"), n, n, substream(bseed, 2).next_seed());
            blocks.push(Block { field, mask, conv_bias, mix, norm, pw, branch_scale: 1.0, arch_index: l });
        }
        let decoder = Pointwise::new(store, "dec", config.out_channels, n, substream(seed, 2).next_seed());
        let arch = match &config.arch {
            Some(a) => Some(ArchMasks::new(store, "arch", a, seq_len)?),
            None => None,
        };
        let depth_masked = arch.is_some();
        Ok(Self { config, seq_len, encoder, blocks, decoder, arch, depth_masked })
    }

    pub fn kernel_size(&self) -> usize {
        self.config.kernel.size.unwrap_or(self.seq_len)
    }

    pub fn plan(&self) -> ConvPlan {
        let kc = &self.config.kernel;
        let n = self.config.hidden;
        ConvPlan {
            mode: kc.mode,
            path: kc.path,
            kernel_size: self.kernel_size(),
            in_channels: n,
            out_channels: n,
            separable: kc.separable,
            sr_train: 1.0,
            sr_eval: 1.0,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_trace(p, store, x, Deployment::default())?.output)
    }

    /// Forward pass recording per-block values, optionally at a shifted sampling rate.
    pub fn forward_trace<'t>(
        &self,
        p: &Bound<'t>,
        store: &ParamStore,
        x: Var<'t>,
        deploy: Deployment,
    ) -> Result<Trace<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.in_channels {
            return Err(config_err!("input must be [B, {}, T], got {:?}", self.config.in_channels, s));
        }
        let mut h = self.encoder.forward(p, x)?;
        let (mut inputs, mut conv_raw) = (Vec::new(), Vec::new());
        let base_len = (self.seq_len as f64 * deploy.factor).round().max(1.0);
        for blk in &self.blocks {
            inputs.push(h);
            let rate = deploy.factor * h.shape()[2] as f64 / base_len;
            let (out, raw) = self.block_forward(blk, p, store, h, rate, deploy.correct)?;
            conv_raw.push(raw);
            h = out;
        }
        let y = self.decoder.forward(p, h)?;
        let output = match self.config.readout {
            Readout::PerStep => y,
            Readout::LastStep => {
                let t = y.shape()[2];
                let o = y.shape()[1];
                y.slice(2, t - 1, 1)?.reshape(&[y.shape()[0], o])?
            }
            Readout::Mean => y.mean_axis(2)?.reshape(&[y.shape()[0], y.shape()[1]])?,
        };
        Ok(Trace { inputs, conv_raw, hidden: h, output })
    }

    fn activation<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self.config.activation {
            BlockActivation::Gelu => x.gelu(),
            BlockActivation::Relu => x.relu(),
        }
    }

    fn normalize<'t>(&self, blk: &Block, p: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let Some(norm) = &blk.norm else { return Ok(y) };
        const EPS: f64 = 1e-5;
        let axes: &[usize] = match self.config.norm {
            NormKind::Layer => &[1],
            NormKind::Batch => &[0, 2],
            NormKind::None => return Ok(y),
        };
        let mut mean = y;
        for &a in axes {
            mean = mean.mean_axis(a)?;
        }
        let d = y.sub(mean)?;
        let mut var = d.square();
        for &a in axes {
            var = var.mean_axis(a)?;
        }
        let n = self.config.hidden;
        let z = d.div(var.add_scalar(EPS).sqrt())?;
        z.mul(p.get(norm.gain).reshape(&[1, n, 1])?)?.add(p.get(norm.bias).reshape(&[1, n, 1])?)
    }

    /// Sampled taps and shift of block `blk` at rate `factor` relative to training.
    fn kernel_taps<'t>(
        &self,
        blk: &Block,
        p: &Bound<'t>,
        store: &ParamStore,
        factor: f64,
    ) -> Result<(Var<'t>, isize)> {
        let plan = self.plan();
        if factor == 1.0 {
            let kern = sample_kernel(&blk.field, p, store, plan.kernel_size, plan.mode, blk.mask.as_ref(), plan.separable)?;
            let shift = kern.shift();
            return Ok((kern.taps, shift));
        }
        let (coords, shift) = crate::conv::cross_resolution_offsets(plan.kernel_size, plan.mode, 1.0, factor)?;
        let k2 = coords.len();
        let grid = crate::fields::grid_from_coords(coords, plan.mode)?;
        let pts = p.tape().constant(grid.points);
        let mut flat = blk.field.forward(p, pts)?;
        if let Some(m) = &blk.mask {
            flat = flat.mul(m.eval(p, pts)?)?;
        }
        let (o, c) = (blk.field.spec.out_channels, blk.field.spec.in_channels);
        let taps = if plan.separable { flat.t()? } else { flat.reshape(&[k2, o, c])?.permute(&[1, 2, 0])? };
        Ok((taps, shift))
    }

    /// Conv stage of `blk` at `rate` samples per training-rate sample, before bias and any
    /// rate correction.
    pub fn block_conv<'t>(&self, blk: &Block, p: &Bound<'t>, store: &ParamStore, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        let mut u = x;
        if let Some(a) = &self.arch {
            u = width_mask_apply(u, &a.blocks[blk.arch_index].n_in, p, self.config.hidden)?;
        }
        let (taps, shift) = self.kernel_taps(blk, p, store, rate)?;
        let mut raw = conv_with_path(u, taps, shift, self.config.kernel.path)?;
        if let Some(mix) = blk.mix {
            raw = pointwise(raw, p.get(mix), None)?;
        }
        Ok(raw)
    }

    /// One block at `rate` samples per training-rate sample.
    fn block_forward<'t>(
        &self,
        blk: &Block,
        p: &Bound<'t>,
        store: &ParamStore,
        x: Var<'t>,
        rate: f64,
        correct: bool,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.config.hidden;
        let arch = self.arch.as_ref();
        let l = blk.arch_index;
        let t_in = x.shape()[2];
        let factor = if (rate - 1.0).abs() < 1e-12 { 1.0 } else { rate };
        let raw = self.block_conv(blk, p, store, x, factor)?;
        let mut y = if correct && factor != 1.0 { raw.scale(1.0 / factor) } else { raw };
        let mut identity = x;
        if let Some(res) = arch.and_then(|a| a.blocks[l].res.as_ref()) {
            let d = crate::conv::spectral_downsample(y, res, p, store)?;
            y = d.y;
            if d.len != t_in {
                identity = spectral_resample(identity, d.len)?;
            }
        }
        y = y.add(p.get(blk.conv_bias).reshape(&[1, n, 1])?)?;
        y = self.normalize(blk, p, y)?;
        if let Some(a) = arch {
            y = width_mask_apply(y, &a.blocks[l].n_mid, p, n)?;
        }
        y = self.activation(y);
        y = blk.pw.forward(p, y)?;
        if let Some(a) = arch {
            y = width_mask_apply(y, &a.blocks[l].n_out, p, n)?;
        }
        let on_branch = self.config.end_activation == EndActivation::OnBranch;
        if on_branch {
            y = self.activation(y);
        }
        let weight = match arch {
            Some(a) if self.depth_masked => a.depth_weight(p, l)?,
            _ => p.tape().scalar(blk.branch_scale),
        };
        let mut out = depth_mask_apply(y, identity, weight)?;
        if !on_branch {
            out = self.activation(out);
        }
        Ok((out, raw))
    }

    /// Sum of alias penalties over MAGNet blocks, before weighting.
    pub fn alias_penalty<'t>(&self, p: &Bound<'t>, mode: AliasMode) -> Result<Option<Var<'t>>> {
        let k = self.kernel_size();
        let mut total: Option<Var<'t>> = None;
        for blk in self.blocks.iter().filter(|b| b.field.is_magnet()) {
            let masks: Vec<Mask> = blk.mask.iter().cloned().collect();
            let l = alias_loss(&blk.field, &masks, p, k, mode, DEFAULT_SIGMA_CUT)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        Ok(total)
    }

    /// Frequency budget rows of every MAGNet block.
    pub fn frequency_budgets(&self, store: &ParamStore) -> Result<Vec<(usize, FrequencyBudget)>> {
        let k = self.kernel_size();
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.field.is_magnet())
            .map(|(l, b)| {
                let masks: Vec<Mask> = b.mask.iter().cloned().collect();
                Ok((l, FrequencyBudget::compute(&b.field, &masks, store, k, DEFAULT_SIGMA_CUT)?))
            })
            .collect()
    }

    /// Keep every constrained parameter inside its valid region.
    pub fn project(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.field.project(store);
            if let Some(m) = &b.mask {
                m.project(store);
            }
        }
        if let Some(a) = &self.arch {
            a.project(store);
        }
    }

    /// Found architecture: sizes of every block and the active depth.
    pub fn snapshot(&self, store: &ParamStore) -> ArchSnapshot {
        let k = self.kernel_size() as f64;
        let n = self.config.hidden as f64;
        let active = self.arch.as_ref().map(|a| a.active_blocks(store));
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let l = b.arch_index;
                let kernel_size = b.mask.as_ref().map_or(k, |m| m.size_value(store).min(k));
                let (res, wi, wm, wo) = match &self.arch {
                    Some(a) => {
                        let bm = &a.blocks[l];
                        let w = |m: &Mask| m.size_value(store).min(n);
                        let r = bm.res.as_ref().map_or(self.seq_len as f64, |m| m.size_value(store).min(self.seq_len as f64));
                        (r, w(&bm.n_in), w(&bm.n_mid), w(&bm.n_out))
                    }
                    None => (self.seq_len as f64, n, n, n),
                };
                BlockSnapshot {
                    block: l,
                    active: if self.depth_masked { active.as_ref().map_or(true, |a| a[l]) } else { true },
                    kernel_size,
                    resolution: res,
                    width_in: wi,
                    width_mid: wm,
                    width_out: wo,
                }
            })
            .collect::<Vec<_>>();
        let depth = match &self.arch {
            Some(a) if self.depth_masked => a.depth.size_value(store),
            _ => self.blocks.len() as f64,
        };
        ArchSnapshot { depth, active_blocks: blocks.iter().filter(|b| b.active).count(), blocks }
    }

    /// Static network without depth masking: inactive blocks are dropped and active ones keep
    /// their current branch weight as a constant.
    pub fn materialize_depth(&self, store: &ParamStore) -> Backbone {
        let mut out = self.clone();
        let Some(a) = self.arch.as_ref().filter(|_| self.depth_masked) else { return out };
        out.blocks = self
            .blocks
            .iter()
            .filter_map(|b| {
                let w = a.depth_weight_value(store, b.arch_index);
                (w > 0.0).then(|| Block { branch_scale: w, ..b.clone() })
            })
            .collect();
        out.depth_masked = false;
        out
    }
}

trait NextSeed {
    fn next_seed(self) -> u64;
}

impl NextSeed for crate::rng::SeededRng {
    fn next_seed(mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}
