//! Architecture masks: channel widths, block depth and per-block resolution as learnable
//! sigmoid masks, plus a differentiable operation count tying them to a budget.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{config_err, Result};
use crate::masks::{clip_size_straight_through, Mask, DEFAULT_THRESHOLD};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Search-space caps and initial sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Channel cap `N_max`; channels are allocated at this width.
    pub max_channels: usize,
    /// Block cap `D_max`.
    pub max_depth: usize,
    /// Initial width of every channel mask.
    pub init_channels: usize,
    /// Initial number of active blocks.
    pub init_depth: usize,
    #[serde(default = "default_tau_width")]
    pub tau_width: f64,
    #[serde(default = "default_tau_depth")]
    pub tau_depth: f64,
    /// Learn a resolution mask per block.
    #[serde(default)]
    pub resolution: bool,
    #[serde(default = "default_tau_res")]
    pub tau_res: f64,
    /// Initial resolution in samples; the input length when absent.
    #[serde(default)]
    pub init_resolution: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_tau_width() -> f64 {
    20.0
}
fn default_tau_depth() -> f64 {
    8.0
}
fn default_tau_res() -> f64 {
    40.0
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_channels == 0 || self.init_channels > self.max_channels {
            return Err(config_err!(
                "arch.init_channels must lie in 1..=max_channels ({} vs {})",
                self.init_channels,
                self.max_channels
            ));
        }
        if self.init_depth == 0 || self.init_depth > self.max_depth {
            return Err(config_err!(
                "arch.init_depth must lie in 1..=max_depth ({} vs {})",
                self.init_depth,
                self.max_depth
            ));
        }
        Ok(())
    }
}

/// Channel masks of one block: conv input, conv output, pointwise output.
#[derive(Clone, Debug)]
pub struct BlockMasks {
    pub n_in: Mask,
    pub n_mid: Mask,
    pub n_out: Mask,
    /// Frequency mask over the input length.
    pub res: Option<Mask>,
}

#[derive(Clone, Debug)]
pub struct ArchMasks {
    pub blocks: Vec<BlockMasks>,
    pub depth: Mask,
    pub max_channels: usize,
    pub max_depth: usize,
    /// Input length; resolution sizes are capped here.
    pub seq_len: usize,
}

impl ArchMasks {
    /// Masks for `max_depth` blocks, sized to `cfg`'s initial architecture.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ArchConfig, seq_len: usize) -> Result<Self> {
        cfg.validate()?;
        let width = |store: &mut ParamStore, name: String| {
            Mask::sigmoid_with_size(
                store,
                &name,
                cfg.init_channels as f64,
                cfg.max_channels,
                cfg.tau_width,
                cfg.threshold,
            )
        };
        let mut blocks = Vec::with_capacity(cfg.max_depth);
        for l in 0..cfg.max_depth {
            let res = if cfg.resolution {
                let name = format!("{prefix}.b{l}.res");
                let n = cfg.init_resolution.unwrap_or(seq_len).min(seq_len);
                Some(Mask::sigmoid_with_size(store, &name, n as f64, seq_len, cfg.tau_res, cfg.threshold)?)
            } else {
                None
            };
            blocks.push(BlockMasks {
                n_in: width(store, format!("{prefix}.b{l}.n_in"))?,
                n_mid: width(store, format!("{prefix}.b{l}.n_mid"))?,
                n_out: width(store, format!("{prefix}.b{l}.n_out"))?,
                res,
            });
        }
        let depth = Mask::sigmoid_with_size(
            store,
            &format!("{prefix}.depth"),
            cfg.init_depth as f64,
            cfg.max_depth,
            cfg.tau_depth,
            cfg.threshold,
        )?;
        Ok(Self { blocks, depth, max_channels: cfg.max_channels, max_depth: cfg.max_depth, seq_len })
    }

    /// Thresholded depth mask value of block `l` (0-based), used on the residual branch.
    pub fn depth_weight<'t>(&self, p: &Bound<'t>, l: usize) -> Result<Var<'t>> {
        if l >= self.max_depth {
            return Err(config_err!("block {l} beyond depth cap {}", self.max_depth));
        }
        let x = self.depth.axis_coords(self.max_depth)[l];
        self.depth.eval(p, p.tape().constant(Tensor::scalar(x)))
    }

    pub fn depth_weight_value(&self, store: &ParamStore, l: usize) -> f64 {
        self.depth.eval_value(store, &self.depth.axis_coords(self.max_depth))[l]
    }

    /// Blocks whose depth weight is nonzero after thresholding.
    pub fn active_blocks(&self, store: &ParamStore) -> Vec<bool> {
        self.depth.eval_value(store, &self.depth.axis_coords(self.max_depth)).iter().map(|&v| v > 0.0).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.depth.param_ids();
        for b in &self.blocks {
            for m in [&b.n_in, &b.n_mid, &b.n_out].into_iter().chain(b.res.as_ref()) {
                v.extend(m.param_ids());
            }
        }
        v
    }

    pub fn project(&self, store: &mut ParamStore) {
        self.depth.project(store);
        for b in &self.blocks {
            for m in [&b.n_in, &b.n_mid, &b.n_out].into_iter().chain(b.res.as_ref()) {
                m.project(store);
            }
        }
    }

    /// Clipped differentiable sizes of block `l`.
    pub fn block_sizes<'t>(&self, p: &Bound<'t>, l: usize) -> Result<BlockSizes<'t>> {
        let b = &self.blocks[l];
        let cap = self.max_channels as f64;
        let width = |m: &Mask| clip_size_straight_through(m.size(p)?, cap);
        let res = match &b.res {
            Some(m) => clip_size_straight_through(m.size(p)?, self.seq_len as f64)?,
            None => p.tape().scalar(self.seq_len as f64),
        };
        Ok(BlockSizes { res, n_in: width(&b.n_in)?, n_mid: width(&b.n_mid)?, n_out: width(&b.n_out)? })
    }

    /// Clipped differentiable depth.
    pub fn depth_size<'t>(&self, p: &Bound<'t>) -> Result<Var<'t>> {
        clip_size_straight_through(self.depth.size(p)?, self.max_depth as f64)
    }
}

/// Multiply channel `c` of `x` `[B, C, T]` by the mask value at channel coordinate `c`.
pub fn width_mask_apply<'t>(x: Var<'t>, m: &Mask, p: &Bound<'t>, max_channels: usize) -> Result<Var<'t>> {
    let c = x.shape()[1];
    if c > max_channels {
        return Err(config_err!("{c} channels exceed the cap {max_channels}"));
    }
    let coords = m.axis_coords(max_channels)[..c].to_vec();
    let v = m.eval(p, p.tape().constant(Tensor::new(&[1, c, 1], coords)?))?;
    x.mul(v)
}

/// `identity + weight · residual`.
pub fn depth_mask_apply<'t>(residual: Var<'t>, identity: Var<'t>, weight: Var<'t>) -> Result<Var<'t>> {
    identity.add(residual.mul(weight)?)
}

/// Sizes entering the cost of one block.
#[derive(Clone, Copy)]
pub struct BlockSizes<'t> {
    pub res: Var<'t>,
    pub n_in: Var<'t>,
    pub n_mid: Var<'t>,
    pub n_out: Var<'t>,
}

/// Operation kinds of the complexity model.
#[derive(Clone, Copy)]
pub enum LayerCost<'t> {
    /// `L · N_in · N_out`.
    Linear { res: Var<'t>, n_in: Var<'t>, n_out: Var<'t> },
    /// `L · log₂ L`.
    FourierConv { res: Var<'t> },
    /// `L · N`.
    Pointwise { res: Var<'t>, n: Var<'t> },
}

pub fn layer_cost(kind: LayerCost<'_>) -> Result<Var<'_>> {
    match kind {
        LayerCost::Linear { res, n_in, n_out } => res.mul(n_in)?.mul(n_out),
        LayerCost::FourierConv { res } => res.mul(res.ln().scale(std::f64::consts::LOG2_E)),
        LayerCost::Pointwise { res, n } => res.mul(n),
    }
}

/// Cost of one block: per-channel transforms and spectral mixing of the conv, normalization
/// and activation, the pointwise layer and the closing activation.
pub fn block_cost<'t>(s: BlockSizes<'t>) -> Result<Var<'t>> {
    let fft = layer_cost(LayerCost::FourierConv { res: s.res })?.mul(s.n_in)?;
    let mix = layer_cost(LayerCost::Linear { res: s.res, n_in: s.n_in, n_out: s.n_mid })?;
    let mid = layer_cost(LayerCost::Pointwise { res: s.res, n: s.n_mid })?.scale(2.0);
    let pw = layer_cost(LayerCost::Linear { res: s.res, n_in: s.n_mid, n_out: s.n_out })?;
    let end = layer_cost(LayerCost::Pointwise { res: s.res, n: s.n_out })?;
    fft.add(mix)?.add(mid)?.add(pw)?.add(end)
}

/// `Σ_l a_l · C_l` with effective depth share `a_l = clamp(size_depth − l, 0, 1)`.
pub fn network_cost<'t>(masks: &ArchMasks, p: &Bound<'t>) -> Result<Var<'t>> {
    let depth = masks.depth_size(p)?;
    let one = p.tape().scalar(1.0);
    let mut total: Option<Var<'t>> = None;
    for l in 0..masks.blocks.len() {
        let share = depth.add_scalar(-(l as f64)).relu().minimum(one)?;
        let c = block_cost(masks.block_sizes(p, l)?)?.mul(share)?;
        total = Some(match total {
            Some(t) => t.add(c)?,
            None => c,
        });
    }
    total.ok_or_else(|| config_err!("network has no blocks"))
}

/// `(C / C_target − 1)²`.
pub fn complexity_loss<'t>(c: Var<'t>, c_target: f64) -> Result<Var<'t>> {
    if !(c_target > 0.0) {
        return Err(config_err!("complexity target must be positive, got {c_target}"));
    }
    Ok(c.scale(1.0 / c_target).add_scalar(-1.0).square())
}

/// Budget anchored at the cost of the initial architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityModel {
    pub c_target: f64,
}

impl ComplexityModel {
    pub fn at_init(masks: &ArchMasks, store: &ParamStore) -> Result<Self> {
        Ok(Self { c_target: network_cost_value(masks, store)? })
    }

    pub fn ratio(&self, masks: &ArchMasks, store: &ParamStore) -> Result<f64> {
        Ok(network_cost_value(masks, store)? / self.c_target)
    }
}

pub fn network_cost_value(masks: &ArchMasks, store: &ParamStore) -> Result<f64> {
    let tape = crate::autodiff::Tape::new();
    Ok(network_cost(masks, &store.bind_constant(&tape))?.item())
}

/// Found-architecture row of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSnapshot {
    pub block: usize,
    pub active: bool,
    pub kernel_size: f64,
    pub resolution: f64,
    pub width_in: f64,
    pub width_mid: f64,
    pub width_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSnapshot {
    pub depth: f64,
    pub active_blocks: usize,
    pub blocks: Vec<BlockSnapshot>,
}

#[cfg(test)]
mod tests;
