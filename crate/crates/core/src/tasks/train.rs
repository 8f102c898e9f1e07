use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archmask::{complexity_loss, network_cost, ComplexityModel};
use crate::autodiff::{Precision, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::spectral::{AliasMode, DEFAULT_ALIAS_WEIGHT};
use crate::tensor::Tensor;

use super::data::{Dataset, TargetLayout};
use super::optim::{Adam, AdamConfig, Schedule};
use super::Backbone;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Learning-rate multiplier of mask parameters.
    #[serde(default = "default_mask_lr_factor")]
    pub mask_lr_factor: f64,
    #[serde(default = "default_alias")]
    pub lambda_alias: f64,
    #[serde(default)]
    pub alias_mode: AliasMode,
    #[serde(default)]
    pub lambda_complexity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Evaluate on the test split every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Global gradient-norm cap.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_batch() -> usize {
    32
}
fn default_mask_lr_factor() -> f64 {
    0.01
}
fn default_alias() -> f64 {
    DEFAULT_ALIAS_WEIGHT
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            optimizer: AdamConfig::default(),
            steps,
            batch_size: default_batch(),
            schedule: Schedule::Constant,
            mask_lr_factor: default_mask_lr_factor(),
            lambda_alias: default_alias(),
            alias_mode: AliasMode::PerLayer,
            lambda_complexity: 0.0,
            seed,
            precision: Precision::F64,
            eval_every: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be positive"));
        }
        if !(self.lambda_alias >= 0.0) || !(self.lambda_complexity >= 0.0) {
            return Err(config_err!("train.lambda_alias and train.lambda_complexity must be ≥ 0"));
        }
        if !(self.mask_lr_factor >= 0.0) {
            return Err(config_err!("train.mask_lr_factor must be ≥ 0"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(config_err!("train.grad_clip must be positive"));
        }
        Ok(())
    }
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub alias_loss: f64,
    pub complexity_loss: f64,
    /// `C_curr / C_target` before the update, when architecture masks are on.
    pub cost_ratio: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    pub loss: f64,
    /// Copy memory: fraction of correct symbols over the final ten steps.
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalMetrics>,
    pub final_eval: EvalMetrics,
    pub final_cost_ratio: Option<f64>,
}

/// Task loss of a batch of model outputs.
fn task_loss<'t>(out: Var<'t>, targets: &Tensor, layout: TargetLayout) -> Result<Var<'t>> {
    let tape = out.tape();
    match layout {
        TargetLayout::PerStepClasses { classes } => {
            let s = out.shape();
            let (b, k, l) = (s[0], s[1], s[2]);
            if k != classes {
                return Err(config_err!("model emits {k} classes, task has {classes}"));
            }
            let mut onehot = vec![0.0; b * k * l];
            for bi in 0..b {
                for t in 0..l {
                    let c = targets.data()[bi * l + t] as usize;
                    onehot[(bi * k + c) * l + t] = 1.0;
                }
            }
            let logp = out.log_softmax(1)?;
            Ok(logp.mul(tape.constant(Tensor::new(&[b, k, l], onehot)?))?.sum().scale(-1.0 / (b * l) as f64))
        }
        TargetLayout::LastStep | TargetLayout::PerStep => {
            if out.shape() != targets.shape() {
                return Err(config_err!("model output {:?} vs targets {:?}", out.shape(), targets.shape()));
            }
            Ok(out.sub(tape.constant(targets.clone()))?.square().mean())
        }
    }
}

/// Loss, accuracy or MSE over a whole split, without gradients.
pub fn evaluate(model: &Backbone, store: &ParamStore, ds: &Dataset, step: usize) -> Result<EvalMetrics> {
    const CHUNK: usize = 250;
    let (mut loss, mut correct, mut counted) = (0.0, 0usize, 0usize);
    let n = ds.len();
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (x, y) = ds.batch(&idx);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = model.forward(&p, store, tape.constant(x))?;
        loss += task_loss(out, &y, ds.layout)?.item() * idx.len() as f64;
        if let TargetLayout::PerStepClasses { classes } = ds.layout {
            let o = out.value();
            let l = o.shape()[2];
            for bi in 0..idx.len() {
                for t in l.saturating_sub(10)..l {
                    let pred = (0..classes)
                        .max_by(|&a, &b| o.at(&[bi, a, t]).total_cmp(&o.at(&[bi, b, t])).then(b.cmp(&a)))
                        .unwrap();
                    correct += usize::from(pred == y.data()[bi * l + t] as usize);
                    counted += 1;
                }
            }
        }
    }
    let loss = loss / n as f64;
    let classes = matches!(ds.layout, TargetLayout::PerStepClasses { .. });
    Ok(EvalMetrics {
        step,
        loss,
        accuracy: classes.then(|| correct as f64 / counted as f64),
        mse: (!classes).then_some(loss),
    })
}

/// Train `model` on `train_ds`, evaluating on `test_ds`. Deterministic given the build and
/// `cfg.seed`.
pub fn train(
    model: &Backbone,
    store: &mut ParamStore,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.layout != test_ds.layout {
        return Err(config_err!("train and test splits disagree on target layout"));
    }
    let complexity = match &model.arch {
        Some(a) => Some(ComplexityModel::at_init(a, store)?),
        None => None,
    };
    let ids: Vec<_> = store.ids().collect();
    let mut opt = Adam::new(cfg.optimizer, cfg.mask_lr_factor);
    let n = train_ds.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    let (mut steps, mut evals) = (Vec::with_capacity(cfg.steps), Vec::new());
    for step in 0..cfg.steps {
        if cursor + bs > n {
            order = (0..n).collect();
            order.shuffle(&mut substream(cfg.seed, (1 << 50) + epoch));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let (x, y) = train_ds.batch(idx);
        let tape = Tape::with_precision(cfg.precision);
        let p = store.bind(&tape);
        let out = model.forward(&p, store, tape.constant(x))?;
        let tl = task_loss(out, &y, train_ds.layout)?;
        let mut loss = tl;
        let mut alias = 0.0;
        if cfg.lambda_alias > 0.0 {
            if let Some(a) = model.alias_penalty(&p, cfg.alias_mode)? {
                alias = a.item();
                loss = loss.add(a.scale(cfg.lambda_alias))?;
            }
        }
        let (mut closs, mut ratio) = (0.0, None);
        if let (Some(a), Some(cm)) = (&model.arch, &complexity) {
            let c = network_cost(a, &p)?;
            ratio = Some(c.item() / cm.c_target);
            if cfg.lambda_complexity > 0.0 {
                let cl = complexity_loss(c, cm.c_target)?;
                closs = cl.item();
                loss = loss.add(cl.scale(cfg.lambda_complexity))?;
            }
        }
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Training { step, reason: format!("loss is {lv}") });
        }
        let mut grads = p.collect(&tape.backward(loss)?);
        let gn = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !gn.is_finite() {
            return Err(Error::Training { step, reason: format!("gradient norm is {gn}") });
        }
        if let Some(cap) = cfg.grad_clip {
            if gn > cap {
                grads.iter_mut().for_each(|g| *g = g.scale(cap / gn));
            }
        }
        drop(p);
        let scale = cfg.schedule.factor(step, cfg.steps);
        opt.step(store, &ids, &grads, scale);
        model.project(store);
        let rec = StepRecord {
            step,
            loss: lv,
            task_loss: tl.item(),
            alias_loss: alias,
            complexity_loss: closs,
            cost_ratio: ratio,
            grad_norm: gn,
            lr: cfg.optimizer.lr * scale,
        };
        on_step(&rec);
        steps.push(rec);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            evals.push(evaluate(model, store, test_ds, step + 1)?);
        }
    }
    let final_eval = evaluate(model, store, test_ds, cfg.steps)?;
    evals.push(final_eval.clone());
    let final_cost_ratio = match (&model.arch, &complexity) {
        (Some(a), Some(cm)) => Some(cm.ratio(a, store)?),
        _ => None,
    };
    Ok(TrainOutcome { steps, evals, final_eval, final_cost_ratio })
}
