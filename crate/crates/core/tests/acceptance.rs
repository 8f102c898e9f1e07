//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; trailing numeric arguments select criteria,
//! e.g. `cargo test --test acceptance -- 1 8 10`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use ckconv::archmask::{network_cost, ArchConfig, ArchMasks};
use ckconv::autodiff::finite_diff_check;
use ckconv::conv::{conv_direct, conv_fft, flexconv_forward, ConvPlan};
use ckconv::experiment::{self, ExperimentConfig};
use ckconv::fields::{coord_grid, linspace, Activation, FieldSpec, FieldVariant, KernelField};
use ckconv::masks::{clip_size_straight_through, clip_value, Mask};
use ckconv::params::{Group, ParamStore};
use ckconv::rng::{normal, seeded};
use ckconv::spectral::{nyquist_freq, survey_magnets, AliasMode};
use ckconv::tasks::{
    fit_field, layer_scaling_errors, sampled_kernel_values, spectrum_tail_above, AdamConfig, Backbone, BackboneConfig,
    FieldTarget, FitConfig, FlexMaskConfig, KernelConfig, ResolutionTask, TrainConfig,
};
use ckconv::{ConvMode, Precision, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Outcome;

/// Index-level causal/centered correlation with zero padding.
fn brute_force(x: &Tensor, w: &Tensor, mode: ConvMode) -> Vec<f64> {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let shift = match mode {
        ConvMode::Causal => 0,
        ConvMode::Centered => (k / 2) as isize,
    };
    let mut out = vec![0.0; b * o * t];
    for bi in 0..b {
        for oi in 0..o {
            for ti in 0..t {
                let mut acc = 0.0;
                for ci in 0..c {
                    for j in 0..k {
                        let src = ti as isize + shift - j as isize;
                        if (0..t as isize).contains(&src) {
                            acc += x.at(&[bi, ci, src as usize]) * w.at(&[oi, ci, j]);
                        }
                    }
                }
                out[(bi * o + oi) * t + ti] = acc;
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = seeded(1001);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.gen_range(1..=1024usize);
        let k = rng.gen_range(1..=t);
        let (c, o) = (rng.gen_range(1..=2usize), rng.gen_range(1..=2usize));
        let mode = if rng.gen_bool(0.5) { ConvMode::Causal } else { ConvMode::Centered };
        let x = normal(&mut rng, &[1, c, t], 1.0);
        let w = normal(&mut rng, &[o, c, k], 1.0 / (k as f64).sqrt());
        let oracle = brute_force(&x, &w, mode);
        let tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        for y in [conv_direct(xv, wv, mode), conv_fft(xv, wv, mode)] {
            let y = y.expect("valid conv").value();
            for (a, b) in y.data().iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst < 1e-6, format!("max abs err {worst:.2e} over 100 instances"))
}

fn all_params_fd<F>(store: &ParamStore, ids: &[ckconv::params::ParamId], eps: f64, f: F) -> f64
where
    F: for<'t> Fn(&ckconv::params::Bound<'t>, &'t Tape) -> ckconv::Result<ckconv::Var<'t>>,
{
    let mut worst = 0.0f64;
    for &id in ids {
        if store.group(id) == Group::Frozen {
            continue;
        }
        let err = finite_diff_check(|t, v| f(&store.bind_override(t, id, v), t), store.get(id), eps).expect("finite objective");
        worst = worst.max(err);
    }
    worst
}

fn gradient_suite() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    let grid = coord_grid(16, 1, ConvMode::Centered).unwrap();
    let variants = [
        ("sine_mlp", FieldVariant::SineMlp { omega0: 10.0 }),
        ("magnet", FieldVariant::Magnet { alpha: 6.0, beta: 1.0 }),
        ("fourier_feature", FieldVariant::FourierFeature { omega0: 1.0 }),
        ("mlp_swish", FieldVariant::PiecewiseMlp { activation: Activation::Swish }),
    ];
    for (name, variant) in variants {
        let spec = FieldSpec { variant, layers: 3, hidden: 8, in_dim: 1, out_channels: 2, in_channels: 2, weight_norm: false };
        let mut store = ParamStore::new();
        let f = KernelField::new(&mut store, "k", spec, 3).unwrap();
        let wts = normal(&mut seeded(4), &[grid.len(), 2, 2], 1.0);
        let err = all_params_fd(&store, &f.param_ids(), 1e-5, |p, t| Ok(f.eval(p, &grid)?.mul(t.constant(wts.clone()))?.sum()));
        pass &= err < 1e-4;
        parts.push(format!("{name} {err:.1e}"));
    }

    let mut store = ParamStore::new();
    let g = Mask::gaussian_with_variance(&mut store, "g", 0.2, 0.05, 0.1, 0.1, true).unwrap();
    let s = Mask::sigmoid_with_size(&mut store, "s", 6.0, 16, 30.0, 0.1).unwrap();
    let xs = Tensor::vector(linspace(9).iter().map(|v| v * 0.6).collect());
    let cells = Tensor::vector(s.axis_coords(16));
    for (name, m, coords) in [("gaussian_mask", &g, &xs), ("sigmoid_mask", &s, &cells)] {
        let value = all_params_fd(&store, &m.param_ids(), 1e-5, |p, t| Ok(m.eval(p, t.constant(coords.clone()))?.sum()));
        let size = all_params_fd(&store, &m.param_ids(), 1e-5, |p, _| m.size(p));
        pass &= value < 1e-4 && size < 1e-4;
        parts.push(format!("{name} {value:.1e} size {size:.1e}"));
    }

    let mut store = ParamStore::new();
    let f = KernelField::new(&mut store, "k", FieldSpec { hidden: 16, ..FieldSpec::siren(2, 2, 10.0) }, 14).unwrap();
    let m = Mask::gaussian_with_variance(&mut store, "m", 0.3, 2.0 / 16.0, 0.05, 0.1, true).unwrap();
    let mut rng = seeded(15);
    let x = normal(&mut rng, &[2, 2, 24], 1.0);
    let gy = normal(&mut rng, &[2, 2, 24], 1.0);
    let plan = ConvPlan::new(ConvMode::Centered, 17, 2, 2);
    let mut ids = f.param_ids();
    ids.extend(m.param_ids());
    let flex = all_params_fd(&store, &ids, 1e-6, |p, t| {
        let y = flexconv_forward(t.constant(x.clone()), &f, Some(&m), &plan, p, &store, None)?;
        Ok(y.gelu().mul(t.constant(gy.clone()))?.sum())
    });
    pass &= flex < 1e-3;
    parts.push(format!("flexconv block {flex:.1e}"));

    let mut store = ParamStore::new();
    let cfg = ArchConfig {
        max_channels: 16,
        max_depth: 3,
        init_channels: 10,
        init_depth: 2,
        tau_width: 20.0,
        tau_depth: 8.0,
        resolution: true,
        tau_res: 40.0,
        init_resolution: Some(24),
        threshold: 0.1,
    };
    let masks = ArchMasks::new(&mut store, "a", &cfg, 32).unwrap();
    let cost = all_params_fd(&store, &masks.param_ids(), 1e-6, |p, _| network_cost(&masks, p));
    pass &= cost < 1e-4;
    parts.push(format!("network_cost {cost:.1e}"));
    outcome(pass, parts.join(", "))
}

fn copy_memory() -> Outcome {
    run_sequence_task("copy_memory", COPY_CONFIG, Duration::from_secs(15 * 60), |r| {
        let acc = r.final_accuracy.unwrap_or(0.0);
        (acc >= 1.0 || r.final_loss <= 1e-4, format!("test accuracy {acc:.4}, loss {:.3e}", r.final_loss))
    })
}

fn adding() -> Outcome {
    run_sequence_task("adding", ADDING_CONFIG, Duration::from_secs(15 * 60), |r| {
        let mse = r.final_mse.unwrap_or(f64::INFINITY);
        (mse < 1e-3, format!("test MSE {mse:.3e} (constant-1 baseline 1/6)"))
    })
}

fn run_sequence_task(
    name: &str,
    config: &str,
    budget: Duration,
    judge: impl Fn(&experiment::RunRecord) -> (bool, String),
) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(config).unwrap().with_outputs(dir.path().join(name));
    let t0 = Instant::now();
    match experiment::run(&cfg) {
        Ok(r) => {
            let (ok, msg) = judge(&r);
            let el = t0.elapsed();
            outcome(ok && el <= budget, format!("{msg}, {} steps in {:.0}s", r.steps, el.as_secs_f64()))
        }
        Err(e) => outcome(false, format!("run failed: {e}")),
    }
}

fn resolution_factor() -> Outcome {
    let task = ResolutionTask::default();
    let mut kc = KernelConfig::new(FieldVariant::SineMlp { omega0: 3.0 });
    kc.hidden = 16;
    let cfg = BackboneConfig::new(1, 1, 8, kc);
    let mut store = ParamStore::new();
    let model = Backbone::new(&mut store, cfg, task.len(), 21).unwrap();
    let train_ds = task.make_range(0, 256, 5).unwrap();
    let test_ds = task.make_range(1 << 40, 16, 5).unwrap();
    let mut tc = TrainConfig::new(100, 6);
    tc.batch_size = 16;
    let trained = ckconv::tasks::train(&model, &mut store, &train_ds, &test_ds, &tc, |_| {});
    if let Err(e) = trained {
        return outcome(false, format!("training failed: {e}"));
    }
    let errs = layer_scaling_errors(&model, &store, &test_ds.inputs, 0.5).unwrap();
    let worst = errs.iter().map(|l| l.rel_err).fold(0.0, f64::max);
    let per: Vec<String> = errs.iter().map(|l| format!("layer {} {:.2}%", l.layer, 100.0 * l.rel_err)).collect();
    outcome(worst <= 0.05, per.join(", "))
}

fn anti_aliasing() -> Outcome {
    let k = 33;
    let cfg = FitConfig {
        field: FieldVariant::Magnet { alpha: 6.0, beta: 1.0 },
        layers: 3,
        hidden: 32,
        weight_norm: false,
        target: FieldTarget::SineMixture,
        points: k,
        steps: 20000,
        optimizer: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        lambda_alias: 0.1,
        alias_mode: AliasMode::PerLayer,
        mask: Some(FlexMaskConfig { init_fraction: 1.0, threshold: 0.1, mu: Some(0.0), learn_mu: false }),
        mask_lr_factor: 1.0,
        seed: 7,
        precision: Precision::F64,
    };
    let r = match fit_field(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("fit failed: {e}")),
    };
    let rows = r.budget.as_ref().unwrap().rows();
    let worst = rows.iter().map(|r| r.violation).fold(0.0, f64::max);
    let dense = sampled_kernel_values(&r.field, r.mask.as_ref(), &r.store, 4096).unwrap();
    let tail = spectrum_tail_above(&dense, nyquist_freq(k));
    outcome(
        worst <= 0.05 && tail < 0.01,
        format!("max budget violation {worst:.3e}, power above f_Nyq {:.3}%, fit MSE {:.2e}", 100.0 * tail, r.final_mse),
    )
}

fn analytic_frequency() -> Outcome {
    let checks = survey_magnets(20, 500, 3, 32, 4096).unwrap();
    let bad = checks.iter().filter(|c| !(c.dominant <= c.f_plus && c.tail < 0.01)).count();
    let worst_tail = checks.iter().map(|c| c.tail).fold(0.0, f64::max);
    outcome(bad == 0, format!("{} of 20 within bound, worst tail {:.2e}", 20 - bad, worst_tail))
}

fn mask_size_consistency() -> Outcome {
    let mut rng = seeded(808);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut s = ParamStore::new();
        let n = rng.gen_range(16..200usize);
        let g = Mask::gaussian_with_size(&mut s, "g", rng.gen_range(2.0..n as f64 * 0.9), 2.0 / (n - 1) as f64, 0.0, 0.1, true)
            .unwrap();
        let w = g.boundary_value(&s).1;
        s.set(g.mu, Tensor::scalar(rng.gen_range(-(1.0 - w)..=(1.0 - w))));
        let count = g.support_count(&s, &linspace(n)) as f64;
        worst = worst.max((count - g.size_value(&s).ceil()).abs());

        let n_max = rng.gen_range(4..64usize);
        let m = Mask::sigmoid_with_size(&mut s, "s", n_max as f64, n_max, 60.0, 0.1).unwrap();
        let (lo, hi) = m.mu_bounds();
        s.set(m.mu, Tensor::scalar(rng.gen_range(lo..hi)));
        let count = m.support_count(&s, &m.axis_coords(n_max)) as f64;
        worst = worst.max((count - clip_value(m.size_value(&s), n_max as f64).ceil()).abs());
    }
    let tape = Tape::new();
    let mut grads = Vec::new();
    for v in [300.0, 100.0] {
        let a = tape.var(Tensor::scalar(v));
        let c = clip_size_straight_through(a, 280.0).unwrap();
        grads.push(tape.backward(c).unwrap().wrt(a).item());
    }
    let st = grads.iter().all(|&g| g == 1.0);
    outcome(worst <= 1.0 && st, format!("max |count - ceil(size)| {worst} over 100 masks, clip gradients {grads:?}"))
}

fn complexity_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_json(COMPLEXITY_CONFIG).unwrap().with_outputs(out.to_path_buf())
}

fn complexity_budget() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let r = match experiment::run(&complexity_config(dir.path())) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let band = r.cost_ratio_in_band.unwrap_or(0.0);
    let fin = r.final_cost_ratio.unwrap_or(f64::NAN);
    outcome(
        band >= 0.9 && (fin - 1.0).abs() <= 0.05,
        format!("{:.1}% of steps in [0.8, 1.2], final ratio {fin:.4}", 100.0 * band),
    )
}

fn nyquist_spots() -> Outcome {
    let v = [nyquist_freq(33), nyquist_freq(5), nyquist_freq(1)];
    outcome(v == [8.0, 1.0, 0.0], format!("f_Nyq(33, 5, 1) = {v:?}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        if let Err(e) = experiment::run(&complexity_config(&out)) {
            return outcome(false, format!("run failed: {e}"));
        }
        bytes.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    outcome(bytes[0] == bytes[1], format!("two complexity runs: {} bytes each, identical {}", bytes[0].len(), bytes[0] == bytes[1]))
}

const COPY_CONFIG: &str = include_str!("../../../configs/copy_memory.json");

const ADDING_CONFIG: &str = include_str!("../../../configs/adding.json");

const COMPLEXITY_CONFIG: &str = include_str!("../../../configs/complexity.json");

fn main() -> ExitCode {
    let criteria: [(usize, &str, Check); 11] = [
        (1, "oracle equivalence", oracle_equivalence),
        (2, "gradient suite", gradient_suite),
        (3, "copy memory T=100", copy_memory),
        (4, "adding problem T=100", adding),
        (5, "resolution factor", resolution_factor),
        (6, "anti-aliasing", anti_aliasing),
        (7, "analytic vs measured frequency", analytic_frequency),
        (8, "mask size consistency", mask_size_consistency),
        (9, "complexity budget", complexity_budget),
        (10, "Nyquist spot values", nyquist_spots),
        (11, "determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
