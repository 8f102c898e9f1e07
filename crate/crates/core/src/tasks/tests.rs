use super::*;
use crate::autodiff::{ConvMode, Tape};
use crate::fields::FieldVariant;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn siren() -> FieldVariant {
    FieldVariant::SineMlp { omega0: 10.0 }
}

fn small_model(store: &mut ParamStore, in_c: usize, out_c: usize, t: usize, readout: Readout) -> Backbone {
    let mut kc = KernelConfig::new(siren());
    kc.hidden = 8;
    kc.layers = 2;
    let mut cfg = BackboneConfig::new(in_c, out_c, 4, kc);
    cfg.readout = readout;
    Backbone::new(store, cfg, t, 7).unwrap()
}

#[test]
fn copy_memory_layout() {
    let ds = make_copy_memory(5, 3, 1).unwrap();
    assert_eq!(ds.inputs.shape(), &[3, 10, 25]);
    assert_eq!(ds.targets.shape(), &[3, 25]);
    for s in 0..3 {
        let sym = |pos: usize| (0..10).find(|&c| ds.inputs.at(&[s, c, pos]) == 1.0).unwrap();
        for pos in 0..25 {
            let onehot: f64 = (0..10).map(|c| ds.inputs.at(&[s, c, pos])).sum();
            assert_eq!(onehot, 1.0);
        }
        for i in 0..10 {
            assert!((1..=8).contains(&sym(i)));
            assert_eq!(ds.targets.at(&[s, 15 + i]), sym(i) as f64);
        }
        for pos in 10..14 {
            assert_eq!(sym(pos), 0);
        }
        for pos in 14..25 {
            assert_eq!(sym(pos), 9);
        }
        for pos in 0..15 {
            assert_eq!(ds.targets.at(&[s, pos]), 0.0);
        }
    }
}

#[test]
fn adding_targets_sum_marked_values() {
    let ds = make_adding(50, 200, 3).unwrap();
    let mut mean_sq = 0.0;
    for s in 0..200 {
        let marks: Vec<usize> = (0..50).filter(|&i| ds.inputs.at(&[s, 1, i]) == 1.0).collect();
        assert_eq!(marks.len(), 2);
        let sum = ds.inputs.at(&[s, 0, marks[0]]) + ds.inputs.at(&[s, 0, marks[1]]);
        assert_eq!(ds.targets.at(&[s, 0]), sum);
        mean_sq += (sum - 1.0).powi(2) / 200.0;
    }
    assert!((mean_sq - 1.0 / 6.0).abs() < 0.04, "{mean_sq}");
}

#[test]
fn datasets_are_deterministic_and_splits_differ() {
    let spec = TaskSpec {
        kind: TaskKind::Adding,
        length: 20,
        samples: 8,
        test_samples: 8,
        seed: 11,
        target: None,
        resolution: None,
    };
    let (a, ta) = spec.build().unwrap();
    let (b, _) = spec.build().unwrap();
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.targets, b.targets);
    assert_ne!(a.inputs, ta.inputs);
    let prefix = make_adding_range(20, 0, 3, 11).unwrap();
    assert_eq!(prefix.inputs.data(), &a.inputs.data()[..3 * 40]);
}

#[test]
fn field_targets_shapes() {
    let g = make_field_targets(FieldTarget::Gaussian, 33, 0).unwrap();
    assert_eq!(g[16], 1.0);
    let s = make_field_targets(FieldTarget::Step, 32, 0).unwrap();
    assert_eq!(s.iter().filter(|&&v| v == 1.0).count(), 16);
    assert!(make_field_targets(FieldTarget::Noise, 4, 0).is_err());
}

#[test]
fn resolution_targets_follow_low_pass() {
    let task = ResolutionTask::default();
    let ds = task.make_range(0, 2, 5).unwrap();
    assert_eq!(ds.inputs.shape(), &[2, 1, 128]);
    let fine = task.at_rate(2.0).make_range(0, 2, 5).unwrap();
    assert_eq!(fine.inputs.shape(), &[2, 1, 256]);
    for i in 0..128 {
        assert!((fine.inputs.at(&[1, 0, 2 * i]) - ds.inputs.at(&[1, 0, i])).abs() < 1e-12);
    }
    // τ y' + y = x, checked by central differences.
    let (x, y) = (fine.inputs.data(), fine.targets.data());
    for i in 1..255 {
        let dy = (y[i + 1] - y[i - 1]) / (2.0 * 0.5);
        assert!((4.0 * dy + y[i] - x[i]).abs() < 2e-3, "step {i}");
    }
}

#[test]
fn cache_roundtrip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adding.bin");
    let ds = make_adding(10, 4, 2).unwrap();
    save_dataset(&path, &ds, 2, "adding/10").unwrap();
    let back = load_dataset(&path, 2, "adding/10").unwrap();
    assert_eq!(back.inputs, ds.inputs);
    assert_eq!(back.targets, ds.targets);
    assert!(load_dataset(&path, 3, "adding/10").is_err());
    let mut built = false;
    let again = cached(&path, 2, "adding/11", || {
        built = true;
        make_adding(11, 4, 2)
    })
    .unwrap();
    assert!(built);
    assert_eq!(again.seq_len(), 11);
}

#[test]
fn forward_shapes() {
    let mut store = ParamStore::new();
    let m = small_model(&mut store, 2, 3, 16, Readout::LastStep);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::from_fn(&[2, 2, 16], |i| (i as f64 * 0.3).sin()));
    assert_eq!(m.forward(&p, &store, x).unwrap().shape(), vec![2, 3]);
    let mut store = ParamStore::new();
    let m = small_model(&mut store, 1, 1, 16, Readout::PerStep);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::zeros(&[1, 1, 16]));
    assert_eq!(m.forward(&p, &store, x).unwrap().shape(), vec![1, 1, 16]);
    assert!(m.forward(&p, &store, tape.constant(Tensor::zeros(&[1, 2, 16]))).is_err());
}

#[test]
fn backbone_is_causal() {
    let mut store = ParamStore::new();
    let m = small_model(&mut store, 1, 1, 24, Readout::PerStep);
    let run = |x: Tensor| {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        m.forward(&p, &store, tape.constant(x)).unwrap().value()
    };
    let x = Tensor::from_fn(&[1, 1, 24], |i| (i as f64).cos());
    let mut x2 = x.clone();
    x2.data_mut()[20] += 5.0;
    let (a, b) = (run(x), run(x2));
    for t in 0..20 {
        assert!((a.data()[t] - b.data()[t]).abs() < 1e-12, "t={t}");
    }
    assert!((a.data()[21] - b.data()[21]).abs() > 1e-9);
}

#[test]
fn construction_is_seed_deterministic() {
    let (mut s1, mut s2) = (ParamStore::new(), ParamStore::new());
    small_model(&mut s1, 2, 1, 12, Readout::LastStep);
    small_model(&mut s2, 2, 1, 12, Readout::LastStep);
    assert_eq!(s1.to_json(), s2.to_json());
}

fn arch_model(store: &mut ParamStore, init_depth: usize) -> Backbone {
    let mut kc = KernelConfig::new(siren());
    kc.hidden = 8;
    kc.layers = 2;
    kc.mode = ConvMode::Causal;
    let mut cfg = BackboneConfig::new(1, 1, 6, kc);
    cfg.end_activation = EndActivation::OnBranch;
    cfg.arch = Some(crate::archmask::ArchConfig {
        max_channels: 6,
        max_depth: 3,
        init_channels: 6,
        init_depth,
        tau_width: 20.0,
        tau_depth: 20.0,
        resolution: false,
        tau_res: 40.0,
        init_resolution: None,
        threshold: 0.1,
    });
    Backbone::new(store, cfg, 16, 3).unwrap()
}

#[test]
fn materialized_depth_matches_masked_network() {
    let mut store = ParamStore::new();
    let m = arch_model(&mut store, 2);
    let snap = m.snapshot(&store);
    assert_eq!(snap.active_blocks, 2);
    let slim = m.materialize_depth(&store);
    assert_eq!(slim.blocks.len(), 2);
    let x = Tensor::from_fn(&[2, 1, 16], |i| (i as f64 * 0.7).sin());
    let run = |model: &Backbone| {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        model.forward(&p, &store, tape.constant(x.clone())).unwrap().value()
    };
    let (a, b) = (run(&m), run(&slim));
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn zero_branch_is_identity() {
    let mut store = ParamStore::new();
    let m = arch_model(&mut store, 3);
    for blk in &m.blocks {
        let w = store.get(blk.pw.w).shape().to_vec();
        store.set(blk.pw.w, Tensor::zeros(&w));
        store.set(blk.pw.b, Tensor::zeros(&[w[0]]));
    }
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let x = tape.constant(Tensor::from_fn(&[1, 1, 16], |i| i as f64 * 0.1));
    let tr = m.forward_trace(&p, &store, x, Deployment::default()).unwrap();
    let (first, last) = (tr.inputs[0].value(), tr.hidden.value());
    for (u, v) in first.data().iter().zip(last.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn adam_training_reduces_loss_and_is_deterministic() {
    let spec = TaskSpec {
        kind: TaskKind::Adding,
        length: 12,
        samples: 64,
        test_samples: 32,
        seed: 4,
        target: None,
        resolution: None,
    };
    let (tr, te) = spec.build().unwrap();
    let run = || {
        let mut store = ParamStore::new();
        let m = small_model(&mut store, 2, 1, 12, Readout::LastStep);
        let mut cfg = TrainConfig::new(60, 9);
        cfg.batch_size = 16;
        cfg.optimizer.lr = 5e-3;
        train(&m, &mut store, &tr, &te, &cfg, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.final_eval, b.final_eval);
    let early: f64 = a.steps[..10].iter().map(|s| s.task_loss).sum::<f64>() / 10.0;
    let late: f64 = a.steps[50..].iter().map(|s| s.task_loss).sum::<f64>() / 10.0;
    assert!(late < early, "{early} -> {late}");
}

#[test]
fn copy_memory_training_step_runs() {
    let spec = TaskSpec {
        kind: TaskKind::CopyMemory,
        length: 4,
        samples: 8,
        test_samples: 8,
        seed: 1,
        target: None,
        resolution: None,
    };
    let (tr, te) = spec.build().unwrap();
    let mut store = ParamStore::new();
    let m = small_model(&mut store, 10, 10, spec.seq_len(), Readout::PerStep);
    let out = train(&m, &mut store, &tr, &te, &TrainConfig::new(2, 0), |_| {}).unwrap();
    let acc = out.final_eval.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.final_eval.loss.is_finite());
}

#[test]
fn fit_step_target() {
    let cfg = FitConfig {
        field: FieldVariant::SineMlp { omega0: 30.0 },
        layers: 3,
        hidden: 32,
        weight_norm: false,
        target: FieldTarget::Gaussian,
        points: 64,
        steps: 400,
        optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        lambda_alias: 0.0,
        alias_mode: Default::default(),
        mask: None,
        mask_lr_factor: 1.0,
        seed: 0,
        precision: Default::default(),
    };
    let r = fit_field(&cfg).unwrap();
    assert!(r.final_mse < 1e-3, "{}", r.final_mse);
    assert!(r.budget.is_none());
}

#[test]
fn resolution_factor_validation() {
    let spec = TaskSpec {
        kind: TaskKind::ResolutionShift,
        length: 32,
        samples: 4,
        test_samples: 4,
        seed: 0,
        target: None,
        resolution: None,
    };
    let mut store = ParamStore::new();
    let m = small_model(&mut store, 1, 1, spec.seq_len(), Readout::PerStep);
    assert!(eval_resolution_shift(&m, &store, &spec, 3.0, true).is_err());
    let r = eval_resolution_shift(&m, &store, &spec, 0.5, true).unwrap();
    assert_eq!(r.layers.len(), m.blocks.len());
    assert!(r.mse.is_finite());
    assert!(eval_resolution_shift(&m, &store, &spec, 2.0, false).unwrap().layers.is_empty());
}
