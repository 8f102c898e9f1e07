use proptest::prelude::*;

use super::*;
use crate::autodiff::{finite_diff_check, Tape};
use crate::rng::{normal, seeded};

fn cfg(resolution: bool) -> ArchConfig {
    ArchConfig {
        max_channels: 16,
        max_depth: 3,
        init_channels: 8,
        init_depth: 2,
        tau_width: 20.0,
        tau_depth: 8.0,
        resolution,
        tau_res: 40.0,
        init_resolution: Some(24),
        threshold: DEFAULT_THRESHOLD,
    }
}

#[test]
fn open_width_mask_is_identity_and_closed_channels_vanish() {
    let mut store = ParamStore::new();
    let masks = ArchMasks::new(&mut store, "a", &cfg(false), 32).unwrap();
    let x = normal(&mut seeded(1), &[2, 16, 5], 1.0);
    let m = &masks.blocks[0].n_mid;
    let tape = Tape::new();
    let y = width_mask_apply(tape.constant(x.clone()), m, &store.bind(&tape), 16).unwrap().value();
    let support = m.support_count(&store, &m.axis_coords(16));
    assert_eq!(support, 8);
    for c in 0..16 {
        for t in 0..5 {
            let v = y.at(&[0, c, t]);
            if c >= support {
                assert_eq!(v, 0.0);
            } else {
                assert!(v != 0.0);
            }
        }
    }
    store.set(m.mu, Tensor::scalar(1e3));
    let y = width_mask_apply(tape.constant(x.clone()), m, &store.bind(&tape), 16).unwrap().value();
    assert_eq!(y, x);
    assert!(width_mask_apply(tape.constant(normal(&mut seeded(2), &[1, 17, 2], 1.0)), m, &store.bind(&tape), 16).is_err());
}

#[test]
fn width_mask_gradient_reaches_the_centre() {
    let mut store = ParamStore::new();
    let masks = ArchMasks::new(&mut store, "a", &cfg(false), 32).unwrap();
    let m = masks.blocks[0].n_out.clone();
    let x = normal(&mut seeded(3), &[1, 16, 4], 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let loss = width_mask_apply(tape.constant(x.clone()), &m, &p, 16).unwrap().sum();
    let g = tape.backward(loss).unwrap().wrt(p.get(m.mu)).item();
    assert!(g.abs() > 1e-6);
    let err = finite_diff_check(
        |t, v| Ok(width_mask_apply(t.constant(x.clone()), &m, &store.bind_override(t, m.mu, v), 16)?.sum()),
        store.get(m.mu),
        1e-7,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn depth_mask_extremes() {
    let tape = Tape::new();
    let r = tape.constant(normal(&mut seeded(4), &[1, 2, 3], 1.0));
    let i = tape.constant(normal(&mut seeded(5), &[1, 2, 3], 1.0));
    let zero = depth_mask_apply(r, i, tape.scalar(0.0)).unwrap().value();
    assert_eq!(zero, i.value());
    let full = depth_mask_apply(r, i, tape.scalar(1.0)).unwrap().value();
    assert!(full.max_abs_diff(&i.add(r).unwrap().value()) == 0.0);
}

#[test]
fn depth_weights_follow_the_initial_depth() {
    let mut store = ParamStore::new();
    let masks = ArchMasks::new(&mut store, "a", &cfg(false), 32).unwrap();
    assert_eq!(masks.active_blocks(&store), vec![true, true, false]);
    assert_eq!(masks.depth_weight_value(&store, 2), 0.0);
    assert!((masks.depth.size_value(&store) - 2.0).abs() < 1e-12);
    assert!(ArchMasks::new(&mut ParamStore::new(), "a", &ArchConfig { init_depth: 4, ..cfg(false) }, 32).is_err());
}

#[test]
fn layer_cost_examples() {
    let tape = Tape::new();
    let s = |v: f64| tape.scalar(v);
    let lin = layer_cost(LayerCost::Linear { res: s(4.0), n_in: s(3.0), n_out: s(5.0) }).unwrap().item();
    let fc = layer_cost(LayerCost::FourierConv { res: s(8.0) }).unwrap().item();
    let pw = layer_cost(LayerCost::Pointwise { res: s(4.0), n: s(3.0) }).unwrap().item();
    assert_eq!(lin, 60.0);
    assert!((fc - 24.0).abs() < 1e-12);
    assert_eq!(pw, 12.0);
    let half = layer_cost(LayerCost::Linear { res: s(2.0), n_in: s(3.0), n_out: s(5.0) }).unwrap().item();
    assert_eq!(half, 30.0);
}

#[test]
fn complexity_loss_examples() {
    let tape = Tape::new();
    assert_eq!(complexity_loss(tape.scalar(10.0), 10.0).unwrap().item(), 0.0);
    assert_eq!(complexity_loss(tape.scalar(20.0), 10.0).unwrap().item(), 1.0);
    assert_eq!(complexity_loss(tape.scalar(5.0), 10.0).unwrap().item(), 0.25);
    assert!(complexity_loss(tape.scalar(5.0), 0.0).is_err());
}

#[test]
fn initial_ratio_is_one_and_cost_gradients_match() {
    let mut store = ParamStore::new();
    let masks = ArchMasks::new(&mut store, "a", &cfg(true), 32).unwrap();
    let model = ComplexityModel::at_init(&masks, &store).unwrap();
    assert!(model.c_target > 0.0);
    assert_eq!(model.ratio(&masks, &store).unwrap(), 1.0);
    for id in masks.param_ids() {
        let err = finite_diff_check(|t, v| network_cost(&masks, &store.bind_override(t, id, v)), store.get(id), 1e-6)
            .unwrap();
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

#[test]
fn blocks_beyond_depth_cost_nothing() {
    let mut store = ParamStore::new();
    let masks = ArchMasks::new(&mut store, "a", &ArchConfig { init_depth: 1, tau_depth: 20.0, ..cfg(false) }, 32).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let one_block = block_cost(masks.block_sizes(&p, 0).unwrap()).unwrap().item();
    assert!((network_cost(&masks, &p).unwrap().item() - one_block).abs() < 1e-9 * one_block);
}

proptest! {
    #[test]
    fn block_cost_is_monotone(sizes in prop::array::uniform4(1.0f64..64.0), which in 0usize..4, bump in 0.0f64..10.0) {
        let tape = Tape::new();
        let mk = |v: [f64; 4]| BlockSizes { res: tape.scalar(v[0]), n_in: tape.scalar(v[1]), n_mid: tape.scalar(v[2]), n_out: tape.scalar(v[3]) };
        let mut bigger = sizes;
        bigger[which] += bump;
        let a = block_cost(mk(sizes)).unwrap().item();
        let b = block_cost(mk(bigger)).unwrap().item();
        prop_assert!(b >= a);
    }
}
