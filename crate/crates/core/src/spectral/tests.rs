use proptest::prelude::*;

use super::*;
use crate::autodiff::{finite_diff_check, ConvMode};
use crate::fields::{coord_grid, FieldSpec, GaborLayer};

fn magnet(seed: u64, layers: usize, hidden: usize, in_dim: usize) -> (KernelField, ParamStore) {
    let mut spec = FieldSpec::magnet(1, 1);
    spec.layers = layers;
    spec.hidden = hidden;
    spec.in_dim = in_dim;
    let mut store = ParamStore::new();
    let f = KernelField::new(&mut store, "k", spec, seed).unwrap();
    (f, store)
}

fn set_layer(store: &mut ParamStore, g: &GaborLayer, w: &[f64], gamma: &[f64]) {
    let (ws, gs) = (store.get(g.filter.weight_id()).shape().to_vec(), store.get(g.gamma).shape().to_vec());
    store.set(g.filter.weight_id(), Tensor::new(&ws, w.to_vec()).unwrap());
    store.set(g.gamma, Tensor::new(&gs, gamma.to_vec()).unwrap());
}

fn value<'a>(store: &ParamStore, f: impl for<'t> FnOnce(&Bound<'t>) -> Result<Var<'t>>) -> f64 {
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    f(&p).unwrap().item()
}

#[test]
fn gabor_arithmetic() {
    let (f, mut s) = magnet(0, 1, 1, 2);
    let g = f.gabor_layers()[0].clone();
    set_layer(&mut s, &g, &[2.0 * PI, -1.0], &[PI, PI]);
    assert!((value(&s, |p| Ok(gabor_max_freq(&f, p, 0, 2.0)?.max)) - 2.0).abs() < 1e-12);
    set_layer(&mut s, &g, &[2.0 * PI, 0.0], &[1e-300, 1e-300]);
    assert!((value(&s, |p| Ok(gabor_max_freq(&f, p, 0, 2.0)?.max)) - 1.0).abs() < 1e-12);
    set_layer(&mut s, &g, &[0.0, 0.0], &[2.0 * PI, 4.0 * PI]);
    assert!((value(&s, |p| Ok(gabor_max_freq(&f, p, 0, 2.0)?.max)) - 2.0).abs() < 1e-12);
}

#[test]
fn layer_sums() {
    let (f, s) = magnet(3, 1, 8, 1);
    let single = value(&s, |p| Ok(gabor_max_freq(&f, p, 0, 2.0)?.max));
    assert_eq!(value(&s, |p| magnet_max_freq(&f, p, 2.0)), single);

    let (f2, mut s2) = magnet(3, 2, 8, 1);
    let (a, b) = (f2.gabor_layers()[0].clone(), f2.gabor_layers()[1].clone());
    for (src, dst) in [(a.gamma, b.gamma), (a.filter.weight_id(), b.filter.weight_id())] {
        let v = s2.get(src).clone();
        s2.set(dst, v);
    }
    let one = value(&s2, |p| Ok(gabor_max_freq(&f2, p, 0, 2.0)?.max));
    assert_eq!(value(&s2, |p| magnet_max_freq(&f2, p, 2.0)), 2.0 * one);
}

#[test]
fn non_magnet_is_contract_error() {
    let mut s = ParamStore::new();
    let f = KernelField::new(&mut s, "k", FieldSpec::siren(1, 1, 30.0), 0).unwrap();
    let tape = Tape::new();
    assert!(matches!(magnet_max_freq(&f, &s.bind_constant(&tape), 2.0), Err(Error::Contract(_))));
}

#[test]
fn pure_sine_dominant_bin() {
    for f0 in [3.0, 7.5, 20.0] {
        let (f, mut s) = magnet(1, 1, 1, 1);
        let g = f.gabor_layers()[0].clone();
        set_layer(&mut s, &g, &[2.0 * PI * f0], &[1e-12]);
        s.set(g.filter.bias, Tensor::zeros(&[1]));
        let fplus = value(&s, |p| magnet_max_freq(&f, p, 2.0));
        let grid = coord_grid(256, 1, ConvMode::Centered).unwrap();
        let k = f.eval_value(&s, &grid).unwrap();
        let span = 256.0 * grid.spacing();
        let spec = power_spectrum(k.data(), span);
        assert!((dominant_frequency(&spec) - fplus).abs() <= 1.0 / span + 1e-12, "f0={f0}");
    }
}

#[test]
fn flexconv_mask_term() {
    let (f, mut s) = magnet(2, 3, 8, 1);
    let m = Mask::gaussian_with_variance(&mut s, "m", 1.0 / (PI * PI), 0.01, 0.0, 0.1, true).unwrap();
    assert!((value(&s, |p| mask_freq(std::slice::from_ref(&m), p, 2.0)) - 1.0).abs() < 1e-12);
    let total = value(&s, |p| flexconv_max_freq(&f, std::slice::from_ref(&m), p, 2.0));
    let parts = value(&s, |p| magnet_max_freq(&f, p, 2.0)) + value(&s, |p| mask_freq(std::slice::from_ref(&m), p, 2.0));
    assert_eq!(total, parts);
    s.set(m.sigma2.unwrap(), Tensor::scalar(1e12));
    assert!(value(&s, |p| mask_freq(std::slice::from_ref(&m), p, 2.0)) < 1e-6);
}

#[test]
fn nyquist_values() {
    assert_eq!(nyquist_freq(33), 8.0);
    assert_eq!(nyquist_freq(5), 1.0);
    assert_eq!(nyquist_freq(1), 0.0);
}

/// One-layer, one-unit MAGNet whose bound is exactly `f` (no envelope term).
fn field_with_bound(f: f64) -> (KernelField, ParamStore) {
    let (field, mut s) = magnet(0, 1, 1, 1);
    let g = field.gabor_layers()[0].clone();
    set_layer(&mut s, &g, &[2.0 * PI * f], &[1e-300]);
    (field, s)
}

#[test]
fn alias_loss_examples() {
    let k = 33;
    let (f, s) = field_with_bound(7.0);
    assert_eq!(value(&s, |p| alias_loss(&f, &[], p, k, AliasMode::Summed, 2.0)), 0.0);
    let (f, s) = field_with_bound(9.0);
    let l = value(&s, |p| alias_loss(&f, &[], p, k, AliasMode::Summed, 2.0));
    assert!((l - 1.0).abs() < 1e-12);
    assert!((DEFAULT_ALIAS_WEIGHT * l - 0.1).abs() < 1e-12);
    assert_eq!(l, value(&s, |p| alias_loss(&f, &[], p, k, AliasMode::PerLayer, 2.0)));
    let tape = Tape::new();
    assert!(alias_loss(&f, &[], &s.bind_constant(&tape), 1, AliasMode::Summed, 2.0).is_err());
}

#[test]
fn per_layer_equals_summed_with_mask_for_one_layer() {
    let (f, mut s) = magnet(5, 1, 8, 1);
    let m = Mask::gaussian_with_variance(&mut s, "m", 0.01, 0.01, 0.0, 0.1, true).unwrap();
    let a = value(&s, |p| alias_loss(&f, std::slice::from_ref(&m), p, 17, AliasMode::Summed, 2.0));
    let b = value(&s, |p| alias_loss(&f, std::slice::from_ref(&m), p, 17, AliasMode::PerLayer, 2.0));
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-9 * a);
}

#[test]
fn alias_gradients_match_finite_differences() {
    let (f, mut s) = magnet(9, 3, 4, 1);
    let m = Mask::gaussian_with_variance(&mut s, "m", 0.02, 0.01, 0.0, 0.1, true).unwrap();
    let mut ids = vec![m.sigma2.unwrap()];
    for g in f.gabor_layers() {
        ids.extend([g.gamma, g.filter.weight_id()]);
    }
    for mode in [AliasMode::Summed, AliasMode::PerLayer] {
        for &id in &ids {
            let err = finite_diff_check(
                |t, v| alias_loss(&f, std::slice::from_ref(&m), &s.bind_override(t, id, v), 9, mode, 2.0),
                s.get(id),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?} {}: {err}", s.name(id));
        }
    }
}

#[test]
fn budget_rows() {
    let (f, mut s) = magnet(4, 3, 8, 1);
    let m = Mask::gaussian_with_variance(&mut s, "m", 0.125, 0.01, 0.0, 0.1, true).unwrap();
    let b = FrequencyBudget::compute(&f, std::slice::from_ref(&m), &s, 65, 2.0).unwrap();
    let expected = value(&s, |p| flexconv_max_freq(&f, std::slice::from_ref(&m), p, 2.0));
    assert!((b.f_plus_total - expected).abs() < 1e-9);
    let rows = b.rows();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].layer, "total");
    let sum: f64 = rows[..3].iter().map(|r| r.f_plus).sum();
    assert!((sum - b.f_plus_total).abs() < 1e-9);
    assert!(rows.iter().all(|r| r.violation >= 0.0));
}

#[test]
fn blur_filters() {
    let b = blur_kernel(1.0, 2.0).unwrap();
    assert_eq!(b.taps.len(), 5);
    assert!(b.rounded_from.is_none());
    assert!((b.taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(blur_kernel(3.0, 3.0).unwrap().taps.len(), 3);
    for n in [2.0, 4.0] {
        let t = blur_kernel(1.0, n).unwrap().taps;
        for i in 0..t.len() {
            assert_eq!(t[i], t[t.len() - 1 - i]);
        }
    }
    let r = blur_kernel(2.0, 5.0).unwrap();
    assert_eq!((r.taps.len(), r.rounded_from), (7, Some(2.5)));
    assert!(blur_kernel(2.0, 1.0).is_err());
}

#[test]
fn measured_spectrum_respects_bound() {
    for (seed, c) in survey_magnets(20, 0, 3, 32, 4096).unwrap().into_iter().enumerate() {
        assert!(c.dominant <= c.f_plus, "seed {seed}: {c:?}");
        assert!(c.tail < 0.01, "seed {seed}: {c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn bounds_monotone_in_weights_and_gamma(seed in 0u64..500, idx in 0usize..8, bump in 0.0f64..3.0) {
        let (f, mut s) = magnet(seed, 2, 8, 1);
        let base = value(&s, |p| magnet_max_freq(&f, p, 2.0));
        prop_assert!(base >= 0.0);
        let g = f.gabor_layers()[1].clone();
        let mut w = s.get(g.filter.weight_id()).clone();
        let v = w.data()[idx];
        w.data_mut()[idx] = v + bump * v.signum();
        s.set(g.filter.weight_id(), w);
        let after_w = value(&s, |p| magnet_max_freq(&f, p, 2.0));
        prop_assert!(after_w >= base);
        let gm = s.get(g.gamma).map(|x| x + bump);
        s.set(g.gamma, gm);
        prop_assert!(value(&s, |p| magnet_max_freq(&f, p, 2.0)) >= after_w);
    }

    #[test]
    fn alias_zero_exactly_on_feasible_set(f0 in 0.0f64..20.0, k in 2usize..80) {
        let (f, s) = field_with_bound(f0);
        let l = value(&s, |p| alias_loss(&f, &[], p, k, AliasMode::Summed, 2.0));
        let fplus = value(&s, |p| magnet_max_freq(&f, p, 2.0));
        prop_assert_eq!(l == 0.0, fplus <= nyquist_freq(k));
    }
}
