//! Input builders shared by the benchmarks.

use ckconv::fields::{FieldSpec, KernelField};
use ckconv::params::ParamStore;
use ckconv::Tensor;

/// Deterministic pseudo-random `[b, c, t]` signal.
pub fn signal(b: usize, c: usize, t: usize) -> Tensor {
    Tensor::from_fn(&[b, c, t], |i| ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 2.0)
}

/// Deterministic `[o, c, k]` kernel.
pub fn kernel(o: usize, c: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[o, c, k], |i| ((i as f64 * 0.414_213_562_3).fract() - 0.5) / k as f64)
}

pub fn field(spec: FieldSpec) -> (KernelField, ParamStore) {
    let mut store = ParamStore::new();
    let f = KernelField::new(&mut store, "bench", spec, 0).expect("valid spec");
    (f, store)
}
