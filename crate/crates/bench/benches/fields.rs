use ckconv::fields::{coord_grid, FieldSpec};
use ckconv::ConvMode;
use ckconv_bench::field;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn evaluate(c: &mut Criterion) {
    let mut g = c.benchmark_group("field_eval");
    for &k in &[33usize, 257, 1025] {
        let grid = coord_grid(k, 1, ConvMode::Causal).unwrap();
        let (siren, s1) = field(FieldSpec::siren(16, 16, 30.0));
        let (magnet, s2) = field(FieldSpec::magnet(16, 16));
        g.bench_with_input(BenchmarkId::new("sine_mlp", k), &k, |b, _| b.iter(|| siren.eval_value(&s1, &grid).unwrap()));
        g.bench_with_input(BenchmarkId::new("magnet", k), &k, |b, _| b.iter(|| magnet.eval_value(&s2, &grid).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, evaluate);
criterion_main!(benches);
