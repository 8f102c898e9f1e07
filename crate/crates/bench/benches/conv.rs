use ckconv::conv::{conv_direct, conv_fft};
use ckconv::{ConvMode, Tape};
use ckconv_bench::{kernel, signal};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn direct_vs_fft(c: &mut Criterion) {
    let mut g = c.benchmark_group("causal_conv");
    for &t in &[64usize, 256, 1024] {
        let x = signal(4, 8, t);
        let w = kernel(8, 8, t);
        g.bench_with_input(BenchmarkId::new("direct", t), &t, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                conv_direct(tape.constant(x.clone()), tape.constant(w.clone()), ConvMode::Causal).unwrap().value()
            })
        });
        g.bench_with_input(BenchmarkId::new("fft", t), &t, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                conv_fft(tape.constant(x.clone()), tape.constant(w.clone()), ConvMode::Causal).unwrap().value()
            })
        });
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let x = signal(4, 8, 512);
    let w = kernel(8, 8, 512);
    c.bench_function("fft_conv_backward_512", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let wv = tape.var(w.clone());
            let y = conv_fft(tape.constant(x.clone()), wv, ConvMode::Causal).unwrap();
            tape.backward(y.square().mean()).unwrap().wrt(wv)
        })
    });
}

criterion_group!(benches, direct_vs_fft, backward);
criterion_main!(benches);
