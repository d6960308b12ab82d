use criterion::{criterion_group, criterion_main, Criterion};
use vip_bench::{crescent, operators};
use vip_core::Tape;

fn apply(c: &mut Criterion) {
    let x = crescent(32);
    let mut group = c.benchmark_group("forward_apply_32");
    for op in operators(32) {
        group.bench_function(op.model().kind.name(), |b| b.iter(|| op.apply(&x).unwrap()));
    }
    group.finish();
}

fn apply_backward(c: &mut Criterion) {
    let x = crescent(32);
    let mut group = c.benchmark_group("forward_backward_32");
    for op in operators(32) {
        group.bench_function(op.model().kind.name(), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let v = tape.leaf(x.clone());
                op.apply_var(v).unwrap().sum().unwrap().backward().unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, apply, apply_backward);
criterion_main!(benches);
