use criterion::{criterion_group, criterion_main, Criterion};
use dsv_bench::{bench_probe_data, bench_trials};
use dsv_core::eval::{compute_eer, kfold_probe, ProbeConfig, ProbeKind};

fn eer(c: &mut Criterion) {
    for n in [1_000, 18_336, 100_000] {
        let t = bench_trials(n, 3);
        c.bench_function(&format!("compute_eer/{n}"), |b| b.iter(|| compute_eer(&t).unwrap()));
    }
}

fn probes(c: &mut Criterion) {
    let (x, y) = bench_probe_data(12, 12, 8, 5);
    let mut g = c.benchmark_group("kfold_probe");
    g.sample_size(10);
    for kind in [ProbeKind::Linear, ProbeKind::Gru, ProbeKind::GruFc] {
        let cfg = ProbeConfig { max_epochs: 50, hidden: 64, ..ProbeConfig::with_kind(kind) };
        g.bench_function(format!("{kind:?}/144x8"), |b| b.iter(|| kfold_probe(&x, &y, 8, &cfg, 0).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, eer, probes);
criterion_main!(benches);
