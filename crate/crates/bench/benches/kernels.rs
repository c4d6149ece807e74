use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use simba_bench::phantom_fixture;
use simba_core::gibbs::GibbsSampler;
use simba_core::kernel::{nystrom_decompose, select_inducing, InducingStrategy, KernelConfig};
use simba_core::model::{init_state, PriorConfig};
use simba_core::rng::stream_rng;
use simba_core::simstudy::phantom_domain;
use simba_core::vi::{CaviWorkspace, VariationalState};

fn gibbs_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("gibbs_step");
    for l in [60, 120] {
        let (basis, t) = phantom_fixture(200, l);
        let init = init_state(&t, &basis, 1);
        let mut s = GibbsSampler::new(&t, &basis, PriorConfig::default(), init, false).unwrap();
        let mut rng = stream_rng(1, 0);
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, _| b.iter(|| s.step(&mut rng).unwrap()));
    }
    g.finish();
}

fn nystrom(c: &mut Criterion) {
    let domain = phantom_domain().unwrap();
    let cfg = KernelConfig::matern(0.5, 0.3);
    let mut g = c.benchmark_group("nystrom");
    g.sample_size(10);
    for l in [60, 120, 240] {
        let ind = select_inducing(&domain, l, InducingStrategy::FarthestPoint, 1).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, &l| {
            b.iter(|| nystrom_decompose(&domain, &ind, &cfg, l).unwrap())
        });
    }
    g.finish();
}

fn vi_sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("vi_sweep");
    for l in [60, 120] {
        let (basis, t) = phantom_fixture(200, l);
        let mut ws = CaviWorkspace::new(&t, &basis, PriorConfig::default()).unwrap();
        let mut q = VariationalState::init(&t, &basis, 1);
        ws.refresh(&q);
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, _| b.iter(|| ws.sweep(&mut q, false).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, gibbs_step, nystrom, vi_sweep);
criterion_main!(benches);
