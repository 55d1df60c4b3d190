use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use latentdif::simulation::Range;
use latentdif::{
    e_step, fit_penalized, generate, make_grid, marginal_loglik, run_path, EmConfig, PathConfig, SimulationDesign,
};

fn e_step_bench(c: &mut Criterion) {
    let grid = make_grid(31).unwrap();
    let mut group = c.benchmark_group("e_step");
    for (j, n, k) in [(25, 1000, 1), (50, 1000, 1), (50, 1000, 2)] {
        let design = if k == 1 { SimulationDesign::two_group(j, n, 0.5) } else { SimulationDesign::three_group(j, n) };
        let bundle = generate(&design, 0).unwrap();
        let id = format!("J{j}_N{n}_K{k}");
        group.bench_function(BenchmarkId::new("posterior", &id), |b| {
            b.iter(|| e_step(black_box(&bundle.data), &bundle.true_params, &grid).unwrap())
        });
        group.bench_function(BenchmarkId::new("loglik", &id), |b| {
            b.iter(|| marginal_loglik(black_box(&bundle.data), &bundle.true_params, &grid).unwrap())
        });
    }
    group.finish();
}

fn fit_bench(c: &mut Criterion) {
    let grid = make_grid(31).unwrap();
    let mut design = SimulationDesign::two_group(25, 1000, 0.5);
    design.dif_effect_ranges = vec![Range::new(1.5, 2.5)];
    let bundle = generate(&design, 0).unwrap();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    let em = EmConfig { n_random_starts: 1, ..EmConfig::default() };
    group.bench_function("penalized_J25_N1000_warm", |b| {
        b.iter(|| fit_penalized(&bundle.data, 1, 8.0, &grid, &em, Some(&bundle.true_params)).unwrap())
    });
    let path = PathConfig::with_lambdas(vec![4.0, 8.0, 16.0]);
    group.bench_function("path_3_lambdas_J25_N1000", |b| {
        b.iter(|| run_path(&bundle.data, 1, &path, &em, &grid).unwrap())
    });
    group.finish();
}

criterion_group!(benches, e_step_bench, fit_bench);
criterion_main!(benches);
