use criterion::{criterion_group, criterion_main, Criterion};

use koopman_deviation::config::RunConfig;
use koopman_deviation::deviation::grid_sweep;
use koopman_deviation::dynamics::paper_example_system;
use koopman_deviation::exec::Execution;
use koopman_deviation::verify::identify_example_model;

fn sweep(c: &mut Criterion) {
    let cfg = RunConfig {
        resolution: 5,
        step: 1e-2,
        ..RunConfig::default()
    };
    let model = identify_example_model(&cfg).expect("model");
    let system = paper_example_system();
    let weights = cfg.weights().unwrap();
    let region = cfg.region().unwrap();
    let opts = cfg.deviation_options();

    let mut group = c.benchmark_group("grid_sweep_5x5");
    group.sample_size(10);
    for (name, mode) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| grid_sweep(&system, &model, &weights, &region, cfg.resolution, &opts, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
