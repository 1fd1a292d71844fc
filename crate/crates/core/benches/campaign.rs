use criterion::{criterion_group, criterion_main, Criterion};
use gmle_mix::npmle::EmConfig;
use gmle_mix::sim::{run_campaign, AxisLaw, GridConfig, GroupSpec, ModelSpec, PopulationSpec};

const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

fn bench_campaign(c: &mut Criterion) {
    let spec = PopulationSpec {
        model: ModelSpec::BinomialSizes { kappa: 4 },
        groups: vec![
            GroupSpec {
                n_strata: 100,
                size: AxisLaw::Fixed(0.8),
                p: AxisLaw::Fixed(0.2),
            },
            GroupSpec {
                n_strata: 100,
                size: AxisLaw::Fixed(0.2),
                p: AxisLaw::Fixed(0.8),
            },
        ],
    };
    let grid = GridConfig::square(0.0, 1.0, 20);
    let em = EmConfig::iterations(200);
    let mut group = c.benchmark_group(format!("campaign_{MODE}"));
    group.sample_size(10);
    group.bench_function("binomial_16_reps", |b| {
        b.iter(|| run_campaign(&spec, &grid, &em, 16, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_campaign);
criterion_main!(benches);
