use criterion::{criterion_group, criterion_main, Criterion};

use anomseg::harness::data::{gen_synthetic, SyntheticParams};
use anomseg::harness::eval::evaluate;
use anomseg::losses::LossConfig;
use anomseg::pipeline::batch_gradients;
use anomseg::{build_model, Exec, ModelConfig};

fn bench(c: &mut Criterion) {
    let model = build_model(&ModelConfig::default(), 0).unwrap();
    let data = gen_synthetic(
        &SyntheticParams {
            count: 16,
            ..SyntheticParams::default()
        },
        1,
    )
    .unwrap();
    let batch: Vec<_> = data.iter().take(8).collect();
    let loss = LossConfig::default();

    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        g.bench_function(name, |b| b.iter(|| batch_gradients(&model, &batch, &loss, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        g.bench_function(name, |b| b.iter(|| evaluate(&model, &data, exec, "").unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
