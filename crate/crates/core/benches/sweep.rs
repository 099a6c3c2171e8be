use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prefopt::datagen::{sample_tuples, PairMode};
use prefopt::experiments::{build_interpolation_instance, run_interpolation, ExperimentConfig};
use prefopt::losses::{loss_and_gradient_with, make_loss_spec, EvaluationMode};
use prefopt::par::Execution;
use prefopt::{LossKind, PolicyModel};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn sweep(c: &mut Criterion) {
    let cfg = ExperimentConfig { steps: Some(200), ..ExperimentConfig::default() };
    let mut group = c.benchmark_group("interpolation_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_interpolation(&LossKind::PRESETS, None, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn sampled_loss(c: &mut Criterion) {
    let inst = build_interpolation_instance();
    let model = PolicyModel::from_policies(&inst, &[vec![0.5, 0.35, 0.15]]).unwrap();
    let data = sample_tuples(&inst, 100_000, PairMode::UniformPairs, 1).unwrap();
    let spec = make_loss_spec(LossKind::Dpo, 0.1).unwrap();
    let mode = EvaluationMode::sampled(data.tuples());
    let mut group = c.benchmark_group("sampled_loss_and_gradient_1e5");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_gradient_with(exec, &spec, &model, &inst, &mode, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep, sampled_loss);
criterion_main!(benches);
