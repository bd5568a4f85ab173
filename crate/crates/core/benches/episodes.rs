use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ifsl_core::attractor::{AttractorMode, MetaParams};
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::desk::{DeskSetup, PretrainConfig, WorldConfig};
use ifsl_core::exec::Execution;
use ifsl_core::implicit_grad::RbpConfig;
use ifsl_core::inner_solver::SolverConfig;
use ifsl_core::meta::{evaluate, meta_train, GradientMethod, InnerEval, Learner, LrSchedule, MetaTrainConfig};
use ifsl_core::model::ModelConfig;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let setup = DeskSetup::build(&WorldConfig::default(), &PretrainConfig::default()).unwrap();
    let episode = setup.episode_config(1, 5, 5);
    let model = ModelConfig::new(ClassifierKind::Lr, AttractorMode::Attention);
    let meta = MetaParams::init(setup.world.dim(), ClassifierKind::Lr, 1);

    let mut group = c.benchmark_group("evaluate_64_episodes");
    group.sample_size(10);
    let learner = Learner::Attractor {
        meta: &meta,
        model: model.clone(),
        inner: InnerEval::Converged(SolverConfig::default()),
    };
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&learner, &setup.base, &setup.world, &episode, 64, 3, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("meta_train_batch_16");
    group.sample_size(10);
    let cfg = MetaTrainConfig {
        episode,
        model,
        solver: SolverConfig::default(),
        rbp: RbpConfig::default(),
        gradient: GradientMethod::Rbp,
        steps: 2,
        schedule: LrSchedule::default(),
        meta_batch: 16,
        seed: 5,
    };
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| meta_train(&setup.world, &setup.base, meta.clone(), &cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
