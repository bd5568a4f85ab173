use ifsl_core::attractor::{AttractorMode, MetaParams};
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::desk::{DeskSetup, PretrainConfig, WorldConfig};
use ifsl_core::exec::Execution;
use ifsl_core::implicit_grad::RbpConfig;
use ifsl_core::inner_solver::SolverConfig;
use ifsl_core::meta::{
    base_prototypes, evaluate, meta_train, GradientMethod, InnerEval, Learner, LrSchedule,
    MetaTrainConfig,
};
use ifsl_core::model::ModelConfig;

fn desk() -> DeskSetup {
    DeskSetup::build(&WorldConfig::default(), &PretrainConfig::default()).unwrap()
}

fn config(setup: &DeskSetup, kind: ClassifierKind, mode: AttractorMode, steps: usize) -> MetaTrainConfig {
    MetaTrainConfig {
        episode: setup.episode_config(1, 5, 5),
        model: ModelConfig::new(kind, mode),
        solver: SolverConfig::default(),
        rbp: RbpConfig::default(),
        gradient: GradientMethod::Rbp,
        steps,
        schedule: LrSchedule {
            base_lr: 1e-2,
            ..LrSchedule::default()
        },
        meta_batch: 1,
        seed: 3,
    }
}

fn smoothed(values: &[f64]) -> (f64, f64) {
    let w = 30;
    let head = values[..w].iter().sum::<f64>() / w as f64;
    let tail = values[values.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

#[test]
fn query_loss_falls_over_training() {
    let setup = desk();
    let cfg = config(&setup, ClassifierKind::Lr, AttractorMode::Attention, 300);
    let init = MetaParams::init(16, ClassifierKind::Lr, 1);
    let (_, log) = meta_train(&setup.world, &setup.base, init, &cfg, Execution::Parallel).unwrap();
    assert_eq!(log.len(), 300);
    let losses: Vec<f64> = log.iter().map(|r| r.query_loss).collect();
    let (head, tail) = smoothed(&losses);
    assert!(tail < head, "{head} -> {tail}");
    assert!(log.iter().all(|r| r.neumann_residual.is_finite() && r.lr == 1e-2));
}

#[test]
fn zero_steps_and_vanilla_leave_theta_alone() {
    let setup = desk();
    let init = MetaParams::init(16, ClassifierKind::Lr, 1);
    let cfg = config(&setup, ClassifierKind::Lr, AttractorMode::Attention, 0);
    let (out, log) = meta_train(&setup.world, &setup.base, init.clone(), &cfg, Execution::Parallel).unwrap();
    assert!(log.is_empty());
    assert_eq!(out.to_vec(), init.to_vec());

    let cfg = config(&setup, ClassifierKind::Lr, AttractorMode::Vanilla, 5);
    let (out, _) = meta_train(&setup.world, &setup.base, init.clone(), &cfg, Execution::Parallel).unwrap();
    assert_eq!(out.to_vec(), init.to_vec());
}

#[test]
fn training_is_identical_across_execution_modes() {
    let setup = desk();
    let mut cfg = config(&setup, ClassifierKind::Mlp, AttractorMode::Attention, 6);
    cfg.meta_batch = 3;
    let init = MetaParams::init(16, ClassifierKind::Mlp, 2);
    let (a, la) = meta_train(&setup.world, &setup.base, init.clone(), &cfg, Execution::Sequential).unwrap();
    let (b, lb) = meta_train(&setup.world, &setup.base, init, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    assert_eq!(la, lb);
}

#[test]
fn unrolled_training_runs() {
    let setup = desk();
    let mut cfg = config(&setup, ClassifierKind::Lr, AttractorMode::Static, 20);
    cfg.gradient = "tbptt:5".parse().unwrap();
    let init = MetaParams::init(16, ClassifierKind::Lr, 1);
    let (out, log) = meta_train(&setup.world, &setup.base, init.clone(), &cfg, Execution::Parallel).unwrap();
    assert_eq!(log.len(), 20);
    assert_ne!(out.to_vec(), init.to_vec());
    assert!(log.iter().all(|r| r.neumann_residual == 0.0));
}

#[test]
fn evaluation_is_pure_in_its_seed() {
    let setup = desk();
    let meta = MetaParams::init(16, ClassifierKind::Lr, 1);
    let ep = setup.episode_config(1, 5, 5);
    let learner = Learner::Attractor {
        meta: &meta,
        model: ModelConfig::new(ClassifierKind::Lr, AttractorMode::Attention),
        inner: InnerEval::Converged(SolverConfig::default()),
    };
    let a = evaluate(&learner, &setup.base, &setup.world, &ep, 40, 5, Execution::Sequential).unwrap();
    let b = evaluate(&learner, &setup.base, &setup.world, &ep, 40, 5, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episode_count, 40);
    assert_eq!(a.delta, (a.delta_a + a.delta_b) / 2.0);
    for acc in [a.acc_base_joint, a.acc_novel_joint, a.acc_both, a.acc_base_individual, a.acc_novel_individual] {
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(evaluate(&learner, &setup.base, &setup.world, &ep, 0, 5, Execution::Parallel).is_err());
}

#[test]
fn baselines_evaluate() {
    let setup = desk();
    let ep = setup.episode_config(5, 5, 5);
    let protos = base_prototypes(&setup.world.base_dataset(50, 4), 16).unwrap();
    let proto = evaluate(&Learner::ProtoNet { prototypes: &protos }, &setup.base, &setup.world, &ep, 50, 1, Execution::Parallel)
        .unwrap();
    let imprint = evaluate(&Learner::Imprint, &setup.base, &setup.world, &ep, 50, 1, Execution::Parallel).unwrap();
    // Gaussian clusters: nearest mean is close to the Bayes rule.
    assert!(proto.acc_both > 0.8, "{proto:?}");
    assert!(imprint.acc_novel_individual > 0.8, "{imprint:?}");
}
