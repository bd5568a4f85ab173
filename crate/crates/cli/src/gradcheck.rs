//! Hypergradient verification suite: scalar oracles, finite differences
//! against RBP on small LR episodes, and the Neumann series against a dense
//! linear solve.

use ifsl_core::attractor::{AttractorMode, MetaParams};
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::desk::{DeskSetup, PretrainConfig, WorldConfig};
use ifsl_core::embeddings::sample_episode;
use ifsl_core::exec::{mix_seed, stream_rng, Execution};
use ifsl_core::implicit_grad::{
    fd_hypergradient, implicit_hypergradient, neumann_rbp, rbp_hypergradient, relative_error,
    unrolled_hypergradient, RbpConfig, ScalarBilevel,
};
use ifsl_core::inner_solver::SolverConfig;
use ifsl_core::model::ModelConfig;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Damping used by the RBP checks; 0 is the exact regime.
    pub epsilon: f64,
    pub neumann_steps: usize,
    /// Relative tolerance of the finite-difference comparison.
    pub fd_tol: f64,
    pub fd_step: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            neumann_steps: 500,
            fd_tol: 1e-4,
            fd_step: 1e-4,
            episodes: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: error <= tolerance,
            error,
            tolerance,
        }
    }
}

fn rbp_config(opts: &GradcheckOptions, alpha: Option<f64>) -> RbpConfig {
    RbpConfig {
        epsilon: opts.epsilon,
        neumann_steps: opts.neumann_steps,
        convergence_tol: None,
        alpha,
    }
}

fn scalar_checks(opts: &GradcheckOptions) -> Result<Vec<CheckResult>, CliError> {
    let solver = SolverConfig::default().with_tol(1e-12);
    let mut out = Vec::new();
    for theta in [-2.0, 0.5, 2.0] {
        let problem = ScalarBilevel::new(theta);
        let rbp = implicit_hypergradient(&problem, &solver, &rbp_config(opts, None))?;
        out.push(CheckResult::new(
            format!("scalar-rbp theta={theta}"),
            (rbp.grad[0] - theta).abs(),
            1e-6,
        ));
        let unrolled = unrolled_hypergradient(&problem, 50, 0.5)?;
        out.push(CheckResult::new(
            format!("scalar-tbptt theta={theta}"),
            (unrolled.grad[0] - theta).abs(),
            1e-6,
        ));
    }
    Ok(out)
}

fn perturbed_meta(dim: usize, seed: u64) -> Result<MetaParams, CliError> {
    let meta = MetaParams::init(dim, ClassifierKind::Lr, seed);
    let mut rng = stream_rng(seed, 1);
    let values: Vec<f64> = (0..meta.len())
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut meta = meta.with_values(&values)?;
    meta.tau = 1.0 + rng.random::<f64>();
    Ok(meta)
}

fn fd_checks(opts: &GradcheckOptions, exec: Execution) -> Result<Vec<CheckResult>, CliError> {
    let world = WorldConfig {
        base_classes: 4,
        novel_pool: 4,
        dim: 8,
        separation: 4.0,
        stddev: 1.0,
        seed: opts.seed,
    };
    let pretrain = PretrainConfig {
        per_class: 30,
        epochs: 100,
        ..PretrainConfig::default()
    };
    let setup = DeskSetup::build(&world, &pretrain)?;
    let cfg = setup.episode_config(5, 2, 3);
    let model = ModelConfig::new(ClassifierKind::Lr, AttractorMode::Attention);
    let tight = SolverConfig::default().with_tol(1e-10);
    let mut out = Vec::new();
    for i in 0..opts.episodes {
        let seed = mix_seed(opts.seed, i as u64);
        let episode = sample_episode(&setup.world, &cfg, seed)?;
        let meta = perturbed_meta(8, seed)?;
        let rbp = rbp_hypergradient(&meta, &episode, &setup.base, &model, &tight, &rbp_config(opts, None), 0)?;
        let fd = fd_hypergradient(&meta, &episode, &setup.base, &model, &tight, opts.fd_step, 0, exec)?;
        out.push(CheckResult::new(
            format!("fd-vs-rbp episode={i}"),
            relative_error(&rbp.grad, &fd),
            opts.fd_tol,
        ));
    }
    Ok(out)
}

/// Random `n x n` matrix rescaled to spectral norm `radius`.
fn random_contraction(n: usize, radius: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 2);
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = m.clone().svd(false, false).singular_values.max();
    m * (radius / norm)
}

fn neumann_checks(opts: &GradcheckOptions) -> Result<Vec<CheckResult>, CliError> {
    let mut out = Vec::new();
    for (i, n) in [3usize, 8, 20].into_iter().enumerate() {
        let j = random_contraction(n, 0.8, mix_seed(opts.seed, 100 + i as u64));
        let mut rng = stream_rng(opts.seed, 200 + i as u64);
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        for eps in [0.0, 0.1] {
            let cfg = RbpConfig {
                epsilon: eps,
                neumann_steps: 400,
                ..RbpConfig::default()
            };
            let (g, _) = neumann_rbp(&v, |x| Ok(j.tr_mul(x)), &cfg)?;
            let system = DMatrix::identity(n, n) * (1.0 + eps) - j.transpose();
            let direct = system
                .lu()
                .solve(&v)
                .ok_or_else(|| CliError::Runtime("singular Neumann test system".into()))?;
            out.push(CheckResult::new(
                format!("neumann-vs-direct n={n} eps={eps}"),
                (g - direct).amax(),
                1e-6,
            ));
        }
    }
    Ok(out)
}

/// The damped estimate on a scalar problem with contraction `j` must equal
/// the true value scaled by `(1 - j) / (1 - j + eps)`.
fn damping_checks() -> Result<Vec<CheckResult>, CliError> {
    let solver = SolverConfig::default().with_tol(1e-12);
    let eps = 0.1;
    let mut out = Vec::new();
    for j in [0.0, 0.3, 0.5] {
        let theta = 2.0;
        let cfg = RbpConfig {
            epsilon: eps,
            neumann_steps: 1000,
            convergence_tol: None,
            alpha: Some(1.0 - j),
        };
        let hg = implicit_hypergradient(&ScalarBilevel::new(theta), &solver, &cfg)?;
        let expected = theta * (1.0 - j) / (1.0 - j + eps);
        out.push(CheckResult::new(
            format!("damping-law j={j}"),
            (hg.grad[0] - expected).abs(),
            1e-8,
        ));
    }
    Ok(out)
}

pub fn run(opts: &GradcheckOptions, exec: Execution) -> Result<Vec<CheckResult>, CliError> {
    if !(0.0..1.0).contains(&opts.epsilon) {
        return Err(CliError::Config("epsilon must lie in [0, 1)".into()));
    }
    if !(opts.fd_step > 0.0) || !(opts.fd_tol > 0.0) {
        return Err(CliError::Config("fd step and tolerance must be positive".into()));
    }
    let mut results = scalar_checks(opts)?;
    results.extend(fd_checks(opts, exec)?);
    results.extend(neumann_checks(opts)?);
    results.extend(damping_checks()?);
    Ok(results)
}
