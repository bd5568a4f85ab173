mod common;

use common::*;
use ifsl_core::attractor::AttractorMode;
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::exec::Execution;
use ifsl_core::implicit_grad::{
    fd_hypergradient, implicit_hypergradient_at, neumann_rbp, rbp_hypergradient, relative_error,
    solve_inner, tbptt_hypergradient, vjp_step_map, Bilevel, InnerObjective, RbpConfig,
};
use ifsl_core::inner_solver::{
    contraction_step, minimize_gd, minimize_lbfgs, step_map_spectral_radius, Objective, SolverConfig,
};
use ifsl_core::model::{EpisodeBilevel, ModelConfig};

fn lr_model() -> ModelConfig {
    ModelConfig::new(ClassifierKind::Lr, AttractorMode::Attention)
}

#[test]
fn lr_solutions_do_not_depend_on_start_or_solver() {
    let setup = small_setup(6, 4, 4, 10);
    let tight = SolverConfig::default().with_tol(1e-9);
    for seed in 0..3 {
        let ep = episode(&setup, 3, 3, seed);
        let meta = random_meta(6, ClassifierKind::Lr, seed);
        let model = lr_model();
        let problem = EpisodeBilevel::new(&meta, &setup.base, &ep, &model, 0).unwrap();
        let obj = problem.inner();
        let reference = minimize_lbfgs(&obj, &problem.initial_point(), &tight).unwrap();
        assert!(reference.converged);
        for start in 0..5 {
            let w0 = random_vector(obj.dim(), 2.0, 100 + start);
            let r = minimize_lbfgs(&obj, &w0, &tight).unwrap();
            assert!((&r.solution - &reference.solution).amax() < 1e-5);
        }
        let gd_cfg = SolverConfig {
            alpha: contraction_step(&obj, &reference.solution, 20).unwrap() * 2.0,
            max_steps: 50_000,
            ..SolverConfig::gd().with_tol(1e-9)
        };
        let gd = minimize_gd(&obj, &problem.initial_point(), &gd_cfg).unwrap();
        assert!(gd.converged, "gd stopped at {}", gd.final_grad_norm);
        assert!((&gd.solution - &reference.solution).amax() < 1e-5);
    }
}

#[test]
fn gd_map_contracts_and_neumann_terms_decay() {
    let setup = small_setup(8, 5, 6, 11);
    for seed in 0..5 {
        let ep = episode(&setup, 1, 5, seed);
        let meta = random_meta(8, ClassifierKind::Lr, seed + 40);
        let model = lr_model();
        let problem = EpisodeBilevel::new(&meta, &setup.base, &ep, &model, 0).unwrap();
        let obj = InnerObjective(&problem);
        let w = solve_inner(&problem, &SolverConfig::default()).unwrap().solution;
        let alpha = contraction_step(&obj, &w, 20).unwrap();
        let rho = step_map_spectral_radius(&obj, &w, alpha, 50).unwrap();
        assert!(rho < 1.0, "spectral radius {rho}");

        let v = problem.outer_value_grad(&w).unwrap().1;
        let cfg = RbpConfig {
            neumann_steps: 30,
            ..RbpConfig::default()
        };
        let (_, norms) = neumann_rbp(&v, |x| vjp_step_map(&obj, &w, alpha, x), &cfg).unwrap();
        for pair in norms[3..].windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{norms:?}");
        }
    }
}

#[test]
fn vjp_matches_directional_hessian_differences() {
    let setup = small_setup(6, 4, 4, 12);
    let ep = episode(&setup, 2, 3, 1);
    let meta = random_meta(6, ClassifierKind::Lr, 2);
    let model = lr_model();
    let problem = EpisodeBilevel::new(&meta, &setup.base, &ep, &model, 0).unwrap();
    let obj = problem.inner();
    let w = random_vector(obj.dim(), 0.5, 3);
    let v = random_vector(obj.dim(), 1.0, 4);
    let alpha = 0.3;
    let jv = vjp_step_map(&obj, &w, alpha, &v).unwrap();
    let h = 1e-5;
    let gp = obj.value_grad(&(&w + &v * h)).unwrap().1;
    let gm = obj.value_grad(&(&w - &v * h)).unwrap().1;
    let fd = &v - (gp - gm) / (2.0 * h) * alpha;
    assert!(rel_err(&jv, &fd) < 1e-5);
    assert_eq!(vjp_step_map(&obj, &w, 0.0, &v).unwrap(), v);
}

/// RBP, finite differences and a long unroll agree on convex LR episodes.
#[test]
fn three_hypergradient_routes_agree() {
    let setup = small_setup(5, 3, 3, 13);
    let ep = episode(&setup, 2, 2, 7);
    let meta = random_meta(5, ClassifierKind::Lr, 9);
    let model = lr_model();
    let tight = SolverConfig::default().with_tol(1e-11);
    let exact = RbpConfig {
        epsilon: 0.0,
        neumann_steps: 500,
        ..RbpConfig::default()
    };
    let rbp = rbp_hypergradient(&meta, &ep, &setup.base, &model, &tight, &exact, 0).unwrap();
    let fd = fd_hypergradient(&meta, &ep, &setup.base, &model, &tight, 1e-4, 0, Execution::Parallel).unwrap();
    assert!(relative_error(&rbp.grad, &fd) < 1e-4, "{}", relative_error(&rbp.grad, &fd));

    let problem = EpisodeBilevel::new(&meta, &setup.base, &ep, &model, 0).unwrap();
    let solved = solve_inner(&problem, &tight).unwrap();
    let alpha = contraction_step(&InnerObjective(&problem), &solved.solution, 20).unwrap();
    let unrolled = tbptt_hypergradient(&meta, &ep, &setup.base, &model, 3000, alpha, 0).unwrap();
    assert!(relative_error(&rbp.grad, &unrolled.grad) < 1e-4);

    // Reusing the solution gives the same answer.
    let again = implicit_hypergradient_at(&problem, &solved, &exact).unwrap();
    assert!(relative_error(&rbp.grad, &again.grad) < 1e-8);
}

#[test]
fn damping_only_shrinks_the_estimate_on_convex_episodes() {
    let setup = small_setup(5, 3, 3, 14);
    let ep = episode(&setup, 2, 2, 8);
    let meta = random_meta(5, ClassifierKind::Lr, 10);
    let model = lr_model();
    let solver = SolverConfig::default().with_tol(1e-10);
    let exact = RbpConfig {
        epsilon: 0.0,
        neumann_steps: 500,
        ..RbpConfig::default()
    };
    let damped = RbpConfig {
        epsilon: 0.1,
        neumann_steps: 500,
        ..RbpConfig::default()
    };
    let a = rbp_hypergradient(&meta, &ep, &setup.base, &model, &solver, &exact, 0).unwrap();
    let b = rbp_hypergradient(&meta, &ep, &setup.base, &model, &solver, &damped, 0).unwrap();
    assert!(b.grad.norm() <= a.grad.norm());
    assert!(b.grad.dot(&a.grad) > 0.0);
}
