//! Hypergradients through the inner optimization.
//!
//! At a fixed point `w* = F(w*)` of the gradient descent map
//! `F(w) = w - alpha * grad L_S(w, theta)`, the implicit function theorem gives
//! `dL_Q/dtheta = (dF/dtheta)^T (I - J^T)^{-1} dL_Q/dw`. The inverse is applied
//! with a truncated, damped Neumann series `sum_n (J^T - eps I)^n v`.

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attractor::MetaParams;
use crate::classifier::BaseClassifier;
use crate::embeddings::Episode;
use crate::error::{dim_check, Error, Result};
use crate::exec::Execution;
use crate::inner_solver::{contraction_step, minimize_lbfgs, Objective, SolveResult, SolverConfig};
use crate::model::{EpisodeBilevel, ModelConfig};

/// Power iterations used to pick the dummy-step size.
pub const POWER_ITERATIONS: usize = 20;

/// A bilevel problem: an inner objective in `w` parameterized by `theta`, and
/// an outer loss in `w` only.
pub trait Bilevel {
    fn inner_dim(&self) -> usize;
    fn meta_dim(&self) -> usize;
    fn inner_value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn inner_hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;
    /// `d/dtheta [g . grad_w L_S(w, theta)]`.
    fn mixed_vjp(&self, w: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>>;
    fn outer_value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn initial_point(&self) -> DVector<f64>;
}

/// The inner objective of a bilevel problem.
pub struct InnerObjective<'a, B: ?Sized>(pub &'a B);

impl<B: Bilevel + ?Sized> Objective for InnerObjective<'_, B> {
    fn dim(&self) -> usize {
        self.0.inner_dim()
    }

    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.0.inner_value_grad(w)
    }

    fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.0.inner_hvp(w, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RbpConfig {
    /// Damping in `[0, 1)`.
    pub epsilon: f64,
    pub neumann_steps: usize,
    /// Stop early once the sup-norm of a series increment drops below this.
    pub convergence_tol: Option<f64>,
    /// Dummy-step size; `None` picks `0.5 / lambda_max` at the fixed point.
    pub alpha: Option<f64>,
}

impl Default for RbpConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            neumann_steps: 20,
            convergence_tol: None,
            alpha: None,
        }
    }
}

impl RbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1)".into()));
        }
        if self.neumann_steps == 0 {
            return Err(Error::Config("neumann_steps must be at least 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::Config("alpha must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A hypergradient in the flat meta-parameter layout, with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradient {
    pub grad: DVector<f64>,
    /// Outer loss at the (approximate) inner solution.
    pub query_loss: f64,
    /// Norm of each Neumann increment (empty for unrolled gradients).
    pub increments: Vec<f64>,
    /// Step size of the differentiated GD map.
    pub alpha: f64,
    pub inner_iterations: usize,
    pub inner_grad_norm: f64,
    pub inner_converged: bool,
}

impl HyperGradient {
    /// Norm of the last Neumann increment.
    pub fn neumann_residual(&self) -> f64 {
        self.increments.last().copied().unwrap_or(0.0)
    }

    pub fn to_meta(&self, template: &MetaParams) -> Result<MetaParams> {
        template.with_values(self.grad.as_slice())
    }
}

/// `J^T v = v - alpha H v`, with `H` the inner Hessian at `w_star`.
pub fn vjp_step_map<O: Objective + ?Sized>(
    obj: &O,
    w_star: &DVector<f64>,
    alpha: f64,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    dim_check("vjp cotangent", obj.dim(), v.len())?;
    if alpha == 0.0 {
        return Ok(v.clone());
    }
    Ok(v - obj.hvp(w_star, v)? * alpha)
}

/// `g = sum_{n=0}^{steps} (J^T - eps I)^n v`. Returns `g` and the norm of
/// every increment after the first.
pub fn neumann_rbp<F>(v: &DVector<f64>, mut vjp: F, cfg: &RbpConfig) -> Result<(DVector<f64>, Vec<f64>)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    let mut term = v.clone();
    let mut g = v.clone();
    let mut norms = Vec::with_capacity(cfg.neumann_steps);
    for step in 1..=cfg.neumann_steps {
        let next = vjp(&term)? - &term * cfg.epsilon;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step });
        }
        g += &next;
        norms.push(next.norm());
        let done = cfg.convergence_tol.is_some_and(|tol| next.amax() <= tol);
        term = next;
        if done {
            break;
        }
    }
    Ok((g, norms))
}

/// Runs the inner solve from the problem's initial point.
pub fn solve_inner<B: Bilevel + ?Sized>(problem: &B, solver: &SolverConfig) -> Result<SolveResult> {
    minimize_lbfgs(&InnerObjective(problem), &problem.initial_point(), solver)
}

/// RBP hypergradient of a generic bilevel problem.
pub fn implicit_hypergradient<B: Bilevel + ?Sized>(
    problem: &B,
    solver: &SolverConfig,
    rbp: &RbpConfig,
) -> Result<HyperGradient> {
    rbp.validate()?;
    let solved = solve_inner(problem, solver)?;
    if !solved.converged {
        warn!(
            "inner solve stopped at gradient norm {:.3e} after {} iterations",
            solved.final_grad_norm, solved.iterations
        );
    }
    implicit_hypergradient_at(problem, &solved, rbp)
}

/// RBP hypergradient given an inner solution.
pub fn implicit_hypergradient_at<B: Bilevel + ?Sized>(
    problem: &B,
    solved: &SolveResult,
    rbp: &RbpConfig,
) -> Result<HyperGradient> {
    let obj = InnerObjective(problem);
    let w_star = &solved.solution;
    let (query_loss, v) = problem.outer_value_grad(w_star)?;
    let alpha = match rbp.alpha {
        Some(a) => a,
        None => contraction_step(&obj, w_star, POWER_ITERATIONS)?,
    };
    let (g, increments) = neumann_rbp(&v, |x| vjp_step_map(&obj, w_star, alpha, x), rbp)?;
    // dF/dtheta = -alpha d2 L_S / (dtheta dw).
    let grad = problem.mixed_vjp(w_star, &g)? * (-alpha);
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hypergradient".into()));
    }
    Ok(HyperGradient {
        grad,
        query_loss,
        increments,
        alpha,
        inner_iterations: solved.iterations,
        inner_grad_norm: solved.final_grad_norm,
        inner_converged: solved.converged,
    })
}

/// Gradient of the outer loss after exactly `steps` gradient descent steps of
/// size `alpha` from the initial point, by reverse-mode through the unroll.
pub fn unrolled_hypergradient<B: Bilevel + ?Sized>(
    problem: &B,
    steps: usize,
    alpha: f64,
) -> Result<HyperGradient> {
    if steps == 0 {
        return Err(Error::Config("unroll length must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config("unroll step size must be positive".into()));
    }
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut w = problem.initial_point();
    for _ in 0..steps {
        let (_, g) = problem.inner_value_grad(&w)?;
        let next = &w - g * alpha;
        trajectory.push(w);
        w = next;
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("unrolled inner iterate".into()));
    }
    let (query_loss, mut lambda) = problem.outer_value_grad(&w)?;
    let (_, final_grad) = problem.inner_value_grad(&w)?;
    let mut grad = DVector::zeros(problem.meta_dim());
    for w_t in trajectory.iter().rev() {
        grad -= problem.mixed_vjp(w_t, &lambda)? * alpha;
        lambda = &lambda - problem.inner_hvp(w_t, &lambda)? * alpha;
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("unrolled hypergradient".into()));
    }
    Ok(HyperGradient {
        grad,
        query_loss,
        increments: Vec::new(),
        alpha,
        inner_iterations: steps,
        inner_grad_norm: final_grad.amax(),
        inner_converged: false,
    })
}

/// Central differences of `objective` around `theta`, one coordinate per task.
pub fn central_differences<F>(objective: F, theta: &[f64], h: f64, exec: Execution) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let diffs = exec.map(theta.len(), |i| -> Result<f64> {
        let mut plus = theta.to_vec();
        plus[i] += h;
        let mut minus = theta.to_vec();
        minus[i] -= h;
        Ok((objective(&plus)? - objective(&minus)?) / (2.0 * h))
    });
    Ok(DVector::from_vec(diffs.into_iter().collect::<Result<Vec<_>>>()?))
}

/// RBP hypergradient of the joint query loss for one episode.
#[allow(clippy::too_many_arguments)]
pub fn rbp_hypergradient(
    meta: &MetaParams,
    episode: &Episode,
    base: &BaseClassifier,
    model: &ModelConfig,
    solver: &SolverConfig,
    rbp: &RbpConfig,
    init_seed: u64,
) -> Result<HyperGradient> {
    let problem = EpisodeBilevel::new(meta, base, episode, model, init_seed)?;
    implicit_hypergradient(&problem, solver, rbp)
}

/// Truncated back-propagation through `steps` unrolled GD steps.
pub fn tbptt_hypergradient(
    meta: &MetaParams,
    episode: &Episode,
    base: &BaseClassifier,
    model: &ModelConfig,
    steps: usize,
    alpha: f64,
    init_seed: u64,
) -> Result<HyperGradient> {
    let problem = EpisodeBilevel::new(meta, base, episode, model, init_seed)?;
    unrolled_hypergradient(&problem, steps, alpha)
}

/// Joint query loss at the converged inner solution, as a function of theta.
pub fn meta_objective(
    meta: &MetaParams,
    episode: &Episode,
    base: &BaseClassifier,
    model: &ModelConfig,
    solver: &SolverConfig,
    init_seed: u64,
) -> Result<f64> {
    let problem = EpisodeBilevel::new(meta, base, episode, model, init_seed)?;
    let solved = solve_inner(&problem, solver)?;
    if !solved.converged {
        return Err(Error::NonFinite(format!(
            "inner solve did not converge (gradient {:.3e})",
            solved.final_grad_norm
        )));
    }
    Ok(problem.outer_value_grad(&solved.solution)?.0)
}

/// Finite-difference hypergradient: central differences of the converged
/// meta objective over every meta-parameter coordinate.
#[allow(clippy::too_many_arguments)]
pub fn fd_hypergradient(
    meta: &MetaParams,
    episode: &Episode,
    base: &BaseClassifier,
    model: &ModelConfig,
    solver: &SolverConfig,
    h: f64,
    init_seed: u64,
    exec: Execution,
) -> Result<DVector<f64>> {
    central_differences(
        |theta| {
            let m = meta.with_values(theta)?;
            meta_objective(&m, episode, base, model, solver, init_seed)
        },
        &meta.to_vec(),
        h,
        exec,
    )
}

/// Relative L2 error `|a - b| / max(|a|, |b|)` (0 when both vanish).
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Scalar bilevel test problem: inner `c/2 (w - theta)^2`, outer `w^2 / 2`.
/// The exact hypergradient is `theta`.
#[derive(Debug, Clone)]
pub struct ScalarBilevel {
    pub theta: f64,
    pub curvature: f64,
    pub start: f64,
}

impl ScalarBilevel {
    pub fn new(theta: f64) -> Self {
        Self {
            theta,
            curvature: 1.0,
            start: 0.0,
        }
    }
}

impl Bilevel for ScalarBilevel {
    fn inner_dim(&self) -> usize {
        1
    }

    fn meta_dim(&self) -> usize {
        1
    }

    fn inner_value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let d = w[0] - self.theta;
        Ok((0.5 * self.curvature * d * d, DVector::from_element(1, self.curvature * d)))
    }

    fn inner_hvp(&self, _w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(v * self.curvature)
    }

    fn mixed_vjp(&self, _w: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(g * (-self.curvature))
    }

    fn outer_value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((0.5 * w[0] * w[0], w.clone()))
    }

    fn initial_point(&self) -> DVector<f64> {
        DVector::from_element(1, self.start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn linear_vjp(j: DMatrix<f64>) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> {
        move |v| Ok(j.tr_mul(v))
    }

    #[test]
    fn neumann_zero_jacobian() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let cfg = RbpConfig {
            epsilon: 0.0,
            neumann_steps: 5,
            ..RbpConfig::default()
        };
        let (g, _) = neumann_rbp(&v, linear_vjp(DMatrix::zeros(2, 2)), &cfg).unwrap();
        assert_eq!(g, v);

        let cfg = RbpConfig {
            epsilon: 0.1,
            neumann_steps: 400,
            ..RbpConfig::default()
        };
        let (g, _) = neumann_rbp(&v, linear_vjp(DMatrix::zeros(2, 2)), &cfg).unwrap();
        for (a, b) in g.iter().zip(v.iter()) {
            assert_abs_diff_eq!(*a, b / 1.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn neumann_half_identity() {
        let v = DVector::from_vec(vec![0.5, 3.0]);
        let cfg = RbpConfig {
            epsilon: 0.1,
            neumann_steps: 400,
            ..RbpConfig::default()
        };
        let j = DMatrix::identity(2, 2) * 0.5;
        let (g, norms) = neumann_rbp(&v, linear_vjp(j), &cfg).unwrap();
        for (a, b) in g.iter().zip(v.iter()) {
            assert_abs_diff_eq!(*a, b / 0.6, epsilon = 1e-12);
        }
        assert!(norms.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn neumann_divergence_reported() {
        let v = DVector::from_element(1, 1.0);
        let cfg = RbpConfig {
            epsilon: 0.0,
            neumann_steps: 2000,
            ..RbpConfig::default()
        };
        let err = neumann_rbp(&v, linear_vjp(DMatrix::from_element(1, 1, 10.0)), &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { step } if step > 100));
    }

    #[test]
    fn neumann_early_stop() {
        let v = DVector::from_element(1, 1.0);
        let cfg = RbpConfig {
            epsilon: 0.0,
            neumann_steps: 1000,
            convergence_tol: Some(1e-6),
            alpha: None,
        };
        let (_, norms) = neumann_rbp(&v, linear_vjp(DMatrix::from_element(1, 1, 0.5)), &cfg).unwrap();
        assert!(norms.len() < 30);
    }

    #[test]
    fn rbp_config_validation() {
        let bad = RbpConfig {
            epsilon: 1.0,
            ..RbpConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RbpConfig {
            neumann_steps: 0,
            ..RbpConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn vjp_zero_step() {
        let q = crate::inner_solver::Quadratic::isotropic(DVector::zeros(2));
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(vjp_step_map(&q, &DVector::zeros(2), 0.0, &v).unwrap(), v);
    }

    #[test]
    fn scalar_oracle_rbp_and_unroll() {
        let solver = SolverConfig::default().with_tol(1e-12);
        let rbp = RbpConfig {
            epsilon: 0.0,
            neumann_steps: 200,
            convergence_tol: None,
            alpha: Some(0.5),
        };
        let p = ScalarBilevel::new(2.0);
        let hg = implicit_hypergradient(&p, &solver, &rbp).unwrap();
        assert_abs_diff_eq!(hg.grad[0], 2.0, epsilon = 1e-6);
        let hg = unrolled_hypergradient(&p, 50, 0.5).unwrap();
        assert_abs_diff_eq!(hg.grad[0], 2.0, epsilon = 1e-6);
        assert!(unrolled_hypergradient(&p, 0, 0.5).is_err());
    }

    #[test]
    fn unroll_single_step_chain_rule() {
        // w1 = w0 - a (w0 - theta) => dw1/dtheta = a; dL/dtheta = w1 * a.
        let p = ScalarBilevel {
            theta: 1.5,
            curvature: 1.0,
            start: 0.25,
        };
        let a = 0.3;
        let w1 = 0.25 - a * (0.25 - 1.5);
        let hg = unrolled_hypergradient(&p, 1, a).unwrap();
        assert_abs_diff_eq!(hg.grad[0], w1 * a, epsilon = 1e-15);
    }

    #[test]
    fn zero_outer_gradient_gives_zero_hypergradient() {
        let p = ScalarBilevel::new(0.0);
        let hg = implicit_hypergradient(&p, &SolverConfig::default(), &RbpConfig::default()).unwrap();
        assert_eq!(hg.grad[0], 0.0);
    }

    #[test]
    fn central_differences_quadratic() {
        let f = |t: &[f64]| Ok(t[0] * t[0] + 3.0 * t[1]);
        let g = central_differences(f, &[1.5, -2.0], 1e-3, Execution::Sequential).unwrap();
        assert_abs_diff_eq!(g[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g[1], 3.0, epsilon = 1e-10);
    }
}
