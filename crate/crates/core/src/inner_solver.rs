//! Per-episode minimization of the episodic objective: the plain gradient
//! descent map (the map differentiated for hypergradients) and L-BFGS.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::exec::stream_rng;

/// A twice-differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    /// Hessian-vector product at `w`.
    fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;

    fn value(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(self.value_grad(w)?.0)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (**self).value_grad(w)
    }

    fn hvp(&self, w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).hvp(w, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineSearch {
    /// Always take the nominal step.
    Fixed,
    /// Armijo backtracking, sufficient-decrease constant 1e-4, shrink 0.5.
    #[default]
    Backtracking,
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_SHRINKS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Gradient descent step size.
    pub alpha: f64,
    pub max_steps: usize,
    /// Sup-norm of the gradient at which a solve counts as converged.
    pub grad_tol: f64,
    pub lbfgs_memory: usize,
    pub line_search: LineSearch,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            max_steps: 500,
            grad_tol: 1e-6,
            lbfgs_memory: 10,
            line_search: LineSearch::Backtracking,
        }
    }
}

impl SolverConfig {
    /// Defaults for plain gradient descent (more steps).
    pub fn gd() -> Self {
        Self {
            max_steps: 2000,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, grad_tol: f64) -> Self {
        self.grad_tol = grad_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Error::Config("alpha and grad_tol must be positive".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::Config("lbfgs_memory must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub solution: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// One gradient descent step `F(w) = w - alpha * grad L(w)`.
pub fn step_map<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    let (_, g) = obj.value_grad(w)?;
    check_finite(&g, "gradient")?;
    Ok(w - g * alpha)
}

/// Gradient descent until the sup-norm of the gradient drops below
/// `grad_tol`. Exhausting `max_steps` returns an unconverged result.
pub fn minimize_gd<O: Objective + ?Sized>(
    obj: &O,
    w0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    dim_check("initial point", obj.dim(), w0.len())?;
    let mut w = w0.clone();
    let (mut f, mut g) = obj.value_grad(&w)?;
    let mut iterations = 0;
    while iterations < cfg.max_steps && sup_norm(&g) > cfg.grad_tol {
        check_finite(&g, "gradient")?;
        let (w_new, f_new, g_new) = match cfg.line_search {
            LineSearch::Fixed => {
                let w_new = &w - &g * cfg.alpha;
                let (f_new, g_new) = obj.value_grad(&w_new)?;
                (w_new, f_new, g_new)
            }
            LineSearch::Backtracking => {
                let slope = -g.norm_squared();
                backtrack(obj, &w, f, &g, &(-&g), slope, cfg.alpha, iterations)?
            }
        };
        w = w_new;
        f = f_new;
        g = g_new;
        iterations += 1;
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("objective during gradient descent".into()));
    }
    let final_grad_norm = sup_norm(&g);
    Ok(SolveResult {
        solution: w,
        value: f,
        iterations,
        final_grad_norm,
        converged: final_grad_norm <= cfg.grad_tol,
    })
}

/// Armijo backtracking along `dir` starting from step `t0`.
///
/// Near the optimum the decrease can fall below rounding; a step is then also
/// accepted when the value is unchanged to machine precision and the gradient
/// shrinks.
#[allow(clippy::too_many_arguments)]
fn backtrack<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    dir: &DVector<f64>,
    slope: f64,
    t0: f64,
    iteration: usize,
) -> Result<(DVector<f64>, f64, DVector<f64>)> {
    let mut t = t0;
    let g_norm = g.norm();
    for _ in 0..MAX_SHRINKS {
        let w_new = w + dir * t;
        let (f_new, g_new) = obj.value_grad(&w_new)?;
        if f_new.is_finite() {
            let armijo = f_new <= f + ARMIJO_C * t * slope;
            let flat = (f_new - f).abs() <= 8.0 * f64::EPSILON * f.abs().max(1.0)
                && g_new.norm() < g_norm;
            if armijo || flat {
                return Ok((w_new, f_new, g_new));
            }
        }
        t *= SHRINK;
    }
    Err(Error::LineSearch { iterations: iteration })
}

/// Limited-memory BFGS with the two-loop recursion. Curvature pairs with
/// `s.y <= 0` are skipped.
pub fn minimize_lbfgs<O: Objective + ?Sized>(
    obj: &O,
    w0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    dim_check("initial point", obj.dim(), w0.len())?;
    let mut w = w0.clone();
    let (mut f, mut g) = obj.value_grad(&w)?;
    check_finite(&g, "gradient")?;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while iterations < cfg.max_steps && sup_norm(&g) > cfg.grad_tol {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0, |(s, y, _)| s.dot(y) / y.norm_squared());
        q *= gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // Not a descent direction; restart from steepest descent.
            history.clear();
            dir = -&g;
            slope = -g.norm_squared();
        }
        let t0 = if history.is_empty() {
            (1.0 / dir.amax()).min(1.0)
        } else {
            1.0
        };
        let (w_new, f_new, g_new) = match cfg.line_search {
            LineSearch::Backtracking => backtrack(obj, &w, f, &g, &dir, slope, t0, iterations)?,
            LineSearch::Fixed => {
                let w_new = &w + &dir * t0;
                let (f_new, g_new) = obj.value_grad(&w_new)?;
                (w_new, f_new, g_new)
            }
        };
        check_finite(&g_new, "gradient")?;
        let s = &w_new - &w;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
            if history.len() == cfg.lbfgs_memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        w = w_new;
        f = f_new;
        g = g_new;
        iterations += 1;
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("objective during L-BFGS".into()));
    }
    let final_grad_norm = sup_norm(&g);
    Ok(SolveResult {
        solution: w,
        value: f,
        iterations,
        final_grad_norm,
        converged: final_grad_norm <= cfg.grad_tol,
    })
}

fn probe_vector(n: usize) -> DVector<f64> {
    let mut rng = stream_rng(0x051e_c7a1, n as u64);
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    v / norm
}

/// Largest Hessian eigenvalue at `w` by power iteration (Rayleigh quotient).
pub fn max_curvature<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>, iters: usize) -> Result<f64> {
    let mut v = probe_vector(obj.dim());
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let hv = obj.hvp(w, &v)?;
        lambda = v.dot(&hv);
        let n = hv.norm();
        if !(n > 0.0) || !n.is_finite() {
            break;
        }
        v = hv / n;
    }
    Ok(lambda)
}

/// Step size `0.5 / lambda_max` from `iters` power iterations, which keeps
/// the GD map contractive at `w`.
pub fn contraction_step<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>, iters: usize) -> Result<f64> {
    let lambda = max_curvature(obj, w, iters)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Degenerate(format!(
            "non-positive curvature estimate {lambda}"
        )));
    }
    Ok(0.5 / lambda)
}

/// Power-iteration estimate of the spectral radius of the GD-map Jacobian
/// `I - alpha H` at `w`.
pub fn step_map_spectral_radius<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    alpha: f64,
    iters: usize,
) -> Result<f64> {
    let mut v = probe_vector(obj.dim());
    let mut rho = 0.0;
    for _ in 0..iters.max(1) {
        let jv = &v - obj.hvp(w, &v)? * alpha;
        rho = jv.norm();
        if !(rho > 0.0) {
            break;
        }
        v = jv / rho;
    }
    Ok(rho)
}

/// `1/2 (w - c)^T diag(scale) (w - c)`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub center: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Quadratic {
    pub fn isotropic(center: DVector<f64>) -> Self {
        let scale = DVector::from_element(center.len(), 1.0);
        Self { center, scale }
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value_grad(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        dim_check("quadratic input", self.dim(), w.len())?;
        let diff = w - &self.center;
        let g = diff.component_mul(&self.scale);
        Ok((0.5 * diff.dot(&g), g))
    }

    fn hvp(&self, _w: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(v.component_mul(&self.scale))
    }
}
