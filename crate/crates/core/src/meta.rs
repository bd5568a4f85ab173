//! Meta-training with Adam, evaluation of joint base+novel prediction, and
//! the prototype-based baselines.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attractor::MetaParams;
use crate::classifier::{argmax, fast_forward, BaseClassifier, FastWeights};
use crate::embeddings::{sample_episode, Episode, EpisodeConfig, EpisodeSource, LabeledExample};
use crate::error::{dim_check, Error, Result};
use crate::exec::{mix_seed, Execution};
use crate::implicit_grad::{
    implicit_hypergradient, solve_inner, unrolled_hypergradient, Bilevel, HyperGradient,
    RbpConfig,
};
use crate::inner_solver::SolverConfig;
use crate::model::{EpisodeBilevel, ModelConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_FLOOR: f64 = 1e-8;

/// Step decay: `base_lr * decay_factor^(floor(step / decay_step))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_step: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_step: 4000,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = if self.decay_step == 0 {
            0
        } else {
            (step / self.decay_step as u64) as i32
        };
        self.base_lr * self.decay_factor.powi(decays)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(len: usize, schedule: LrSchedule) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            schedule,
        }
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    dim_check("adam gradient", theta.len(), grad.len())?;
    dim_check("adam state", theta.len(), state.m.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("meta gradient".into()));
    }
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_FLOOR);
    }
    Ok(())
}

/// How the meta-gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GradientMethod {
    /// Damped Neumann recurrent back-propagation at the converged solution.
    #[default]
    Rbp,
    /// Back-propagation through `steps` unrolled gradient descent steps.
    Tbptt { steps: usize, alpha: f64 },
}

impl std::str::FromStr for GradientMethod {
    type Err = Error;

    /// `rbp`, `tbptt:T` or `tbptt:T:alpha` (alpha defaults to the desk default).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid gradient method {s:?}"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("rbp") if parts.next().is_none() => Ok(Self::Rbp),
            Some("tbptt") => {
                let steps: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let alpha = match parts.next() {
                    Some(a) => a.parse().map_err(|_| bad())?,
                    None => DEFAULT_UNROLL_ALPHA,
                };
                if parts.next().is_some() || steps == 0 || !(alpha > 0.0) {
                    return Err(bad());
                }
                Ok(Self::Tbptt { steps, alpha })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for GradientMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Rbp => f.write_str("rbp"),
            Self::Tbptt { steps, alpha } => write!(f, "tbptt:{steps}:{alpha}"),
        }
    }
}

impl TryFrom<String> for GradientMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GradientMethod> for String {
    fn from(g: GradientMethod) -> Self {
        g.to_string()
    }
}

/// Default step size of unrolled gradient descent.
pub const DEFAULT_UNROLL_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub episode: EpisodeConfig,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub rbp: RbpConfig,
    pub gradient: GradientMethod,
    pub steps: usize,
    pub schedule: LrSchedule,
    /// Episodes whose hypergradients are averaged per step.
    pub meta_batch: usize,
    pub seed: u64,
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.solver.validate()?;
        self.rbp.validate()?;
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be positive".into()));
        }
        if !(self.schedule.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub query_loss: f64,
    pub grad_norm: f64,
    pub neumann_residual: f64,
    pub lr: f64,
}

/// Hypergradient of one episode under the configured method.
pub fn episode_hypergradient(
    meta: &MetaParams,
    base: &BaseClassifier,
    episode: &Episode,
    cfg: &MetaTrainConfig,
    init_seed: u64,
) -> Result<HyperGradient> {
    let problem = EpisodeBilevel::new(meta, base, episode, &cfg.model, init_seed)?;
    match cfg.gradient {
        GradientMethod::Rbp => implicit_hypergradient(&problem, &cfg.solver, &cfg.rbp),
        GradientMethod::Tbptt { steps, alpha } => unrolled_hypergradient(&problem, steps, alpha),
    }
}

/// Meta-training loop: sample an episode, solve the episodic objective,
/// differentiate the joint query loss, take an Adam step.
pub fn meta_train<S: EpisodeSource + ?Sized>(
    source: &S,
    base: &BaseClassifier,
    init: MetaParams,
    cfg: &MetaTrainConfig,
    exec: Execution,
) -> Result<(MetaParams, Vec<TrainRecord>)> {
    cfg.validate()?;
    dim_check("meta-parameter dim", base.dim(), init.dim())?;
    let mut meta = init;
    let mut theta = meta.to_vec();
    let mut adam = AdamState::new(theta.len(), cfg.schedule.clone());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let grads = exec.map(cfg.meta_batch, |b| -> Result<HyperGradient> {
            let index = (step * cfg.meta_batch + b) as u64;
            let seed = mix_seed(cfg.seed, index);
            let episode = sample_episode(source, &cfg.episode, seed)?;
            episode_hypergradient(&meta, base, &episode, cfg, seed)
        });
        let mut total = DVector::zeros(theta.len());
        let (mut loss, mut residual) = (0.0, 0.0f64);
        for hg in grads {
            let hg = hg.map_err(|e| step_error(step, e))?;
            total += &hg.grad;
            loss += hg.query_loss;
            residual = residual.max(hg.neumann_residual());
            if hg.increments.len() > 1 {
                let first = hg.increments[0];
                if residual > first && first > 0.0 {
                    warn!("step {step}: Neumann series is not contracting");
                }
            }
        }
        let scale = 1.0 / cfg.meta_batch as f64;
        total *= scale;
        let lr = adam.current_lr();
        adam_step(&mut theta, total.as_slice(), &mut adam).map_err(|e| step_error(step, e))?;
        meta.assign(&theta)?;
        let record = TrainRecord {
            step,
            query_loss: loss * scale,
            grad_norm: total.norm(),
            neumann_residual: residual,
            lr,
        };
        if step % 50 == 0 {
            info!("meta step {step}: query loss {:.4}", record.query_loss);
        }
        log.push(record);
    }
    Ok((meta, log))
}

fn step_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (meta step {step})")),
        Error::Degenerate(what) => Error::Degenerate(format!("{what} (meta step {step})")),
        other => other,
    }
}

/// How fast weights are obtained at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerEval {
    /// Solve the episodic objective to convergence with L-BFGS.
    Converged(SolverConfig),
    /// A fixed number of gradient descent steps from the initialization.
    Unrolled { steps: usize, alpha: f64 },
}

/// The learner evaluated on each episode.
#[derive(Debug, Clone)]
pub enum Learner<'a> {
    Attractor {
        meta: &'a MetaParams,
        model: ModelConfig,
        inner: InnerEval,
    },
    /// Fast-weight columns are normalized support means.
    Imprint,
    /// Nearest class mean among base prototypes and support means.
    ProtoNet { prototypes: &'a DMatrix<f64> },
}

/// Correct-prediction counts for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeStats {
    pub base_total: usize,
    pub novel_total: usize,
    pub base_joint: usize,
    pub base_individual: usize,
    pub novel_joint: usize,
    pub novel_individual: usize,
}

impl EpisodeStats {
    /// From true labels and the individual / joint predictions of the base
    /// and novel query sets.
    pub fn from_predictions(
        base_truth: &[usize],
        base_individual: &[usize],
        base_joint: &[usize],
        novel_truth: &[usize],
        novel_individual: &[usize],
        novel_joint: &[usize],
    ) -> Self {
        let hits = |truth: &[usize], pred: &[usize]| {
            truth.iter().zip(pred).filter(|(t, p)| t == p).count()
        };
        Self {
            base_total: base_truth.len(),
            novel_total: novel_truth.len(),
            base_joint: hits(base_truth, base_joint),
            base_individual: hits(base_truth, base_individual),
            novel_joint: hits(novel_truth, novel_joint),
            novel_individual: hits(novel_truth, novel_individual),
        }
    }

    fn rate(hits: usize, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    pub fn acc_base_joint(&self) -> f64 {
        Self::rate(self.base_joint, self.base_total)
    }

    pub fn acc_novel_joint(&self) -> f64 {
        Self::rate(self.novel_joint, self.novel_total)
    }

    pub fn acc_both(&self) -> f64 {
        Self::rate(
            self.base_joint + self.novel_joint,
            self.base_total + self.novel_total,
        )
    }

    pub fn acc_base_individual(&self) -> f64 {
        Self::rate(self.base_individual, self.base_total)
    }

    pub fn acc_novel_individual(&self) -> f64 {
        Self::rate(self.novel_individual, self.novel_total)
    }
}

/// Joint and individual accuracies averaged over episodes, with 95% normal
/// half-widths (`1.96 sigma / sqrt(n)`, population sigma over episodes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_base_joint: f64,
    pub acc_novel_joint: f64,
    pub acc_both: f64,
    pub acc_base_individual: f64,
    pub acc_novel_individual: f64,
    pub delta_a: f64,
    pub delta_b: f64,
    pub delta: f64,
    pub episode_count: usize,
    pub hw_base_joint: f64,
    pub hw_novel_joint: f64,
    pub hw_both: f64,
    pub hw_base_individual: f64,
    pub hw_novel_individual: f64,
    pub hw_delta_a: f64,
    pub hw_delta_b: f64,
    pub hw_delta: f64,
}

fn mean_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

impl MetricsReport {
    pub fn from_episodes(stats: &[EpisodeStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::InsufficientData("no episodes evaluated".into()));
        }
        let column = |f: &dyn Fn(&EpisodeStats) -> f64| -> Vec<f64> { stats.iter().map(f).collect() };
        let (acc_base_joint, hw_base_joint) = mean_half_width(&column(&|s| s.acc_base_joint()));
        let (acc_novel_joint, hw_novel_joint) = mean_half_width(&column(&|s| s.acc_novel_joint()));
        let (acc_both, hw_both) = mean_half_width(&column(&|s| s.acc_both()));
        let (acc_base_individual, hw_base_individual) =
            mean_half_width(&column(&|s| s.acc_base_individual()));
        let (acc_novel_individual, hw_novel_individual) =
            mean_half_width(&column(&|s| s.acc_novel_individual()));
        let (delta_a, hw_delta_a) =
            mean_half_width(&column(&|s| s.acc_base_joint() - s.acc_base_individual()));
        let (delta_b, hw_delta_b) =
            mean_half_width(&column(&|s| s.acc_novel_joint() - s.acc_novel_individual()));
        let (_, hw_delta) = mean_half_width(&column(&|s| {
            0.5 * ((s.acc_base_joint() - s.acc_base_individual())
                + (s.acc_novel_joint() - s.acc_novel_individual()))
        }));
        Ok(Self {
            acc_base_joint,
            acc_novel_joint,
            acc_both,
            acc_base_individual,
            acc_novel_individual,
            delta_a,
            delta_b,
            delta: (delta_a + delta_b) / 2.0,
            episode_count: stats.len(),
            hw_base_joint,
            hw_novel_joint,
            hw_both,
            hw_base_individual,
            hw_novel_individual,
            hw_delta_a,
            hw_delta_b,
            hw_delta,
        })
    }
}

/// Scores the fast weights of one episode.
pub fn score_episode(base: &BaseClassifier, fw: &FastWeights, episode: &Episode) -> Result<EpisodeStats> {
    let k = base.classes();
    let predict = |set: &[LabeledExample]| -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let mut base_only = Vec::with_capacity(set.len());
        let mut novel_only = Vec::with_capacity(set.len());
        let mut joint = Vec::with_capacity(set.len());
        for e in set {
            let zb = base.logits(&e.feature);
            let zn = fast_forward(fw, &e.feature)?;
            let all: Vec<f64> = zb.iter().chain(zn.iter()).copied().collect();
            base_only.push(argmax(zb.as_slice()));
            novel_only.push(k + argmax(zn.as_slice()));
            joint.push(argmax(&all));
        }
        Ok((base_only, novel_only, joint))
    };
    let (bb, _, bj) = predict(&episode.query_base)?;
    let (_, nn, nj) = predict(&episode.query_novel)?;
    let labels = |set: &[LabeledExample]| set.iter().map(|e| e.label).collect::<Vec<_>>();
    Ok(EpisodeStats::from_predictions(
        &labels(&episode.query_base),
        &bb,
        &bj,
        &labels(&episode.query_novel),
        &nn,
        &nj,
    ))
}

/// Fast weights for an episode under an attractor learner.
pub fn fit_fast_weights(
    meta: &MetaParams,
    base: &BaseClassifier,
    episode: &Episode,
    model: &ModelConfig,
    inner: &InnerEval,
    init_seed: u64,
) -> Result<FastWeights> {
    let problem = EpisodeBilevel::new(meta, base, episode, model, init_seed)?;
    let w = match inner {
        InnerEval::Converged(solver) => {
            let solved = solve_inner(&problem, solver)?;
            if !solved.converged {
                warn!(
                    "evaluation inner solve stopped at gradient norm {:.3e}",
                    solved.final_grad_norm
                );
            }
            solved.solution
        }
        InnerEval::Unrolled { steps, alpha } => {
            let mut w = problem.initial_point();
            for _ in 0..*steps {
                let (_, g) = problem.inner_value_grad(&w)?;
                w -= g * *alpha;
            }
            w
        }
    };
    let fw = problem.fast_weights(&w)?;
    if !fw.is_finite() {
        return Err(Error::NonFinite("fast weights".into()));
    }
    Ok(fw)
}

/// Scores one episode under any learner.
pub fn evaluate_episode(learner: &Learner<'_>, base: &BaseClassifier, episode: &Episode, seed: u64) -> Result<EpisodeStats> {
    match learner {
        Learner::Attractor { meta, model, inner } => {
            let fw = fit_fast_weights(meta, base, episode, model, inner, seed)?;
            score_episode(base, &fw, episode)
        }
        Learner::Imprint => score_episode(base, &baseline_imprint(episode, base)?, episode),
        Learner::ProtoNet { prototypes } => protonet_stats(episode, prototypes),
    }
}

/// Evaluates `n_episodes` episodes drawn with seeds derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<S: EpisodeSource + ?Sized>(
    learner: &Learner<'_>,
    base: &BaseClassifier,
    source: &S,
    cfg: &EpisodeConfig,
    n_episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<MetricsReport> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let stats = exec.map(n_episodes, |i| -> Result<EpisodeStats> {
        let s = mix_seed(seed, i as u64);
        let episode = sample_episode(source, cfg, s)?;
        evaluate_episode(learner, base, &episode, s)
    });
    let stats = stats.into_iter().collect::<Result<Vec<_>>>()?;
    MetricsReport::from_episodes(&stats)
}

/// Imprinted weights: column `j` is the L2-normalized support mean of novel
/// class `j`.
pub fn baseline_imprint(episode: &Episode, base: &BaseClassifier) -> Result<FastWeights> {
    dim_check("imprint dim", base.dim(), episode.dim())?;
    let mut means = episode.support_means()?;
    for (j, mut col) in means.column_iter_mut().enumerate() {
        let n = col.norm();
        if !(n > 0.0) {
            return Err(Error::Degenerate(format!("support mean of novel class {j} has zero norm")));
        }
        col /= n;
    }
    Ok(FastWeights::Lr { w: means })
}

/// Per-class feature means (D x K) of a labeled base dataset.
pub fn base_prototypes(data: &[LabeledExample], classes: usize) -> Result<DMatrix<f64>> {
    let d = data
        .first()
        .ok_or_else(|| Error::InsufficientData("empty base dataset".into()))?
        .feature
        .len();
    let mut sums = DMatrix::zeros(d, classes);
    let mut counts = vec![0usize; classes];
    for e in data {
        if e.label >= classes {
            return Err(Error::Config(format!("label {} out of range", e.label)));
        }
        let mut col = sums.column_mut(e.label);
        col += &e.feature;
        counts[e.label] += 1;
    }
    for (c, n) in counts.iter().enumerate() {
        if *n == 0 {
            return Err(Error::InsufficientData(format!("no examples of base class {c}")));
        }
        sums.column_mut(c).scale_mut(1.0 / *n as f64);
    }
    Ok(sums)
}

fn nearest(x: &DVector<f64>, prototypes: &DMatrix<f64>, offset: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, p) in prototypes.column_iter().enumerate() {
        let d = (x - p).norm_squared();
        if d < best.1 {
            best = (c, d);
        }
    }
    offset + best.0
}

/// Nearest-prototype labels for the joint query set (base queries first).
/// Ties resolve to the lowest class index.
pub fn baseline_protonet(episode: &Episode, base_prototypes: &DMatrix<f64>) -> Result<Vec<usize>> {
    let all = joint_prototypes(episode, base_prototypes)?;
    Ok(episode
        .joint_query()
        .iter()
        .map(|e| nearest(&e.feature, &all, 0))
        .collect())
}

fn joint_prototypes(episode: &Episode, base_prototypes: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if base_prototypes.ncols() != episode.base_classes {
        return Err(Error::InsufficientData(format!(
            "{} base prototypes for {} base classes",
            base_prototypes.ncols(),
            episode.base_classes
        )));
    }
    dim_check("prototype dim", episode.dim(), base_prototypes.nrows())?;
    let novel = episode.support_means()?;
    let mut all = DMatrix::zeros(episode.dim(), episode.total_classes());
    all.columns_mut(0, episode.base_classes).copy_from(base_prototypes);
    all.columns_mut(episode.base_classes, episode.ways).copy_from(&novel);
    Ok(all)
}

fn protonet_stats(episode: &Episode, base_prototypes: &DMatrix<f64>) -> Result<EpisodeStats> {
    let all = joint_prototypes(episode, base_prototypes)?;
    let k = episode.base_classes;
    let novel = all.columns(k, episode.ways).into_owned();
    let labels = |set: &[LabeledExample]| set.iter().map(|e| e.label).collect::<Vec<_>>();
    let qb = &episode.query_base;
    let qn = &episode.query_novel;
    Ok(EpisodeStats::from_predictions(
        &labels(qb),
        &qb.iter().map(|e| nearest(&e.feature, base_prototypes, 0)).collect::<Vec<_>>(),
        &qb.iter().map(|e| nearest(&e.feature, &all, 0)).collect::<Vec<_>>(),
        &labels(qn),
        &qn.iter().map(|e| nearest(&e.feature, &novel, k)).collect::<Vec<_>>(),
        &qn.iter().map(|e| nearest(&e.feature, &all, 0)).collect::<Vec<_>>(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent scalar Adam.
    fn scalar_adam(theta0: f64, g: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(th);
        }
        out
    }

    #[test]
    fn adam_cases() {
        let mut state = AdamState::new(2, LrSchedule::default());
        let mut theta = vec![1.0, -2.0];
        adam_step(&mut theta, &[0.0, 0.0], &mut state).unwrap();
        assert_eq!(theta, vec![1.0, -2.0]);

        let mut state = AdamState::new(2, LrSchedule::default());
        adam_step(&mut theta, &[3.0, -0.5], &mut state).unwrap();
        assert_abs_diff_eq!(theta[0], 1.0 - 1e-3, epsilon = 1e-10);
        assert_abs_diff_eq!(theta[1], -2.0 + 1e-3, epsilon = 1e-10);

        let mut state = AdamState::new(1, LrSchedule::default());
        let mut th = vec![0.7];
        let expected = scalar_adam(0.7, 0.37, 1e-3, 10);
        for e in expected {
            adam_step(&mut th, &[0.37], &mut state).unwrap();
            assert_abs_diff_eq!(th[0], e, epsilon = 1e-12);
        }
        assert!(adam_step(&mut th, &[f64::NAN], &mut state).is_err());
    }

    #[test]
    fn schedule_decay() {
        let s = LrSchedule {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_step: 4000,
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(3999), 1e-3);
        assert_abs_diff_eq!(s.lr_at(4000), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(7999), 1e-4, epsilon = 1e-18);
    }

    #[test]
    fn gradient_method_parse() {
        assert_eq!("rbp".parse::<GradientMethod>().unwrap(), GradientMethod::Rbp);
        assert_eq!(
            "tbptt:5".parse::<GradientMethod>().unwrap(),
            GradientMethod::Tbptt {
                steps: 5,
                alpha: DEFAULT_UNROLL_ALPHA
            }
        );
        assert_eq!(
            "tbptt:3:0.25".parse::<GradientMethod>().unwrap(),
            GradientMethod::Tbptt { steps: 3, alpha: 0.25 }
        );
        for bad in ["tbptt", "tbptt:0", "bptt:5", "rbp:1", "tbptt:2:-1"] {
            assert!(bad.parse::<GradientMethod>().is_err(), "{bad}");
        }
    }

    #[test]
    fn hand_counted_deltas() {
        let stats = EpisodeStats::from_predictions(
            &[0, 1, 2, 3],
            &[0, 1, 2, 0],
            &[0, 1, 5, 5],
            &[4, 5, 4, 5],
            &[4, 5, 4, 5],
            &[4, 5, 4, 1],
        );
        let r = MetricsReport::from_episodes(&[stats]).unwrap();
        assert_abs_diff_eq!(r.delta_a, -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.delta_b, -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.delta, -0.25, epsilon = 1e-15);
        assert_eq!(r.delta, (r.delta_a + r.delta_b) / 2.0);
        assert_abs_diff_eq!(r.acc_both, 5.0 / 8.0, epsilon = 1e-15);
        assert!(MetricsReport::from_episodes(&[]).is_err());
    }

    #[test]
    fn identical_predictions_no_delta() {
        let p = [0, 1, 1];
        let s = EpisodeStats::from_predictions(&p, &p, &p, &[3, 4], &[4, 4], &[4, 4]);
        let r = MetricsReport::from_episodes(&[s, s]).unwrap();
        assert_eq!((r.delta_a, r.delta_b, r.delta), (0.0, 0.0, 0.0));
        assert_eq!(r.hw_delta, 0.0);
    }

    fn episode_from(support: Vec<(Vec<f64>, usize)>, query: Vec<(Vec<f64>, usize)>, k: usize, ways: usize) -> Episode {
        let ex = |v: Vec<(Vec<f64>, usize)>| {
            v.into_iter()
                .map(|(f, l)| LabeledExample::new(DVector::from_vec(f), l))
                .collect::<Vec<_>>()
        };
        let query = ex(query);
        Episode {
            support: ex(support),
            query_base: query.iter().filter(|e| e.label < k).cloned().collect(),
            query_novel: query.iter().filter(|e| e.label >= k).cloned().collect(),
            novel_class_ids: (0..ways as u32).collect(),
            base_classes: k,
            ways,
        }
    }

    #[test]
    fn imprint_cases() {
        let base = BaseClassifier::new(DMatrix::identity(2, 1)).unwrap();
        let ep = episode_from(vec![(vec![3.0, 4.0], 1)], vec![(vec![1.0, 1.0], 1)], 1, 1);
        let FastWeights::Lr { w } = baseline_imprint(&ep, &base).unwrap() else { panic!() };
        assert_abs_diff_eq!(w[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(1, 0)], 0.8, epsilon = 1e-15);

        let ep = episode_from(vec![(vec![2.0, 0.0], 1), (vec![0.0, 2.0], 1)], vec![], 1, 1);
        let FastWeights::Lr { w } = baseline_imprint(&ep, &base).unwrap() else { panic!() };
        let r = 0.5f64.sqrt();
        assert_abs_diff_eq!(w[(0, 0)], r, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(1, 0)], r, epsilon = 1e-15);

        let ep = episode_from(vec![(vec![1.0, -2.0], 1), (vec![-1.0, 2.0], 1)], vec![], 1, 1);
        assert!(matches!(baseline_imprint(&ep, &base), Err(Error::Degenerate(_))));
    }

    #[test]
    fn protonet_cases() {
        // Base prototypes at (0,0) and (4,0); novel support mean at (0,4).
        let protos = DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 4.0, 0.0]);
        let queries = vec![
            (vec![4.0, 0.0], 1),
            (vec![2.0, 0.0], 0),
            (vec![1.0, 3.5], 2),
            (vec![3.0, 1.0], 1),
        ];
        let ep = episode_from(vec![(vec![0.0, 4.0], 2)], queries.clone(), 2, 1);
        let pred = baseline_protonet(&ep, &protos).unwrap();
        // Brute-force distance table.
        let centers = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let joint = ep.joint_query();
        let expected: Vec<usize> = joint
            .iter()
            .map(|e| {
                let d: Vec<f64> = centers
                    .iter()
                    .map(|c| (e.feature[0] - c[0]).powi(2) + (e.feature[1] - c[1]).powi(2))
                    .collect();
                let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
                d.iter().position(|&x| x == min).unwrap()
            })
            .collect();
        assert_eq!(pred, expected);
        // The exact prototype and the (2,0) tie between classes 0 and 1.
        assert_eq!(pred[0], 1);
        assert_eq!(pred[1], 0);

        let wrong = DMatrix::zeros(2, 3);
        assert!(matches!(baseline_protonet(&ep, &wrong), Err(Error::InsufficientData(_))));
    }
}
