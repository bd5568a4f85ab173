//! Experiment configuration: a JSON file whose every field has a default,
//! overridden by command-line flags and the `IFSL_SEED` variable.

use std::path::{Path, PathBuf};

use ifsl_core::attractor::AttractorMode;
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::desk::{PretrainConfig, WorldConfig};
use ifsl_core::embeddings::{BaseBatch, EpisodeConfig, SplitCounts};
use ifsl_core::exec::mix_seed;
use ifsl_core::implicit_grad::RbpConfig;
use ifsl_core::inner_solver::SolverConfig;
use ifsl_core::meta::{GradientMethod, InnerEval, LrSchedule, DEFAULT_UNROLL_ALPHA};
use ifsl_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "IFSL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub base_classes: usize,
    pub novel_pool: usize,
    pub dim: usize,
    pub separation: f64,
    pub stddev: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            base_classes: w.base_classes,
            novel_pool: w.novel_pool,
            dim: w.dim,
            separation: w.separation,
            stddev: w.stddev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            lr: p.lr,
            weight_decay: p.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub shots: usize,
    pub ways: usize,
    pub queries: usize,
    pub base_batch: BaseBatch,
    pub base_query_count: Option<usize>,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            shots: 1,
            ways: 5,
            queries: 5,
            base_batch: BaseBatch::Uniform,
            base_query_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub steps: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_step: usize,
    pub meta_batch: usize,
    /// `rbp`, `tbptt:T` or `tbptt:T:alpha`.
    pub gradient: GradientMethod,
}

impl Default for MetaSection {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-2,
            decay_factor: 0.1,
            decay_step: 4000,
            meta_batch: 1,
            gradient: GradientMethod::Rbp,
        }
    }
}

/// How fast weights are fitted at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum InnerSection {
    #[default]
    Converged,
    Steps { steps: usize, alpha: f64 },
}

impl std::str::FromStr for InnerSection {
    type Err = CliError;

    /// `converged` or `steps:T[:alpha]`.
    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("invalid inner mode {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["converged"] => Ok(Self::Converged),
            ["steps", t, rest @ ..] if rest.len() <= 1 => {
                let steps = t.parse().map_err(|_| bad())?;
                let alpha = match rest {
                    [a] => a.parse().map_err(|_| bad())?,
                    _ => DEFAULT_UNROLL_ALPHA,
                };
                Ok(Self::Steps { steps, alpha })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub inner: InnerSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 500,
            inner: InnerSection::Converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldSection,
    pub splits: SplitCounts,
    pub pretrain: PretrainSection,
    pub episode: EpisodeSection,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub rbp: RbpConfig,
    pub meta: MetaSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            world: WorldSection::default(),
            splits: SplitCounts::default(),
            pretrain: PretrainSection::default(),
            episode: EpisodeSection::default(),
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            rbp: RbpConfig::default(),
            meta: MetaSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Stage indices for seed derivation.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    World = 1,
    Table = 2,
    Pretrain = 3,
    MetaInit = 4,
    MetaEpisodes = 5,
    Eval = 6,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies `IFSL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        mix_seed(self.seed, stage as u64)
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            base_classes: self.world.base_classes,
            novel_pool: self.world.novel_pool,
            dim: self.world.dim,
            separation: self.world.separation,
            stddev: self.world.stddev,
            seed: self.stage_seed(Stage::World),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            per_class: self.splits.base_train,
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            weight_decay: self.pretrain.weight_decay,
            seed: self.stage_seed(Stage::Pretrain),
        }
    }

    /// Episode shape for a source with `base_classes` classes of dimension `dim`.
    pub fn episode_config(&self, base_classes: usize, dim: usize) -> EpisodeConfig {
        let e = &self.episode;
        let mut cfg = EpisodeConfig::new(e.shots, e.ways, e.queries, base_classes, dim);
        cfg.base_batch = e.base_batch;
        cfg.base_query_count = e.base_query_count;
        cfg
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.meta.lr,
            decay_factor: self.meta.decay_factor,
            decay_step: self.meta.decay_step,
        }
    }

    pub fn inner_eval(&self) -> InnerEval {
        match self.eval.inner {
            InnerSection::Converged => InnerEval::Converged(self.solver.clone()),
            InnerSection::Steps { steps, alpha } => InnerEval::Unrolled { steps, alpha },
        }
    }

    pub fn model_with(&self, kind: ClassifierKind, mode: AttractorMode) -> ModelConfig {
        ModelConfig {
            kind,
            mode,
            ..self.model.clone()
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |msg: String| Err(CliError::Config(msg));
        let w = &self.world;
        if w.base_classes == 0 || w.novel_pool == 0 || w.dim == 0 {
            return cfg("world class counts and dim must be positive".into());
        }
        if !(w.separation > 0.0) || !(w.stddev > 0.0) {
            return cfg("world separation and stddev must be positive".into());
        }
        if self.episode.ways > w.novel_pool {
            return cfg(format!(
                "episode ways {} exceed the novel pool of {}",
                self.episode.ways, w.novel_pool
            ));
        }
        let per_novel = self.episode.shots + self.episode.queries;
        if per_novel > self.splits.novel {
            return cfg(format!(
                "episodes need {per_novel} rows per novel class, splits provide {}",
                self.splits.novel
            ));
        }
        if self.episode.base_batch == BaseBatch::Balanced
            && self.episode.queries > self.splits.base_val.min(self.splits.base_test)
        {
            return cfg("balanced base batches need queries <= base_val and base_test rows".into());
        }
        if self.splits.base_train == 0 || self.splits.base_val == 0 || self.splits.base_test == 0 {
            return cfg("every base split needs rows".into());
        }
        self.episode_config(w.base_classes, w.dim).validate()?;
        self.pretrain_config().validate()?;
        self.solver.validate()?;
        self.rbp.validate()?;
        if self.meta.meta_batch == 0 {
            return cfg("meta_batch must be positive".into());
        }
        if !(self.meta.lr > 0.0) {
            return cfg("meta lr must be positive".into());
        }
        if self.eval.episodes == 0 {
            return cfg("eval episodes must be at least 1".into());
        }
        if let InnerSection::Steps { steps, alpha } = self.eval.inner {
            if steps == 0 || !(alpha > 0.0) {
                return cfg("unrolled evaluation needs steps >= 1 and alpha > 0".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "meta": {"gradient": "tbptt:5"}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.meta.steps, 300);
        assert!(matches!(partial.meta.gradient, GradientMethod::Tbptt { steps: 5, .. }));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 1}"#).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.eval.episodes = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.episode.ways = 17;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.splits.novel = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inner_modes_parse() {
        assert_eq!("converged".parse::<InnerSection>().unwrap(), InnerSection::Converged);
        assert_eq!(
            "steps:5:0.2".parse::<InnerSection>().unwrap(),
            InnerSection::Steps { steps: 5, alpha: 0.2 }
        );
        assert!("steps".parse::<InnerSection>().is_err());
    }
}
