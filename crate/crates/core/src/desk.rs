//! Desk-scale experiment setup: a synthetic world plus its pretrained base
//! classifier, shared by the CLI, benches and acceptance tests.

use serde::{Deserialize, Serialize};

use crate::classifier::{pretrain_base, BaseClassifier};
use crate::embeddings::{generate_synthetic_world, EpisodeConfig, SyntheticWorld};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub base_classes: usize,
    pub novel_pool: usize,
    pub dim: usize,
    pub separation: f64,
    pub stddev: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            base_classes: 16,
            novel_pool: 16,
            dim: 16,
            separation: 6.0,
            stddev: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            epochs: 300,
            lr: 0.5,
            weight_decay: 1e-3,
            seed: 11,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.epochs == 0 {
            return Err(Error::Config("pretraining needs examples and epochs".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// A generated world with its frozen base classifier.
#[derive(Debug, Clone)]
pub struct DeskSetup {
    pub world: SyntheticWorld,
    pub base: BaseClassifier,
}

impl DeskSetup {
    pub fn build(world: &WorldConfig, pretrain: &PretrainConfig) -> Result<Self> {
        pretrain.validate()?;
        let world = generate_synthetic_world(
            world.base_classes,
            world.novel_pool,
            world.dim,
            world.separation,
            world.stddev,
            world.seed,
        )?;
        let data = world.base_dataset(pretrain.per_class, pretrain.seed);
        let base = pretrain_base(
            &data,
            pretrain.epochs,
            pretrain.lr,
            pretrain.weight_decay,
            pretrain.seed,
        )?;
        Ok(Self { world, base })
    }

    /// Episode shape matching the world, with `ways` novel classes and
    /// `queries` queries per class.
    pub fn episode_config(&self, shots: usize, ways: usize, queries: usize) -> EpisodeConfig {
        EpisodeConfig::new(
            shots,
            ways,
            queries,
            self.world.base_class_count,
            self.world.dim(),
        )
    }
}
