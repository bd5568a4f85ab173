#![allow(dead_code)]

use ifsl_core::attractor::MetaParams;
use ifsl_core::classifier::ClassifierKind;
use ifsl_core::desk::{DeskSetup, PretrainConfig, WorldConfig};
use ifsl_core::embeddings::{sample_episode, Episode};
use ifsl_core::exec::stream_rng;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

/// A small world with a pretrained base classifier.
pub fn small_setup(dim: usize, base_classes: usize, pool: usize, seed: u64) -> DeskSetup {
    let world = WorldConfig {
        base_classes,
        novel_pool: pool,
        dim,
        separation: 4.0,
        stddev: 1.0,
        seed,
    };
    let pretrain = PretrainConfig {
        per_class: 30,
        epochs: 100,
        ..Default::default()
    };
    DeskSetup::build(&world, &pretrain).unwrap()
}

pub fn episode(setup: &DeskSetup, shots: usize, ways: usize, seed: u64) -> Episode {
    let cfg = setup.episode_config(shots, ways, 3);
    sample_episode(&setup.world, &cfg, seed).unwrap()
}

/// Meta-parameters with every coordinate perturbed away from the trivial
/// initialization, so that all gradient paths are exercised.
pub fn random_meta(dim: usize, kind: ClassifierKind, seed: u64) -> MetaParams {
    let meta = MetaParams::init(dim, kind, seed);
    let mut rng = stream_rng(seed, 99);
    let values: Vec<f64> = meta
        .to_vec()
        .iter()
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut meta = meta.with_values(&values).unwrap();
    meta.tau = 1.0 + rng.random::<f64>();
    meta
}

pub fn random_vector(n: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, 7);
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Central differences of a scalar function.
pub fn numeric_grad<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm()).max(1e-12);
    (a - b).norm() / scale
}
