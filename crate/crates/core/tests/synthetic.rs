use ifsl_core::embeddings::{generate_synthetic_world, EpisodeSource};
use ifsl_core::exec::stream_rng;
use nalgebra::DVector;
use rand_distr::{Distribution, Normal};

/// Draws with a sampler written independently of the library: Box-Muller
/// free, straight from `rand_distr::Normal` around the stored means.
fn independent_draws(mean: &[f64], sd: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 1234);
    let normal = Normal::new(0.0, sd).unwrap();
    (0..n)
        .map(|_| mean.iter().map(|m| m + normal.sample(&mut rng)).collect())
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn class_zero_draws_stay_nearest_their_mean() {
    let world = generate_synthetic_world(2, 2, 8, 10.0, 0.5, 1).unwrap();
    let m0: Vec<f64> = world.class_means.row(0).iter().copied().collect();
    let m1: Vec<f64> = world.class_means.row(1).iter().copied().collect();

    let draws = independent_draws(&m0, 0.5, 1000, 5);
    let near = draws.iter().filter(|x| dist2(x, &m0) < dist2(x, &m1)).count();
    assert!(near >= 990, "independent sampler: {near}/1000");

    let mut rng = stream_rng(9, 0);
    let lib = world.base_samples(0, 1000, &mut rng).unwrap();
    let near = lib
        .iter()
        .filter(|x| dist2(x.as_slice(), &m0) < dist2(x.as_slice(), &m1))
        .count();
    assert!(near >= 990, "library sampler: {near}/1000");
}

#[test]
fn empirical_means_within_three_standard_errors() {
    let sd = 1.5;
    let world = generate_synthetic_world(3, 2, 6, 4.0, sd, 42).unwrap();
    let n = 2000;
    let mut rng = stream_rng(3, 0);
    for c in 0..world.class_count() {
        let draws: Vec<DVector<f64>> = (0..n).map(|_| world.draw(c, &mut rng)).collect();
        let mean = draws.iter().fold(DVector::zeros(6), |acc, x| acc + x) / n as f64;
        let bound = 3.0 * sd / (n as f64).sqrt();
        for i in 0..6 {
            let err = (mean[i] - world.class_means[(c, i)]).abs();
            assert!(err <= bound, "class {c} coord {i}: {err} > {bound}");
        }
    }
}

#[test]
fn mean_separation_matches_its_scale() {
    // E|mu_i - mu_j|^2 = separation^2, averaged over many pairs.
    let world = generate_synthetic_world(40, 40, 32, 5.0, 1.0, 8).unwrap();
    let rows = world.class_count();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..rows {
        for j in (i + 1)..rows {
            total += (world.class_means.row(i) - world.class_means.row(j)).norm_squared();
            pairs += 1.0;
        }
    }
    let mean = total / pairs;
    assert!((mean - 25.0).abs() < 1.5, "{mean}");
}

#[test]
fn uniform_base_batch_covers_every_class() {
    let world = generate_synthetic_world(4, 1, 3, 4.0, 1.0, 2).unwrap();
    let mut rng = stream_rng(1, 0);
    let batch = world.base_uniform(4000, &mut rng).unwrap();
    let mut counts = [0usize; 4];
    for e in &batch {
        counts[e.label] += 1;
    }
    // Binomial(4000, 1/4): sd ~ 27.
    assert!(counts.iter().all(|&c| (c as f64 - 1000.0).abs() < 150.0), "{counts:?}");
}
