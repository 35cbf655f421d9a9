//! Fixtures shared by the benchmarks.

use occflow::config::ExperimentConfig;
use occflow::scenario::{generate_scenario, Scenario};
use occflow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(uniform(n, -1.0, 1.0, seed).into_iter().map(|v| v as f32).collect(), shape)
}

/// Scores correlated with binary labels, as a trained model would give.
pub fn scores_and_labels(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let y = f64::from(rng.random_bool(0.1));
            ((0.4 * y + rng.random_range(0.0..0.6)).min(1.0), y)
        })
        .unzip()
}

pub fn scenario(seed: u64) -> Scenario {
    generate_scenario(seed, &ExperimentConfig::default().data.generator).expect("default generator is valid")
}
