//! Fixtures shared by the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skillscope::gp::{train, Kernel};
use skillscope::{GpModel, Normalizer};

/// Random standardized inputs in five dimensions with a smooth ±1 labelling.
pub fn labelled_rows(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y = rows.iter().map(|r| if r[0] + 0.5 * r[3] >= 0.0 { 1.0 } else { -1.0 }).collect();
    (rows, y)
}

pub fn model(n: usize) -> GpModel {
    let (rows, y) = labelled_rows(n, 1);
    train(&rows, &y, &Kernel::default_for(5), Normalizer::identity(5)).expect("well-conditioned fixture")
}
