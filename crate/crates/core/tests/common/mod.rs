#![allow(dead_code)]

use dr_ensemble::math::StochasticMatrix;
use dr_ensemble::solver::{JointState, StageCosts, UnitProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive random row, entries at least `floor` before normalizing.
pub fn random_row(rng: &mut impl Rng, s: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..s).map(|_| rng.random_range(floor..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn random_matrix(rng: &mut impl Rng, s: usize) -> StochasticMatrix {
    StochasticMatrix::from_rows((0..s).map(|_| random_row(rng, s, 0.05)).collect()).unwrap()
}

/// Heterogeneous units with stage-varying defaults and weights.
pub fn random_units(rng: &mut impl Rng, n: usize, s: usize, stages: usize, gamma: (f64, f64)) -> Vec<UnitProfile> {
    (0..n)
        .map(|id| {
            let defaults = (0..stages).map(|_| random_matrix(rng, s)).collect();
            let weights = (0..stages).map(|_| (0..s).map(|_| rng.random_range(gamma.0..gamma.1)).collect()).collect();
            UnitProfile::new(id as u64, defaults, weights).unwrap()
        })
        .collect()
}

pub fn random_costs(rng: &mut impl Rng, s: usize, l: usize, scale: f64) -> StageCosts {
    StageCosts::new((0..l).map(|_| (0..s).map(|_| rng.random_range(0.0..scale)).collect()).collect()).unwrap()
}

pub fn random_joint(rng: &mut impl Rng, n: usize, s: usize) -> JointState {
    JointState::new((0..n).map(|_| rng.random_range(0..s)).collect(), s).unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
