//! Seeded statistical checks; every bound is three standard errors unless noted.

mod common;

use dr_ensemble::consensus::{build_gossip_network, poisson_schedule, GossipClock, Topology};
use dr_ensemble::ingest::{estimate_transition_matrix, StatePowerMap};
use dr_ensemble::math::{SimplexPoint, StochasticMatrix};
use dr_ensemble::simulator::{
    gaussian_step_unprojected, gaussian_variance, propagate_gaussian, sample_unit_transition, simulate_exact,
    NoiseKind, NoiseModel, PolicyAssignment,
};
use dr_ensemble::solver::{JointState, PolicyStack, StageCosts, UnitProfile};
use rand::Rng;

#[test]
fn inverse_cdf_sampler_frequencies() {
    let row = SimplexPoint::new(vec![0.1, 0.25, 0.05, 0.6]).unwrap();
    let draws = 100_000;
    let mut rng = common::rng(1);
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sample_unit_transition(&row, rng.random::<f64>()).unwrap()] += 1;
    }
    for (c, &p) in counts.iter().zip(row.as_slice()) {
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((*c as f64 / draws as f64 - p).abs() <= 3.0 * se, "{counts:?}");
    }
}

#[test]
fn poisson_clock_inter_arrivals_and_pairs() {
    let network = build_gossip_network(5, &Topology::MetropolisComplete, 2.0, 4).unwrap();
    let events: Vec<_> = GossipClock::new(&network, 8).take(50_000).collect();
    let n = events.len() as f64;
    // inter-arrivals are Exp(N r): mean and standard deviation 1 / (N r)
    let mean_gap = events.last().unwrap().time / n;
    let expected = 1.0 / (5.0 * 2.0);
    assert!((mean_gap - expected).abs() <= 3.0 * expected / n.sqrt(), "{mean_gap}");
    // sharers are uniform, receivers follow the sharer's weight row
    for m in 0..5 {
        let from_m: Vec<_> = events.iter().filter(|e| e.sharer == m).collect();
        let share = from_m.len() as f64 / n;
        assert!((share - 0.2).abs() <= 3.0 * (0.2 * 0.8 / n).sqrt());
        for r in 0..5 {
            let p = network.weight(m, r);
            let freq = from_m.iter().filter(|e| e.receiver == r).count() as f64 / from_m.len() as f64;
            assert!((freq - p).abs() <= 3.0 * (p * (1.0 - p) / from_m.len() as f64).sqrt(), "{m}->{r}");
        }
    }
}

#[test]
fn poisson_schedule_counts_match_the_rate() {
    let network = build_gossip_network(10, &Topology::Uniform, 1.0, 0).unwrap();
    let horizon = 2_000.0;
    let events = poisson_schedule(&network, horizon, 3).unwrap();
    let expected = 10.0 * horizon;
    assert!((events.len() as f64 - expected).abs() <= 3.0 * expected.sqrt());
    assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
    assert!(events.iter().all(|e| e.time < horizon));
}

#[test]
fn gaussian_step_matches_the_stated_covariance() {
    let p = StochasticMatrix::from_rows(vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.4, 0.3], vec![0.1, 0.1, 0.8]]).unwrap();
    let x = SimplexPoint::new(vec![0.5, 0.3, 0.2]).unwrap();
    let units = 50;
    let target = gaussian_variance(x.as_slice(), &p, units);
    let mean = p.transpose_apply(x.as_slice());
    let samples = 20_000;
    let mut rng = common::rng(12);
    let mut second = [0.0; 3];
    for _ in 0..samples {
        let y = gaussian_step_unprojected(&x, &p, units, &mut rng).unwrap();
        for j in 0..3 {
            second[j] += (y[j] - mean[j]).powi(2) / samples as f64;
        }
    }
    for j in 0..3 {
        assert!((second[j] / target[j] - 1.0).abs() <= 0.10, "state {j}: {} vs {}", second[j], target[j]);
    }
}

#[test]
fn projected_gaussian_step_stays_on_the_simplex() {
    let p = StochasticMatrix::from_rows(vec![vec![0.99, 0.01], vec![0.5, 0.5]]).unwrap();
    let x = SimplexPoint::new(vec![0.999, 0.001]).unwrap();
    let noise = NoiseModel::new(NoiseKind::GaussianClt, 3).unwrap();
    for seed in 0..200 {
        let y = propagate_gaussian(&x, &p, noise, seed).unwrap();
        assert!((y.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y.as_slice().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn exact_simulation_tracks_the_mean_field() {
    let n = 10_000;
    let p = StochasticMatrix::from_rows(vec![vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap();
    let units: Vec<_> = (0..n)
        .map(|id| UnitProfile::stage_invariant(id as u64, p.clone(), vec![1.0, 1.0], 4).unwrap())
        .collect();
    let stack = PolicyStack::new(vec![p.clone(); 4]).unwrap();
    let costs = StageCosts::new(vec![vec![0.0, 0.0]; 5]).unwrap();
    let power = StatePowerMap::new(vec![1.0, 2.0]).unwrap();
    let initial = JointState::new(vec![0; n], 2).unwrap();
    let run = simulate_exact(&units, &PolicyAssignment::Shared(stack), &initial, &costs, &power, 21).unwrap();
    let mut x = vec![1.0, 0.0];
    let bound = 5.0 * (0.25 / n as f64).sqrt();
    for state in &run.ensemble {
        assert!(common::max_abs(state.as_slice(), &x) <= bound);
        x = p.transpose_apply(&x);
    }
}

#[test]
fn transition_estimates_converge() {
    let truth = StochasticMatrix::from_rows(vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.25, 0.25, 0.5]]).unwrap();
    let mut rng = common::rng(2);
    let mut state = 0;
    let mut states = Vec::with_capacity(200_000);
    for _ in 0..200_000 {
        states.push(state);
        state = sample_unit_transition(&SimplexPoint::new(truth.row(state).to_vec()).unwrap(), rng.random()).unwrap();
    }
    let estimate = estimate_transition_matrix(&states, 3, 1.0).unwrap();
    // each row has tens of thousands of visits; 0.01 is well past three standard errors
    assert!(estimate.max_abs_diff(&truth) < 0.01, "{:?}", estimate.to_rows());
}
