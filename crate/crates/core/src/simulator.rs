//! Forward simulation of a DR event.
//!
//! Exact mode moves every unit by inverse-CDF sampling. Each unit draws one
//! uniform per stage from a stream keyed by `(seed, unit id, stage)`, so
//! different schemes simulated with the same seed see the same random numbers
//! and serial and parallel execution agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ingest::StatePowerMap;
use crate::math::{kl_divergence, project_to_simplex, SimplexPoint, StochasticMatrix};
use crate::solver::{solve_trivial, EnsembleState, JointState, PolicyStack, StageCosts, UnitProfile, ValueTable};

/// Returns the state `s` with `xi` in `[F(s-1), F(s))` where `F` is the cumulative row.
pub fn sample_unit_transition(row: &SimplexPoint, xi: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&xi) {
        return invalid(format!("uniform draw {xi} outside [0, 1)"));
    }
    let mut cumulative = 0.0;
    for (s, &p) in row.as_slice().iter().enumerate() {
        cumulative += p;
        if xi < cumulative {
            return Ok(s);
        }
    }
    // rounding left the total just under xi; take the last reachable state
    Ok(row.as_slice().iter().rposition(|&p| p > 0.0).expect("a simplex row has mass"))
}

fn inverse_cdf(row: &[f64], xi: f64) -> usize {
    let mut cumulative = 0.0;
    for (s, &p) in row.iter().enumerate() {
        cumulative += p;
        if xi < cumulative {
            return s;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// The uniform draw of `unit_id` at `stage`.
fn unit_draw(seed: u64, unit_id: u64, stage: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(unit_id);
    rng.set_word_pos(stage as u128 * 16);
    rng.random::<f64>()
}

/// `x_i = N_i / N`.
pub fn ensemble_state_of(joint: &JointState, states: usize) -> Result<EnsembleState> {
    if joint.is_empty() {
        return invalid("joint state is empty");
    }
    let mut x = vec![0.0; states];
    for &i in joint.states() {
        let Some(slot) = x.get_mut(i) else {
            return invalid(format!("state {i} out of range for {states} states"));
        };
        *slot += 1.0;
    }
    let n = joint.len() as f64;
    Ok(SimplexPoint::from_vec_unchecked(x.into_iter().map(|c| c / n).collect()))
}

/// Draws `n` i.i.d. initial states from `distribution`.
pub fn sample_joint_state(distribution: &SimplexPoint, n: usize, seed: u64) -> Result<JointState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = (0..n).map(|_| inverse_cdf(distribution.as_slice(), rng.random())).collect();
    JointState::new(states, distribution.len())
}

/// How units choose their transition rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "policy", rename_all = "kebab-case")]
pub enum PolicyAssignment {
    /// One stack for everybody.
    Shared(PolicyStack),
    /// `stacks[n]` for unit `n`.
    PerUnit(Vec<PolicyStack>),
    /// Trivial consensus re-solved every stage for the realized joint state,
    /// continuing with `values[stage + 1]`.
    TrivialClosedLoop { values: ValueTable },
}

/// A simulated event: `L` stages of ensemble states, power and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Unit states per stage; exact mode only.
    pub joint: Option<Vec<Vec<usize>>>,
    pub ensemble: Vec<EnsembleState>,
    pub mean_power_kw: Vec<f64>,
    /// Spread of unit power across the ensemble.
    pub std_power_kw: Vec<f64>,
    /// Ensemble-average cost charged at each stage.
    pub realized_cost_usd: Vec<f64>,
}

impl Trajectory {
    pub fn stages(&self) -> usize {
        self.ensemble.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.realized_cost_usd.iter().sum()
    }
}

/// Power statistics of an ensemble state: `(sum_i x_i w_i, std across units)`.
fn power_moments(x: &[f64], power: &[f64]) -> (f64, f64) {
    let mean: f64 = x.iter().zip(power).map(|(a, p)| a * p).sum();
    let second: f64 = x.iter().zip(power).map(|(a, p)| a * (p - mean).powi(2)).sum();
    (mean, second.max(0.0).sqrt())
}

fn check_inputs(units: &[UnitProfile], costs: &StageCosts, power: &StatePowerMap) -> Result<(usize, usize)> {
    let Some(first) = units.first() else {
        return invalid("ensemble is empty");
    };
    let (s, l) = (first.states(), costs.stage_count());
    if units.iter().any(|u| u.states() != s || u.stages() + 1 != l) || costs.states() != s || power.states() != s {
        return invalid("units, costs and power map disagree on the state or stage count");
    }
    Ok((s, l))
}

fn check_stack(stack: &PolicyStack, s: usize, l: usize) -> Result<()> {
    if stack.len() + 1 != l || stack.states() != s {
        return invalid(format!("policy stack is {} x {} but the event needs {} stages over {s} states", stack.len(), stack.states(), l - 1));
    }
    Ok(())
}

/// Per-unit Monte Carlo of one event.
pub fn simulate_exact(
    units: &[UnitProfile],
    policies: &PolicyAssignment,
    initial: &JointState,
    costs: &StageCosts,
    power: &StatePowerMap,
    seed: u64,
) -> Result<Trajectory> {
    let (s, l) = check_inputs(units, costs, power)?;
    if initial.len() != units.len() {
        return invalid(format!("initial state lists {} units, ensemble has {}", initial.len(), units.len()));
    }
    match policies {
        PolicyAssignment::Shared(p) => check_stack(p, s, l)?,
        PolicyAssignment::PerUnit(ps) => {
            if ps.len() != units.len() {
                return invalid(format!("{} stacks for {} units", ps.len(), units.len()));
            }
            ps.iter().try_for_each(|p| check_stack(p, s, l))?;
        }
        PolicyAssignment::TrivialClosedLoop { values } => {
            if values.stage_count() != l || values.v.iter().any(|r| r.len() != s) {
                return invalid("trivial value table does not match the event");
            }
        }
    }

    let n = units.len() as f64;
    let mut joint = initial.clone();
    let mut joints = Vec::with_capacity(l);
    let mut ensemble = Vec::with_capacity(l);
    let mut cost = Vec::with_capacity(l);
    for stage in 0..l {
        let x = ensemble_state_of(&joint, s)?;
        let q = costs.stage(stage);
        if stage + 1 == l {
            cost.push(joint.states().iter().map(|&i| q[i]).sum::<f64>() / n);
            joints.push(joint.states().to_vec());
            ensemble.push(x);
            break;
        }
        let trivial_row = match policies {
            PolicyAssignment::TrivialClosedLoop { values } => {
                Some(solve_trivial(units, stage, &joint, values.stage(stage + 1))?)
            }
            _ => None,
        };
        let moves = units
            .par_iter()
            .enumerate()
            .map(|(k, u)| {
                let i = joint.states()[k];
                let row = match policies {
                    PolicyAssignment::Shared(p) => p.stage(stage).row(i),
                    PolicyAssignment::PerUnit(ps) => ps[k].stage(stage).row(i),
                    PolicyAssignment::TrivialClosedLoop { .. } => trivial_row.as_ref().expect("solved").as_slice(),
                };
                let kl = kl_divergence(row, u.default_row(stage, i))?;
                let next = inverse_cdf(row, unit_draw(seed, u.id, stage));
                Ok((next, q[i] + u.gamma(stage, i) * kl))
            })
            .collect::<Result<Vec<(usize, f64)>>>()?;
        cost.push(moves.iter().map(|m| m.1).sum::<f64>() / n);
        joints.push(joint.states().to_vec());
        ensemble.push(x);
        joint = JointState::new(moves.into_iter().map(|m| m.0).collect(), s)?;
    }
    Ok(finish(Some(joints), ensemble, cost, power))
}

fn finish(joint: Option<Vec<Vec<usize>>>, ensemble: Vec<EnsembleState>, cost: Vec<f64>, power: &StatePowerMap) -> Trajectory {
    let (mean, std) = ensemble.iter().map(|x| power_moments(x.as_slice(), power.power())).unzip();
    Trajectory { joint, ensemble, mean_power_kw: mean, std_power_kw: std, realized_cost_usd: cost }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Every unit moves independently; the state is the realized occupancy.
    ExactMultinomial,
    /// Mean `P^T x` plus Gaussian noise with the diagonal covariance
    /// `(1/N) sum_i x_i^2 (p_ij - p_ij^2)`.
    GaussianClt,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub units: u64,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, units: u64) -> Result<Self> {
        if units == 0 {
            return invalid("noise model needs at least one unit");
        }
        Ok(NoiseModel { kind, units })
    }
}

/// Per-entry variance of the Gaussian noise.
pub fn gaussian_variance(x: &[f64], p: &StochasticMatrix, units: u64) -> Vec<f64> {
    let s = p.size();
    (0..s)
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(i, xi)| {
                    let pij = p.get(i, j);
                    xi * xi * (pij - pij * pij)
                })
                .sum::<f64>()
                / units as f64
        })
        .collect()
}

fn check_propagation(x: &EnsembleState, p: &StochasticMatrix) -> Result<()> {
    if x.len() != p.size() {
        return invalid(format!("state has {} entries for a {} x {} matrix", x.len(), p.size(), p.size()));
    }
    Ok(())
}

/// One Gaussian step before projection; may leave the simplex.
pub fn gaussian_step_unprojected(x: &EnsembleState, p: &StochasticMatrix, units: u64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_propagation(x, p)?;
    if units == 0 {
        return invalid("noise model needs at least one unit");
    }
    let mean = p.transpose_apply(x.as_slice());
    let var = gaussian_variance(x.as_slice(), p, units);
    Ok(mean
        .into_iter()
        .zip(var)
        .map(|(m, v)| m + Normal::new(0.0, v.sqrt()).expect("finite variance").sample(rng))
        .collect())
}

/// Ensemble state after one stage under the shared matrix `p`.
pub fn propagate_gaussian(x: &EnsembleState, p: &StochasticMatrix, noise: NoiseModel, seed: u64) -> Result<EnsembleState> {
    propagate_with(x, p, noise, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn propagate_with(x: &EnsembleState, p: &StochasticMatrix, noise: NoiseModel, rng: &mut ChaCha8Rng) -> Result<EnsembleState> {
    check_propagation(x, p)?;
    match noise.kind {
        NoiseKind::None => project_to_simplex(&p.transpose_apply(x.as_slice())),
        NoiseKind::GaussianClt => project_to_simplex(&gaussian_step_unprojected(x, p, noise.units, rng)?),
        NoiseKind::ExactMultinomial => {
            // occupancy counts, rounded so they total N
            let n = noise.units;
            let mut counts: Vec<u64> = x.as_slice().iter().map(|v| (v * n as f64).floor() as u64).collect();
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| {
                let fa = x[a] * n as f64 - counts[a] as f64;
                let fb = x[b] * n as f64 - counts[b] as f64;
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            let short = n - counts.iter().sum::<u64>();
            for &k in order.iter().take(short as usize) {
                counts[k] += 1;
            }
            let mut next = vec![0.0; x.len()];
            for (i, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    next[inverse_cdf(p.row(i), rng.random())] += 1.0;
                }
            }
            Ok(SimplexPoint::from_vec_unchecked(next.into_iter().map(|c| c / n as f64).collect()))
        }
    }
}

/// Approximate-mode event under one shared stack, starting from `x0`.
///
/// The cost charged at state `i` is the ensemble mean of `q_i + gamma KL`.
pub fn simulate_gaussian(
    units: &[UnitProfile],
    policy: &PolicyStack,
    x0: &EnsembleState,
    costs: &StageCosts,
    power: &StatePowerMap,
    noise: NoiseModel,
    seed: u64,
) -> Result<Trajectory> {
    let (s, l) = check_inputs(units, costs, power)?;
    check_stack(policy, s, l)?;
    if x0.len() != s {
        return invalid("initial ensemble state has the wrong length");
    }
    let n = units.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut ensemble = Vec::with_capacity(l);
    let mut cost = Vec::with_capacity(l);
    for stage in 0..l {
        let q = costs.stage(stage);
        if stage + 1 == l {
            cost.push(x.as_slice().iter().zip(q).map(|(a, c)| a * c).sum());
            ensemble.push(x);
            break;
        }
        let p = policy.stage(stage);
        let mut c = 0.0;
        for i in 0..s {
            let mut discomfort = 0.0;
            for u in units {
                discomfort += u.gamma(stage, i) * kl_divergence(p.row(i), u.default_row(stage, i))? / n;
            }
            c += x[i] * (q[i] + discomfort);
        }
        cost.push(c);
        let next = propagate_with(&x, p, noise, &mut rng)?;
        ensemble.push(std::mem::replace(&mut x, next));
    }
    Ok(finish(None, ensemble, cost, power))
}

/// `sum_i x_i power_i` per stage.
pub fn mean_power(trajectory: &Trajectory, power: &StatePowerMap) -> Result<Vec<f64>> {
    trajectory
        .ensemble
        .iter()
        .map(|x| {
            if x.len() != power.states() {
                return invalid("trajectory and power map disagree on the state count");
            }
            Ok(power_moments(x.as_slice(), power.power()).0)
        })
        .collect()
}

/// Writes `stage,scheme,mean_power_kw,std_power_kw,realized_cost_usd`.
pub fn write_trajectories<W: std::io::Write>(out: W, runs: &[(&str, &Trajectory)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "scheme", "mean_power_kw", "std_power_kw", "realized_cost_usd"])?;
    for (scheme, t) in runs {
        for stage in 0..t.stages() {
            w.write_record([
                stage.to_string(),
                scheme.to_string(),
                t.mean_power_kw[stage].to_string(),
                t.std_power_kw[stage].to_string(),
                t.realized_cost_usd[stage].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
