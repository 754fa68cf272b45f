//! Brute-force numeric oracle for the closed-form solvers.
//!
//! Minimizes any of the scheme objectives by centralized projected gradient
//! descent in the Euclidean geometry, without using the softmax structure of
//! the optimum. Only tests and the acceptance suite call into this module.

use crate::error::{invalid, Error, Result};
use crate::math::{project_to_interior_simplex, SimplexPoint};

use super::{JointState, UnitProfile};

/// Lower bound kept by the oracle's projection so that `ln p` stays finite.
const ORACLE_EPS: f64 = 1e-14;

/// One weighted term `w (sum_j p_j c_j + gamma sum_j p_j ln(p_j / pbar_j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowTerm {
    pub weight: f64,
    pub gamma: f64,
    pub default: Vec<f64>,
    pub costs: Vec<f64>,
}

/// A separable objective: a sum over free simplex rows of weighted terms.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleObjective {
    pub rows: Vec<Vec<RowTerm>>,
}

impl OracleObjective {
    /// Joint-state problem: units in the same state share that state's row.
    /// Rows are returned for occupied states only, in increasing state order.
    pub fn posterior(units: &[UnitProfile], stage: usize, joint: &JointState, q_next: &[f64]) -> Self {
        let n = units.len() as f64;
        let s = units[0].states();
        let rows = (0..s)
            .filter_map(|i| {
                let terms: Vec<RowTerm> = joint
                    .members(i)
                    .map(|m| term(&units[m], stage, i, 1.0 / n, q_next))
                    .collect();
                (!terms.is_empty()).then_some(terms)
            })
            .collect();
        OracleObjective { rows }
    }

    /// A single distribution shared by all units.
    pub fn trivial(units: &[UnitProfile], stage: usize, joint: &JointState, q_next: &[f64]) -> Self {
        let n = units.len() as f64;
        let terms = units
            .iter()
            .zip(joint.states())
            .map(|(u, &i)| term(u, stage, i, 1.0 / n, q_next))
            .collect();
        OracleObjective { rows: vec![terms] }
    }

    /// Prior-consensus problem weighted by the ensemble state `x` (all `x_i > 0`).
    pub fn prior(units: &[UnitProfile], stage: usize, x: &[f64], q_next: &[f64]) -> Self {
        let n = units.len() as f64;
        let rows = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| units.iter().map(|u| term(u, stage, i, xi / n, q_next)).collect())
            .collect();
        OracleObjective { rows }
    }

    /// Stage problem where unit `n` is charged `next_costs[n]` after the transition.
    pub fn stage(units: &[UnitProfile], stage: usize, next_costs: &[Vec<f64>]) -> Self {
        let n = units.len() as f64;
        let s = units[0].states();
        let rows = (0..s)
            .map(|i| {
                units
                    .iter()
                    .zip(next_costs)
                    .map(|(u, c)| term(u, stage, i, 1.0 / n, c))
                    .collect()
            })
            .collect();
        OracleObjective { rows }
    }

    fn row_value(terms: &[RowTerm], p: &[f64]) -> f64 {
        terms
            .iter()
            .map(|t| {
                let lin: f64 = p.iter().zip(&t.costs).map(|(a, c)| a * c).sum();
                let kl: f64 = p.iter().zip(&t.default).map(|(a, d)| a * (a / d).ln()).sum();
                t.weight * (lin + t.gamma * kl)
            })
            .sum()
    }

    fn row_gradient(terms: &[RowTerm], p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for t in terms {
            for (j, g) in out.iter_mut().enumerate() {
                *g += t.weight * (t.costs[j] + t.gamma * ((p[j] / t.default[j]).ln() + 1.0));
            }
        }
    }

    /// Objective value at the given rows.
    pub fn value(&self, rows: &[SimplexPoint]) -> f64 {
        self.rows
            .iter()
            .zip(rows)
            .map(|(terms, p)| Self::row_value(terms, p.as_slice()))
            .sum()
    }
}

/// Removes the component along the all-ones direction, which the simplex
/// constraint makes irrelevant and which otherwise swamps rounding near the optimum.
fn center(g: &mut [f64]) {
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|x| *x -= mean);
}

fn term(u: &UnitProfile, stage: usize, state: usize, weight: f64, costs: &[f64]) -> RowTerm {
    RowTerm {
        weight,
        gamma: u.gamma(stage, state),
        default: u.default_row(stage, state).to_vec(),
        costs: costs.to_vec(),
    }
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub rows: Vec<SimplexPoint>,
    pub value: f64,
    pub iterations: usize,
}

/// Projected gradient descent with backtracking (Armijo) steps from the
/// uniform point, stopping once the projected-gradient residual
/// `max |p - T(p - grad)|` is at most `tol`.
pub fn oracle_minimize(objective: &OracleObjective, tol: f64, max_iterations: usize) -> Result<OracleSolution> {
    oracle_minimize_from(objective, None, tol, max_iterations)
}

/// [`oracle_minimize`] started from the given rows instead of the uniform point.
pub fn oracle_minimize_from(
    objective: &OracleObjective,
    start: Option<&[Vec<f64>]>,
    tol: f64,
    max_iterations: usize,
) -> Result<OracleSolution> {
    if !(tol > 0.0) {
        return invalid("oracle tolerance must be positive");
    }
    let mut rows = Vec::with_capacity(objective.rows.len());
    let mut iterations = 0;
    for (r, terms) in objective.rows.iter().enumerate() {
        if terms.is_empty() {
            return invalid(format!("row {r} has no terms"));
        }
        let s = terms[0].default.len();
        let mut p = match start {
            Some(rows) => project_to_interior_simplex(&rows[r], ORACLE_EPS)?.into_vec(),
            None => vec![1.0 / s as f64; s],
        };
        let mut grad = vec![0.0; s];
        let mut slope = vec![0.0; s];
        let mut step: f64 = 1.0;
        let mut converged = false;
        for _ in 0..max_iterations {
            iterations += 1;
            OracleObjective::row_gradient(terms, &p, &mut grad);
            center(&mut grad);
            let unit_step: Vec<f64> = p.iter().zip(&grad).map(|(a, g)| a - g).collect();
            let mapped = project_to_interior_simplex(&unit_step, ORACLE_EPS)?;
            let residual = p
                .iter()
                .zip(mapped.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual <= tol {
                converged = true;
                break;
            }
            let f0 = OracleObjective::row_value(terms, &p);
            step = (step * 2.0).min(1e6);
            loop {
                let trial: Vec<f64> = p.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
                let cand = project_to_interior_simplex(&trial, ORACLE_EPS)?.into_vec();
                let decrease: f64 = grad.iter().zip(cand.iter().zip(&p)).map(|(g, (c, a))| g * (c - a)).sum();
                let f1 = OracleObjective::row_value(terms, &cand);
                // Near the optimum objective differences drop below rounding; the
                // slope at the candidate still tells whether the step overshot.
                OracleObjective::row_gradient(terms, &cand, &mut slope);
                center(&mut slope);
                let end_slope: f64 = slope.iter().zip(cand.iter().zip(&p)).map(|(g, (c, a))| g * (c - a)).sum();
                if f1 <= f0 + 1e-4 * decrease || end_slope <= 0.0 || step < 1e-300 {
                    p = cand;
                    break;
                }
                step *= 0.5;
            }
        }
        if !converged {
            return Err(Error::OracleFailure(format!("row {r} not stationary after {max_iterations} iterations")));
        }
        rows.push(SimplexPoint::new(p)?);
    }
    let value = objective.value(&rows);
    Ok(OracleSolution { rows, value, iterations })
}
