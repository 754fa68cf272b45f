//! Closed-form consensus policies and value functions.
//!
//! Every scheme reduces to the same row problem: minimize over a simplex row
//! `p` the objective `sum_j p_j c_j + g sum_j p_j ln p_j - sum_j p_j m_j`,
//! whose solution is `p_j ∝ exp((m_j - c_j) / g)` with optimal value
//! `-g ln sum_j exp((m_j - c_j) / g)`. The schemes differ only in which units
//! are averaged into `g` (discomfort weight) and `m` (weighted log-defaults)
//! and in what plays the role of the cost vector `c`.
//!
//! Stage indices are zero-based: policies exist for stages `0..L-1` and
//! value tables have rows `0..L`, the last one being the terminal cost.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{kl_divergence, lse, softmax, SimplexPoint, StochasticMatrix, Tolerance};

/// Occupancy distribution of the ensemble over states.
pub type EnsembleState = SimplexPoint;

/// One unit's default behaviour and discomfort prices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitProfile {
    pub id: u64,
    /// Default transition matrix for each non-terminal stage (length `L - 1`).
    defaults: Vec<StochasticMatrix>,
    /// `gamma[stage][state]`, dollars per nat.
    gamma: Vec<Vec<f64>>,
}

impl UnitProfile {
    pub fn new(id: u64, defaults: Vec<StochasticMatrix>, gamma: Vec<Vec<f64>>) -> Result<Self> {
        if defaults.is_empty() {
            return invalid(format!("unit {id}: needs at least one stage"));
        }
        if defaults.len() != gamma.len() {
            return invalid(format!(
                "unit {id}: {} default matrices but {} gamma stages",
                defaults.len(),
                gamma.len()
            ));
        }
        let s = defaults[0].size();
        for (stage, (d, g)) in defaults.iter().zip(&gamma).enumerate() {
            if d.size() != s || g.len() != s {
                return invalid(format!("unit {id}: inconsistent state count at stage {stage}"));
            }
            // Assumption: every default probability lies strictly inside (0, 1).
            if let Some(v) = d.as_slice().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
                if s > 1 {
                    return invalid(format!("unit {id}: default entry {v} at stage {stage} is not interior"));
                }
            }
            if let Some(v) = g.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                return invalid(format!("unit {id}: discomfort weight {v} at stage {stage} must be positive"));
            }
        }
        Ok(UnitProfile { id, defaults, gamma })
    }

    /// Same default matrix and discomfort row at every one of `stages` stages.
    pub fn stage_invariant(id: u64, default: StochasticMatrix, gamma: Vec<f64>, stages: usize) -> Result<Self> {
        UnitProfile::new(id, vec![default; stages], vec![gamma; stages])
    }

    pub fn states(&self) -> usize {
        self.defaults[0].size()
    }

    /// Number of decision stages (`L - 1`).
    pub fn stages(&self) -> usize {
        self.defaults.len()
    }

    pub fn default_matrix(&self, stage: usize) -> &StochasticMatrix {
        &self.defaults[stage]
    }

    pub fn default_row(&self, stage: usize, state: usize) -> &[f64] {
        self.defaults[stage].row(state)
    }

    pub fn gamma(&self, stage: usize, state: usize) -> f64 {
        self.gamma[stage][state]
    }

    pub fn gamma_table(&self) -> &[Vec<f64>] {
        &self.gamma
    }

    pub fn defaults(&self) -> &[StochasticMatrix] {
        &self.defaults
    }
}

/// Dollar cost of occupying each state at each stage; the last row is terminal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    q: Vec<Vec<f64>>,
}

impl StageCosts {
    pub fn new(q: Vec<Vec<f64>>) -> Result<Self> {
        if q.len() < 2 {
            return invalid(format!("need at least 2 stages, got {}", q.len()));
        }
        let s = q[0].len();
        if s == 0 || q.iter().any(|r| r.len() != s) {
            return invalid("stage costs must be a rectangular L x S table");
        }
        if q.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("stage costs must be finite");
        }
        Ok(StageCosts { q })
    }

    /// Stage count `L`.
    pub fn stage_count(&self) -> usize {
        self.q.len()
    }

    pub fn states(&self) -> usize {
        self.q[0].len()
    }

    pub fn stage(&self, stage: usize) -> &[f64] {
        &self.q[stage]
    }

    pub fn terminal(&self) -> &[f64] {
        self.q.last().expect("at least two stages")
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.q
    }
}

/// State index of every unit (zero-based).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointState(Vec<usize>);

impl JointState {
    pub fn new(states: Vec<usize>, state_count: usize) -> Result<Self> {
        if let Some(&s) = states.iter().find(|&&s| s >= state_count) {
            return invalid(format!("state index {s} out of range for {state_count} states"));
        }
        Ok(JointState(states))
    }

    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Units currently in `state`.
    pub fn members(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(move |(_, &s)| s == state).map(|(n, _)| n)
    }
}

/// Ensemble averages of discomfort weights and weighted log-defaults for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusAggregates {
    /// `(1/N) sum_n gamma_n[i]`
    pub gamma_bar: Vec<f64>,
    /// `(1/N) sum_n gamma_n[i] ln pbar_n[i][j]`
    pub mu_bar: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "id")]
pub enum ValueOwner {
    Consensus,
    Unit(u64),
}

/// `v[stage][state]` for stages `0..L`; the last row equals the terminal cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub v: Vec<Vec<f64>>,
    pub owner: ValueOwner,
}

impl ValueTable {
    pub fn stage(&self, stage: usize) -> &[f64] {
        &self.v[stage]
    }

    pub fn stage_count(&self) -> usize {
        self.v.len()
    }
}

/// One policy matrix per non-terminal stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyStack {
    pub stages: Vec<StochasticMatrix>,
}

impl PolicyStack {
    pub fn new(stages: Vec<StochasticMatrix>) -> Result<Self> {
        if stages.is_empty() {
            return invalid("policy stack needs at least one stage");
        }
        let s = stages[0].size();
        if stages.iter().any(|m| m.size() != s) {
            return invalid("policy stack stages must share the state count");
        }
        Ok(PolicyStack { stages })
    }

    pub fn stage(&self, stage: usize) -> &StochasticMatrix {
        &self.stages[stage]
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn states(&self) -> usize {
        self.stages[0].size()
    }

    /// Largest entry-wise difference across all stages.
    pub fn max_abs_diff(&self, other: &PolicyStack) -> f64 {
        self.stages
            .iter()
            .zip(&other.stages)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, tol: Tolerance) -> bool {
        self.stages.iter().all(|m| m.validate(tol, None).passed)
    }
}

/// Closed-form row optimum: `p ∝ exp((mu - cost) / gamma)`, value `-gamma lse((mu - cost) / gamma)`.
fn kl_row_optimum(gamma: f64, mu: &[f64], cost: &[f64]) -> (Vec<f64>, f64) {
    let exponents: Vec<f64> = mu.iter().zip(cost).map(|(m, c)| (m - c) / gamma).collect();
    (softmax(&exponents), -gamma * lse(&exponents))
}

fn check_units(units: &[UnitProfile]) -> Result<(usize, usize)> {
    let Some(first) = units.first() else {
        return invalid("unit list is empty");
    };
    let (s, stages) = (first.states(), first.stages());
    if let Some(u) = units.iter().find(|u| u.states() != s || u.stages() != stages) {
        return invalid(format!(
            "unit {} has {} states / {} stages, expected {s} / {stages}",
            u.id,
            u.states(),
            u.stages()
        ));
    }
    Ok((s, stages))
}

fn check_len(what: &str, v: &[f64], s: usize) -> Result<()> {
    if v.len() != s {
        return invalid(format!("{what} has length {}, expected {s}", v.len()));
    }
    Ok(())
}

/// Cost of one unit using `policy_row` from `state`:
/// `sum_j p_j next_j + gamma KL(p || pbar)`.
pub fn unit_stage_cost(
    unit: &UnitProfile,
    stage: usize,
    state: usize,
    policy_row: &[f64],
    next_costs: &[f64],
) -> Result<f64> {
    if stage >= unit.stages() || state >= unit.states() {
        return invalid(format!("stage {stage} / state {state} out of range"));
    }
    check_len("policy row", policy_row, unit.states())?;
    check_len("next costs", next_costs, unit.states())?;
    let expected: f64 = policy_row.iter().zip(next_costs).map(|(p, c)| p * c).sum();
    let kl = kl_divergence(policy_row, unit.default_row(stage, state))?;
    Ok(expected + unit.gamma(stage, state) * kl)
}

/// Averages over the whole ensemble at `stage`.
pub fn prior_aggregates(units: &[UnitProfile], stage: usize) -> Result<ConsensusAggregates> {
    let (s, stages) = check_units(units)?;
    if stage >= stages {
        return invalid(format!("stage {stage} out of range ({stages} stages)"));
    }
    let n = units.len() as f64;
    let mut gamma_bar = vec![0.0; s];
    let mut mu_bar = vec![vec![0.0; s]; s];
    for u in units {
        for i in 0..s {
            let g = u.gamma(stage, i);
            gamma_bar[i] += g / n;
            for (m, p) in mu_bar[i].iter_mut().zip(u.default_row(stage, i)) {
                *m += g * p.ln() / n;
            }
        }
    }
    Ok(ConsensusAggregates { gamma_bar, mu_bar })
}

/// Prior-consensus solution for one stage with next-state costs `q_next`.
///
/// Returns the policy and `value_coeffs` such that the optimal expected cost
/// at ensemble state `x` is `sum_i x_i value_coeffs_i`.
pub fn solve_myopic_prior(
    units: &[UnitProfile],
    stage: usize,
    q_next: &[f64],
) -> Result<(StochasticMatrix, Vec<f64>)> {
    let agg = prior_aggregates(units, stage)?;
    let s = agg.gamma_bar.len();
    check_len("q_next", q_next, s)?;
    let mut data = Vec::with_capacity(s * s);
    let mut coeffs = Vec::with_capacity(s);
    for i in 0..s {
        let (row, value) = kl_row_optimum(agg.gamma_bar[i], &agg.mu_bar[i], q_next);
        data.extend(row);
        coeffs.push(value);
    }
    Ok((StochasticMatrix::from_flat_unchecked(s, data), coeffs))
}

/// Joint-state (posterior) consensus: one row per occupied state.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSolution {
    /// `rows[i]` is `None` when no unit occupies state `i`.
    pub rows: Vec<Option<SimplexPoint>>,
    /// Minimum of the ensemble-average cost.
    pub optimal_cost: f64,
}

/// Units sharing a state agree on that state's row; groups are solved independently.
///
/// Group weights are averaged over the group (`1/N_i`); the optimal cost
/// reweights each group by `N_i / N`.
pub fn solve_myopic_posterior(
    units: &[UnitProfile],
    stage: usize,
    joint: &JointState,
    q_next: &[f64],
) -> Result<PosteriorSolution> {
    let (s, stages) = check_units(units)?;
    if joint.is_empty() {
        return invalid("joint state is empty");
    }
    if joint.len() != units.len() {
        return invalid(format!("joint state has {} units, ensemble has {}", joint.len(), units.len()));
    }
    if stage >= stages {
        return invalid(format!("stage {stage} out of range"));
    }
    check_len("q_next", q_next, s)?;
    let n_total = units.len() as f64;
    let mut rows = vec![None; s];
    let mut optimal_cost = 0.0;
    for (i, slot) in rows.iter_mut().enumerate() {
        let members: Vec<usize> = joint.members(i).collect();
        if members.is_empty() {
            continue;
        }
        let n_i = members.len() as f64;
        let mut gamma_hat = 0.0;
        let mut mu_hat = vec![0.0; s];
        for &n in &members {
            let g = units[n].gamma(stage, i);
            gamma_hat += g / n_i;
            for (m, p) in mu_hat.iter_mut().zip(units[n].default_row(stage, i)) {
                *m += g * p.ln() / n_i;
            }
        }
        let (row, value) = kl_row_optimum(gamma_hat, &mu_hat, q_next);
        optimal_cost += n_i / n_total * value;
        *slot = Some(SimplexPoint::from_vec_unchecked(row));
    }
    Ok(PosteriorSolution { rows, optimal_cost })
}

/// Trivial consensus: a single distribution shared by every unit regardless of state.
pub fn solve_trivial(
    units: &[UnitProfile],
    stage: usize,
    joint: &JointState,
    q_next: &[f64],
) -> Result<SimplexPoint> {
    let (s, stages) = check_units(units)?;
    if joint.is_empty() || joint.len() != units.len() {
        return invalid("joint state must list every unit");
    }
    if stage >= stages {
        return invalid(format!("stage {stage} out of range"));
    }
    check_len("q_next", q_next, s)?;
    let n = units.len() as f64;
    let mut gamma_tilde = 0.0;
    let mut mu_tilde = vec![0.0; s];
    for (u, &i) in units.iter().zip(joint.states()) {
        let g = u.gamma(stage, i);
        gamma_tilde += g / n;
        for (m, p) in mu_tilde.iter_mut().zip(u.default_row(stage, i)) {
            *m += g * p.ln() / n;
        }
    }
    let (row, _) = kl_row_optimum(gamma_tilde, &mu_tilde, q_next);
    Ok(SimplexPoint::from_vec_unchecked(row))
}

/// Multistage prior consensus by backward recursion over the ensemble aggregates.
///
/// Stage costs charge the current state; the continuation is the next-stage
/// value. The result never depends on the ensemble state.
pub fn backward_recursion_consensus(
    units: &[UnitProfile],
    costs: &StageCosts,
) -> Result<(PolicyStack, ValueTable)> {
    let (s, stages) = check_units(units)?;
    let l = costs.stage_count();
    if costs.states() != s || stages + 1 != l {
        return invalid(format!(
            "costs are {l} x {} but units have {stages} decision stages over {s} states",
            costs.states()
        ));
    }
    let mut v = vec![Vec::new(); l];
    v[l - 1] = costs.terminal().to_vec();
    let mut policies = vec![None; l - 1];
    for stage in (0..l - 1).rev() {
        let agg = prior_aggregates(units, stage)?;
        let mut data = Vec::with_capacity(s * s);
        let mut values = Vec::with_capacity(s);
        for i in 0..s {
            let (row, value) = kl_row_optimum(agg.gamma_bar[i], &agg.mu_bar[i], &v[stage + 1]);
            data.extend(row);
            values.push(costs.stage(stage)[i] + value);
        }
        v[stage] = values;
        policies[stage] = Some(StochasticMatrix::from_flat_unchecked(s, data));
    }
    let stack = PolicyStack { stages: policies.into_iter().map(|p| p.expect("filled")).collect() };
    Ok((stack, ValueTable { v, owner: ValueOwner::Consensus }))
}

/// A unit's own value table, computed without communication:
/// `v[i] = q[i] - gamma ln sum_j pbar[i][j] exp(-v_next[j] / gamma)`.
pub fn unit_value_table(unit: &UnitProfile, costs: &StageCosts) -> Result<ValueTable> {
    let (s, l) = (unit.states(), costs.stage_count());
    if costs.states() != s || unit.stages() + 1 != l {
        return invalid(format!("unit {} does not match the cost table shape", unit.id));
    }
    let mut v = vec![Vec::new(); l];
    v[l - 1] = costs.terminal().to_vec();
    let mut exponents = vec![0.0; s];
    for stage in (0..l - 1).rev() {
        let next = &v[stage + 1];
        let mut values = Vec::with_capacity(s);
        for i in 0..s {
            let g = unit.gamma(stage, i);
            for ((e, p), vn) in exponents.iter_mut().zip(unit.default_row(stage, i)).zip(next) {
                *e = p.ln() - vn / g;
            }
            values.push(costs.stage(stage)[i] - g * lse(&exponents));
        }
        v[stage] = values;
    }
    Ok(ValueTable { v, owner: ValueOwner::Unit(unit.id) })
}

/// Mean over the per-unit tables of the next-stage values.
pub fn mean_next_values(unit_tables: &[ValueTable], stage: usize) -> Result<Vec<f64>> {
    let Some(first) = unit_tables.first() else {
        return invalid("no unit tables");
    };
    let (l, s) = (first.stage_count(), first.v[0].len());
    if unit_tables.iter().any(|t| t.stage_count() != l || t.v.iter().any(|r| r.len() != s)) {
        return invalid("unit value tables have mismatched shapes");
    }
    if stage + 1 >= l {
        return invalid(format!("stage {stage} has no successor in a {l}-stage table"));
    }
    let n = unit_tables.len() as f64;
    let mut mean = vec![0.0; s];
    for t in unit_tables {
        for (m, v) in mean.iter_mut().zip(&t.v[stage + 1]) {
            *m += v / n;
        }
    }
    Ok(mean)
}

/// Stage optimum of the local-consensus problem, using the average of the
/// per-unit next-stage values as continuation cost.
pub fn local_stage_solve(
    unit_tables: &[ValueTable],
    units: &[UnitProfile],
    stage: usize,
) -> Result<StochasticMatrix> {
    if unit_tables.len() != units.len() {
        return invalid(format!("{} tables for {} units", unit_tables.len(), units.len()));
    }
    let agg = prior_aggregates(units, stage)?;
    let s = agg.gamma_bar.len();
    let v_bar = mean_next_values(unit_tables, stage)?;
    if v_bar.len() != s {
        return invalid("value tables do not match the unit state count");
    }
    let mut data = Vec::with_capacity(s * s);
    for i in 0..s {
        data.extend(kl_row_optimum(agg.gamma_bar[i], &agg.mu_bar[i], &v_bar).0);
    }
    Ok(StochasticMatrix::from_flat_unchecked(s, data))
}

/// The full local-consensus stack, solved stage by stage from the unit tables.
pub fn local_consensus_stack(units: &[UnitProfile], costs: &StageCosts) -> Result<PolicyStack> {
    let tables = units
        .iter()
        .map(|u| unit_value_table(u, costs))
        .collect::<Result<Vec<_>>>()?;
    let stages = (0..costs.stage_count() - 1)
        .map(|stage| local_stage_solve(&tables, units, stage))
        .collect::<Result<Vec<_>>>()?;
    PolicyStack::new(stages)
}

/// `sum_i x_i v[stage][i]`.
pub fn evaluate_value(table: &ValueTable, stage: usize, x: &EnsembleState) -> Result<f64> {
    let Some(row) = table.v.get(stage) else {
        return invalid(format!("stage {stage} out of range"));
    };
    check_len("ensemble state", x.as_slice(), row.len())?;
    Ok(x.as_slice().iter().zip(row).map(|(a, b)| a * b).sum())
}

/// Ensemble-average cost when unit `n` uses `rows[n]` from its state `joint[n]`.
pub fn realized_ensemble_cost(
    units: &[UnitProfile],
    stage: usize,
    rows: &[&[f64]],
    joint: &JointState,
    q_next: &[f64],
) -> Result<f64> {
    if rows.len() != units.len() || joint.len() != units.len() {
        return invalid("need exactly one row and one state per unit");
    }
    let mut total = 0.0;
    for ((u, row), &i) in units.iter().zip(rows).zip(joint.states()) {
        total += unit_stage_cost(u, stage, i, row, q_next)?;
    }
    Ok(total / units.len() as f64)
}
