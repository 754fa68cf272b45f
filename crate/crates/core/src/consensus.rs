//! Decentralized negotiation of the consensus policy.
//!
//! Each unit keeps its own copy of the policy (a full stack in global mode, a
//! single stage matrix in local mode). Every iteration a unit mixes its copy
//! with its neighbours' copies using the gossip weights, takes a gradient step
//! on its own stage objective and projects back onto the interior of the
//! simplex, row by row.
//!
//! Two gradient sources are used:
//!
//! * **local mode** charges unit `n` its own precomputed value table
//!   `v^(n)_{l+1}` after the transition, so each stage is an independent
//!   convex problem whose consensus optimum is [`local_stage_solve`];
//! * **global mode** charges unit `n` the cost-to-go of its own current stack
//!   (policy evaluation backwards from the terminal cost), so the stack fixed
//!   point is the backward-recursion policy.
//!
//! [`local_stage_solve`]: crate::solver::local_stage_solve

use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{project_interior_in_place, StochasticMatrix, DEFAULT_INTERIOR_EPS};
use crate::solver::{unit_value_table, PolicyStack, StageCosts, UnitProfile, ValueTable};

/// Default stopping threshold on the disagreement between units.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

/// Peer-exchange weights: `weights[m][n]` is the probability that unit `m`
/// shares with unit `n` when its clock rings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GossipNetwork {
    weights: Vec<Vec<f64>>,
    rate: f64,
    doubly_stochastic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Every weight `1/N`.
    Uniform,
    /// Metropolis weights over a complete graph with random symmetric link strengths.
    MetropolisComplete,
    Custom(Vec<Vec<f64>>),
}

impl GossipNetwork {
    /// Validates custom weights: entries in `(0, 1)` and rows summing to one.
    pub fn new(weights: Vec<Vec<f64>>, rate: f64) -> Result<Self> {
        let n = weights.len();
        if n < 2 {
            return invalid(format!("a gossip network needs at least 2 units, got {n}"));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return invalid(format!("gossip rate must be positive, got {rate}"));
        }
        for (m, row) in weights.iter().enumerate() {
            if row.len() != n {
                return invalid(format!("weight row {m} has length {}, expected {n}", row.len()));
            }
            if let Some(w) = row.iter().find(|&&w| !(w > 0.0 && w < 1.0)) {
                return invalid(format!("weight {w} in row {m} is outside (0, 1)"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return invalid(format!("weight row {m} sums to {sum}"));
            }
        }
        let doubly_stochastic = (0..n).all(|c| (weights.iter().map(|r| r[c]).sum::<f64>() - 1.0).abs() <= 1e-9);
        Ok(GossipNetwork { weights, rate, doubly_stochastic })
    }

    pub fn units(&self) -> usize {
        self.weights.len()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn weight(&self, sharer: usize, receiver: usize) -> f64 {
        self.weights[sharer][receiver]
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Columns also sum to one.
    pub fn is_doubly_stochastic(&self) -> bool {
        self.doubly_stochastic
    }

    /// Weights a receiver applies to every sharer in a synchronous round:
    /// column `n`, normalized so the mix is a convex combination.
    fn mixing_column(&self, receiver: usize) -> Vec<f64> {
        let col: Vec<f64> = self.weights.iter().map(|r| r[receiver]).collect();
        let total: f64 = col.iter().sum();
        col.into_iter().map(|w| w / total).collect()
    }
}

/// Builds a network over `n` units.
pub fn build_gossip_network(n: usize, topology: &Topology, rate: f64, seed: u64) -> Result<GossipNetwork> {
    if n < 2 {
        return invalid(format!("a gossip network needs at least 2 units, got {n}"));
    }
    match topology {
        Topology::Uniform => GossipNetwork::new(vec![vec![1.0 / n as f64; n]; n], rate),
        Topology::MetropolisComplete => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut strength = vec![vec![0.0; n]; n];
            for m in 0..n {
                for k in m + 1..n {
                    let a = rng.random_range(0.5..=1.0);
                    strength[m][k] = a;
                    strength[k][m] = a;
                }
            }
            let degree: Vec<f64> = strength.iter().map(|r| r.iter().sum()).collect();
            let mut weights = vec![vec![0.0; n]; n];
            for m in 0..n {
                for k in 0..n {
                    if m != k {
                        weights[m][k] = strength[m][k] / (1.0 + degree[m].max(degree[k]));
                    }
                }
                let off: f64 = weights[m].iter().sum();
                weights[m][m] = 1.0 - off;
            }
            GossipNetwork::new(weights, rate)
        }
        Topology::Custom(w) => {
            if w.len() != n {
                return invalid(format!("custom weights have {} rows for {n} units", w.len()));
            }
            GossipNetwork::new(w.clone(), rate)
        }
    }
}

/// One information exchange: `sharer` sends its policy to `receiver` at `time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GossipEvent {
    pub time: f64,
    pub sharer: usize,
    pub receiver: usize,
}

/// Endless stream of exchanges: the superposition of `N` unit clocks of rate
/// `r` is a Poisson process of rate `N r`; the sharer is uniform and the
/// receiver is drawn from the sharer's weight row.
pub struct GossipClock<'a> {
    network: &'a GossipNetwork,
    rng: ChaCha8Rng,
    inter_arrival: Exp<f64>,
    receivers: Vec<WeightedIndex<f64>>,
    now: f64,
}

impl<'a> GossipClock<'a> {
    pub fn new(network: &'a GossipNetwork, seed: u64) -> Self {
        let n = network.units();
        let inter_arrival = Exp::new(n as f64 * network.rate).expect("positive rate");
        let receivers = network
            .weights
            .iter()
            .map(|row| WeightedIndex::new(row).expect("validated weights"))
            .collect();
        GossipClock { network, rng: ChaCha8Rng::seed_from_u64(seed), inter_arrival, receivers, now: 0.0 }
    }
}

impl Iterator for GossipClock<'_> {
    type Item = GossipEvent;

    fn next(&mut self) -> Option<GossipEvent> {
        self.now += self.inter_arrival.sample(&mut self.rng);
        let sharer = self.rng.random_range(0..self.network.units());
        let receiver = self.receivers[sharer].sample(&mut self.rng);
        Some(GossipEvent { time: self.now, sharer, receiver })
    }
}

/// All exchanges in `[0, horizon)`, deterministic in `seed`.
pub fn poisson_schedule(network: &GossipNetwork, horizon: f64, seed: u64) -> Result<Vec<GossipEvent>> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return invalid(format!("horizon must be positive, got {horizon}"));
    }
    Ok(GossipClock::new(network, seed).take_while(|e| e.time < horizon).collect())
}

/// `alpha_k = a / (k + b)` for `k >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `1 / k`
    Harmonic,
    ScaledHarmonic { a: f64, b: f64 },
}

impl StepSchedule {
    pub fn scaled(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return invalid(format!("step schedule needs a > 0 and b >= 0, got a={a} b={b}"));
        }
        Ok(StepSchedule::ScaledHarmonic { a, b })
    }

    pub fn alpha(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        match *self {
            StepSchedule::Harmonic => 1.0 / k as f64,
            StepSchedule::ScaledHarmonic { a, b } => a / (k as f64 + b),
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Harmonic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Every unit mixes with all peers each round.
    #[serde(alias = "sync")]
    Synchronous,
    /// Poisson-clocked pairwise exchanges; only the receiver updates.
    #[serde(alias = "async")]
    Asynchronous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSettings {
    pub schedule: StepSchedule,
    pub mode: Mode,
    /// Stop once both the disagreement and the mean-stack stationarity fall to this value.
    pub threshold: f64,
    /// Rounds (synchronous) or exchanges (asynchronous).
    pub max_iterations: usize,
    pub interior_eps: f64,
}

impl Default for ConsensusSettings {
    fn default() -> Self {
        ConsensusSettings {
            schedule: StepSchedule::Harmonic,
            mode: Mode::Synchronous,
            threshold: DEFAULT_THRESHOLD,
            max_iterations: 100_000,
            interior_eps: DEFAULT_INTERIOR_EPS,
        }
    }
}

/// Outcome of one consensus run.
#[derive(Clone, Debug)]
pub struct ConsensusRunReport {
    pub iterations: usize,
    pub converged: bool,
    /// Final policy copy held by each unit.
    pub policies: Vec<PolicyStack>,
    /// `disagreement[k]` after iteration `k` (entry 0 is the initial state).
    pub disagreement: Vec<f64>,
    /// Same indexing as `disagreement`; present when a reference was supplied.
    pub error_to_reference: Option<Vec<f64>>,
    /// Step size used by iteration `k` (entry 0 is zero).
    pub alphas: Vec<f64>,
    /// Floats carried by one exchange.
    pub payload_floats: usize,
    /// Set when the weights are row-stochastic only.
    pub row_stochastic_only: bool,
    pub elapsed: Duration,
}

impl ConsensusRunReport {
    pub fn final_disagreement(&self) -> f64 {
        *self.disagreement.last().expect("trace has the initial entry")
    }

    pub fn final_error(&self) -> Option<f64> {
        self.error_to_reference.as_ref().and_then(|e| e.last().copied())
    }

    /// Writes `k,disagreement,error_to_reference,alpha`, one line per iteration.
    pub fn write_trace<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_trace_rows(out, 0, self)
    }
}

pub(crate) fn write_trace_rows<W: std::io::Write>(out: W, offset: usize, report: &ConsensusRunReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "disagreement", "error_to_reference", "alpha"])?;
    append_trace(&mut w, offset, report)?;
    w.flush()?;
    Ok(())
}

fn append_trace<W: std::io::Write>(w: &mut csv::Writer<W>, offset: usize, report: &ConsensusRunReport) -> Result<()> {
    for (k, d) in report.disagreement.iter().enumerate() {
        let err = report
            .error_to_reference
            .as_ref()
            .map(|e| format!("{}", e[k]))
            .unwrap_or_default();
        w.write_record([
            (offset + k).to_string(),
            d.to_string(),
            err,
            report.alphas[k].to_string(),
        ])?;
    }
    Ok(())
}

/// Analytic gradient of `sum_i [sum_j Q_ij next_j + gamma_i KL(Q_i || pbar_i)]`:
/// entry `(i, j)` is `gamma_i (ln(Q_ij / pbar_ij) + 1) + next_j`, row-major.
pub fn unit_gradient(unit: &UnitProfile, q: &StochasticMatrix, next_values: &[f64], stage: usize) -> Result<Vec<f64>> {
    let s = unit.states();
    if q.size() != s || next_values.len() != s {
        return invalid("gradient inputs do not match the unit's state count");
    }
    if stage >= unit.stages() {
        return invalid(format!("stage {stage} out of range"));
    }
    if let Some(v) = q.as_slice().iter().find(|&&v| v <= 0.0) {
        return invalid(format!("policy entry {v} is on the boundary; use the interior projection"));
    }
    let mut grad = Vec::with_capacity(s * s);
    for i in 0..s {
        let g = unit.gamma(stage, i);
        for ((qij, pij), vj) in q.row(i).iter().zip(unit.default_row(stage, i)).zip(next_values) {
            grad.push(g * ((qij / pij).ln() + 1.0) + vj);
        }
    }
    Ok(grad)
}

/// Max over units of the Frobenius distance between a unit's stack and the
/// across-unit mean stack.
pub fn disagreement_metric(policies: &[PolicyStack]) -> Result<f64> {
    let Some(first) = policies.first() else {
        return invalid("no policies");
    };
    check_shapes(policies, first)?;
    let mean = mean_stack(policies);
    Ok(policies
        .iter()
        .map(|p| squared_distance(p, &mean).sqrt())
        .fold(0.0, f64::max))
}

/// Max over units of `||vec(P_n - P*)||_2`.
pub fn error_to_reference(policies: &[PolicyStack], reference: &PolicyStack) -> Result<f64> {
    if policies.is_empty() {
        return invalid("no policies");
    }
    check_shapes(policies, reference)?;
    Ok(policies
        .iter()
        .map(|p| {
            p.stages
                .iter()
                .zip(&reference.stages)
                .map(|(a, b)| a.frobenius_distance(b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max))
}

fn check_shapes(policies: &[PolicyStack], like: &PolicyStack) -> Result<()> {
    if policies.iter().any(|p| p.len() != like.len() || p.states() != like.states()) {
        return invalid("policy stacks have mismatched shapes");
    }
    Ok(())
}

fn mean_stack(policies: &[PolicyStack]) -> Vec<Vec<f64>> {
    let n = policies.len() as f64;
    let mut mean: Vec<Vec<f64>> = policies[0].stages.iter().map(|m| vec![0.0; m.as_slice().len()]).collect();
    for p in policies {
        for (acc, m) in mean.iter_mut().zip(&p.stages) {
            for (a, v) in acc.iter_mut().zip(m.as_slice()) {
                *a += v / n;
            }
        }
    }
    mean
}

fn squared_distance(p: &PolicyStack, flat: &[Vec<f64>]) -> f64 {
    p.stages
        .iter()
        .zip(flat)
        .map(|(m, f)| m.as_slice().iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// Where the continuation cost in a unit's gradient comes from.
enum Continuation<'a> {
    /// Policy evaluation of the unit's own mixed stack, backwards from the terminal cost.
    OwnStack(&'a StageCosts),
    /// Fixed per-unit next-stage values (local mode, one stage).
    Fixed(Vec<Vec<f64>>),
}

/// Per-unit constants of the update. Stacks are flat row-major buffers of
/// `matrices * S * S` entries.
struct Engine<'a> {
    s: usize,
    matrices: usize,
    ln_default: Vec<Vec<f64>>,
    /// `gamma[n][k * S + i]`
    gamma: Vec<Vec<f64>>,
    continuation: Continuation<'a>,
    eps: f64,
}

impl<'a> Engine<'a> {
    fn new(units: &[UnitProfile], stages: &[usize], continuation: Continuation<'a>, eps: f64) -> Self {
        let ln_default = units
            .iter()
            .map(|u| stages.iter().flat_map(|&l| u.default_matrix(l).as_slice().iter().map(|p| p.ln())).collect())
            .collect();
        let gamma = units
            .iter()
            .map(|u| stages.iter().flat_map(|&l| u.gamma_table()[l].iter().copied()).collect())
            .collect();
        Engine { s: units[0].states(), matrices: stages.len(), ln_default, gamma, continuation, eps }
    }

    fn len(&self) -> usize {
        self.matrices * self.s * self.s
    }

    /// Projected gradient step of unit `n` from its mixed stack `q` into `out`.
    fn step(&self, n: usize, q: &[f64], ln_q: &[f64], alpha: f64, out: &mut [f64]) {
        let s = self.s;
        let ln_p = &self.ln_default[n];
        let gamma = &self.gamma[n];
        let mut scratch = Vec::with_capacity(s);
        let mut row = |k: usize, i: usize, next: &[f64]| -> (f64, f64) {
            let range = (k * s + i) * s..(k * s + i + 1) * s;
            let g = gamma[k * s + i];
            let (mut kl, mut cont) = (0.0, 0.0);
            let target = &mut out[range.clone()];
            let entries = q[range.clone()].iter().zip(&ln_q[range.clone()]).zip(&ln_p[range.clone()]).zip(next);
            for (o, (((&x, &lq), &lp), &v)) in target.iter_mut().zip(entries) {
                let log_ratio = lq - lp;
                kl += x * log_ratio;
                cont += x * v;
                *o = x - alpha * (g * (log_ratio + 1.0) + v);
            }
            project_interior_in_place(target, self.eps, &mut scratch);
            (g * kl, cont)
        };
        match &self.continuation {
            Continuation::Fixed(values) => {
                for i in 0..s {
                    row(0, i, &values[n]);
                }
            }
            Continuation::OwnStack(costs) => {
                let mut next = costs.terminal().to_vec();
                let mut value = vec![0.0; s];
                for k in (0..self.matrices).rev() {
                    for (i, v) in value.iter_mut().enumerate() {
                        let (discomfort, cont) = row(k, i, &next);
                        *v = costs.stage(k)[i] + discomfort + cont;
                    }
                    std::mem::swap(&mut next, &mut value);
                }
            }
        }
    }
}

/// `out = sum_m w_m stacks[m]` over flat stacks of length `d`.
fn mix_into(stacks: &[f64], d: usize, weights: &[(usize, f64)], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for &(m, w) in weights {
        for (o, v) in out.iter_mut().zip(&stacks[m * d..(m + 1) * d]) {
            *o += w * v;
        }
    }
}

fn ln_into(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = v.ln();
    }
}

fn flat_mean(stacks: &[f64], n: usize, d: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for unit in stacks.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(unit) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|x| *x /= n as f64);
}

/// Largest distance of any unit stack to `mean`, and to `reference` when given, in one pass.
fn spread_and_error(stacks: &[f64], d: usize, mean: &[f64], reference: Option<&[f64]>) -> (f64, Option<f64>) {
    let (spread, error) = stacks
        .par_chunks_exact(d)
        .map(|u| {
            let (mut to_mean, mut to_ref) = (0.0, 0.0);
            match reference {
                Some(r) => {
                    for ((x, m), q) in u.iter().zip(mean).zip(r) {
                        to_mean += (x - m) * (x - m);
                        to_ref += (x - q) * (x - q);
                    }
                }
                None => to_mean = u.iter().zip(mean).map(|(x, m)| (x - m) * (x - m)).sum(),
            }
            (to_mean, to_ref)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    (spread.sqrt(), reference.map(|_| error.sqrt()))
}

fn run(
    units: &[UnitProfile],
    stages: &[usize],
    continuation: Continuation<'_>,
    network: &GossipNetwork,
    settings: &ConsensusSettings,
    reference: Option<&PolicyStack>,
    seed: u64,
) -> Result<ConsensusRunReport> {
    let start = Instant::now();
    let n = units.len();
    if network.units() != n {
        return invalid(format!("network has {} units, ensemble has {n}", network.units()));
    }
    if !(settings.threshold >= 0.0) || settings.max_iterations == 0 {
        return invalid("threshold must be non-negative and the iteration cap positive");
    }
    let s = units[0].states();
    if !(settings.interior_eps > 0.0 && settings.interior_eps < 1.0 / s as f64) {
        return invalid(format!("interior eps {} out of range", settings.interior_eps));
    }
    if let Some(r) = reference {
        if r.len() != stages.len() || r.states() != s {
            return invalid("reference stack does not match the negotiated stages");
        }
    }
    let reference: Option<Vec<f64>> = reference.map(|r| r.stages.iter().flat_map(|m| m.as_slice().iter().copied()).collect());

    let engine = Engine::new(units, stages, continuation, settings.interior_eps);
    let d = engine.len();
    let mut current: Vec<f64> = units
        .iter()
        .flat_map(|u| stages.iter().flat_map(|&l| u.default_matrix(l).as_slice().iter().copied()))
        .collect();
    let mut updated = vec![0.0; n * d];
    let columns: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|r| network.mixing_column(r).into_iter().enumerate().collect())
        .collect();
    // with identical columns every unit mixes to the same stack
    let shared_mix = columns.iter().all(|c| c == &columns[0]);
    // and with equal weights that stack is the running mean
    let mean_mix = shared_mix && columns[0].iter().all(|&(_, w)| w == columns[0][0].1);
    let mut clock = (settings.mode == Mode::Asynchronous).then(|| GossipClock::new(network, seed));

    let mut mean = vec![0.0; d];
    let mut mixed = vec![0.0; d];
    let mut ln_mixed = vec![0.0; d];
    // async events touch one unit, so the mean's movement is measured over N events
    let window = if clock.is_some() { n } else { 1 };
    let mut window_start = vec![0.0; d];
    let mut movement = f64::INFINITY;
    let mut stepped = vec![false; n];
    flat_mean(&current, n, d, &mut mean);
    window_start.copy_from_slice(&mean);
    let (spread, error) = spread_and_error(&current, d, &mean, reference.as_deref());
    let mut disagreement = vec![spread];
    let mut errors = error.map(|e| vec![e]);
    let mut alphas = vec![0.0];
    let zeros = || vec![0.0; d];
    let add = |mut a: Vec<f64>, b: Vec<f64>| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    };

    let mut converged = false;
    let mut k = 0;
    while k < settings.max_iterations {
        k += 1;
        let alpha = settings.schedule.alpha(k);
        match clock.as_mut() {
            None => {
                if shared_mix {
                    if mean_mix {
                        mixed.copy_from_slice(&mean);
                    } else {
                        mix_into(&current, d, &columns[0], &mut mixed);
                    }
                    ln_into(&mixed, &mut ln_mixed);
                }
                let snapshot = &current;
                let (mixed, ln_mixed) = (&mixed, &ln_mixed);
                let sum = updated
                    .par_chunks_mut(d)
                    .enumerate()
                    .fold(zeros, |mut acc, (r, out)| {
                        if shared_mix {
                            engine.step(r, mixed, ln_mixed, alpha, out);
                        } else {
                            let (mut own, mut ln_own) = (vec![0.0; d], vec![0.0; d]);
                            mix_into(snapshot, d, &columns[r], &mut own);
                            ln_into(&own, &mut ln_own);
                            engine.step(r, &own, &ln_own, alpha, out);
                        }
                        acc.iter_mut().zip(out.iter()).for_each(|(a, v)| *a += v);
                        acc
                    })
                    .reduce(zeros, add);
                std::mem::swap(&mut current, &mut updated);
                mean.iter_mut().zip(&sum).for_each(|(m, x)| *m = x / n as f64);
                stepped.iter_mut().for_each(|x| *x = true);
            }
            Some(clock) => {
                let event = clock.next().expect("endless clock");
                let r = event.receiver;
                let w = network.weight(event.sharer, r);
                let pairs = if event.sharer == r { vec![(r, 1.0)] } else { vec![(r, 1.0 - w), (event.sharer, w)] };
                let unit = r * d..(r + 1) * d;
                mix_into(&current, d, &pairs, &mut mixed);
                ln_into(&mixed, &mut ln_mixed);
                updated[..d].copy_from_slice(&current[unit.clone()]);
                engine.step(r, &mixed, &ln_mixed, alpha, &mut current[unit.clone()]);
                for ((m, new), old) in mean.iter_mut().zip(&current[unit]).zip(&updated[..d]) {
                    *m += (new - old) / n as f64;
                }
                stepped[r] = true;
            }
        }
        let (spread, error) = spread_and_error(&current, d, &mean, reference.as_deref());
        disagreement.push(spread);
        alphas.push(alpha);
        if let (Some(e), Some(v)) = (errors.as_mut(), error) {
            e.push(v);
        }
        if k % window == 0 {
            movement = window_start.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            window_start.copy_from_slice(&mean);
        }
        // agreement alone is not enough: identical units agree from the start
        if spread <= settings.threshold && movement <= settings.threshold && stepped.iter().all(|&x| x) {
            converged = true;
            break;
        }
    }

    let ss = s * s;
    let policies = current
        .chunks_exact(d)
        .map(|u| PolicyStack::new(u.chunks_exact(ss).map(|m| StochasticMatrix::from_flat_unchecked(s, m.to_vec())).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusRunReport {
        iterations: k,
        converged,
        policies,
        disagreement,
        error_to_reference: errors,
        alphas,
        payload_floats: d,
        row_stochastic_only: !network.is_doubly_stochastic(),
        elapsed: start.elapsed(),
    })
}

/// Global consensus: every unit negotiates the whole stack at once, starting
/// from its own default matrices.
pub fn run_global_consensus(
    units: &[UnitProfile],
    costs: &StageCosts,
    network: &GossipNetwork,
    settings: &ConsensusSettings,
    reference: Option<&PolicyStack>,
    seed: u64,
) -> Result<ConsensusRunReport> {
    check_ensemble(units, costs)?;
    let stages: Vec<usize> = (0..costs.stage_count() - 1).collect();
    run(units, &stages, Continuation::OwnStack(costs), network, settings, reference, seed)
}

/// Local consensus for one stage, each unit charged its own next-stage values.
pub fn run_local_consensus(
    units: &[UnitProfile],
    stage: usize,
    next_value_tables: &[ValueTable],
    network: &GossipNetwork,
    settings: &ConsensusSettings,
    reference: Option<&StochasticMatrix>,
    seed: u64,
) -> Result<ConsensusRunReport> {
    if units.is_empty() || next_value_tables.len() != units.len() {
        return invalid("need one value table per unit");
    }
    if stage >= units[0].stages() || next_value_tables.iter().any(|t| t.stage_count() != units[0].stages() + 1) {
        return invalid(format!("stage {stage} inconsistent with the unit value tables"));
    }
    let values = next_value_tables.iter().map(|t| t.stage(stage + 1).to_vec()).collect();
    let reference = reference.map(|m| PolicyStack { stages: vec![m.clone()] });
    run(
        units,
        &[stage],
        Continuation::Fixed(values),
        network,
        settings,
        reference.as_ref(),
        seed,
    )
}

/// Result of negotiating every stage with local consensus.
#[derive(Clone, Debug)]
pub struct LocalPipelineReport {
    /// Indexed by stage.
    pub stages: Vec<ConsensusRunReport>,
    /// Per-unit stacks assembled from the stage results.
    pub policies: Vec<PolicyStack>,
}

impl LocalPipelineReport {
    pub fn converged(&self) -> bool {
        self.stages.iter().all(|r| r.converged)
    }

    pub fn iterations(&self) -> usize {
        self.stages.iter().map(|r| r.iterations).sum()
    }

    /// Concatenated trace in negotiation order (last stage first), `k` running on.
    pub fn write_trace<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "disagreement", "error_to_reference", "alpha"])?;
        let mut offset = 0;
        for report in self.stages.iter().rev() {
            append_trace(&mut w, offset, report)?;
            offset += report.disagreement.len();
        }
        w.flush()?;
        Ok(())
    }
}

/// Every unit precomputes its own value table, then the stages are negotiated
/// one after another from the last decision stage backwards. Stage `l` uses the
/// seed `seed + l`.
pub fn run_local_pipeline(
    units: &[UnitProfile],
    costs: &StageCosts,
    network: &GossipNetwork,
    settings: &ConsensusSettings,
    reference: Option<&PolicyStack>,
    seed: u64,
) -> Result<LocalPipelineReport> {
    check_ensemble(units, costs)?;
    let tables = units
        .iter()
        .map(|u| unit_value_table(u, costs))
        .collect::<Result<Vec<_>>>()?;
    let l = costs.stage_count();
    let mut reports: Vec<Option<ConsensusRunReport>> = vec![None; l - 1];
    for stage in (0..l - 1).rev() {
        let r = reference.map(|p| p.stage(stage));
        reports[stage] = Some(run_local_consensus(
            units,
            stage,
            &tables,
            network,
            settings,
            r,
            seed.wrapping_add(stage as u64),
        )?);
    }
    let stages: Vec<ConsensusRunReport> = reports.into_iter().map(|r| r.expect("filled")).collect();
    let policies = (0..units.len())
        .map(|n| PolicyStack::new(stages.iter().map(|r| r.policies[n].stage(0).clone()).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalPipelineReport { stages, policies })
}

fn check_ensemble(units: &[UnitProfile], costs: &StageCosts) -> Result<()> {
    if units.is_empty() {
        return invalid("ensemble is empty");
    }
    if units.iter().any(|u| u.states() != costs.states() || u.stages() + 1 != costs.stage_count()) {
        return invalid(format!(
            "units must have {} states and {} decision stages",
            costs.states(),
            costs.stage_count() - 1
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::backward_recursion_consensus;
    use approx::assert_abs_diff_eq;

    fn toy_unit(id: u64, rows: [[f64; 2]; 2], gamma: [f64; 2], stages: usize) -> UnitProfile {
        let m = StochasticMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap();
        UnitProfile::stage_invariant(id, m, gamma.to_vec(), stages).unwrap()
    }

    #[test]
    fn uniform_network() {
        let net = build_gossip_network(4, &Topology::Uniform, 1.0, 0).unwrap();
        assert!(net.weights().iter().flatten().all(|&w| w == 0.25));
        assert!(net.is_doubly_stochastic());
    }

    #[test]
    fn metropolis_network_is_symmetric_doubly_stochastic() {
        let net = build_gossip_network(3, &Topology::MetropolisComplete, 1.0, 7).unwrap();
        for m in 0..3 {
            assert_abs_diff_eq!(net.weights()[m].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(net.weights().iter().map(|r| r[m]).sum::<f64>(), 1.0, epsilon = 1e-12);
            for k in 0..3 {
                assert_eq!(net.weight(m, k), net.weight(k, m));
                assert!(net.weight(m, k) > 0.0 && net.weight(m, k) < 1.0);
            }
        }
        assert!(net.is_doubly_stochastic());
    }

    #[test]
    fn custom_network_validation() {
        let zero = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        assert!(build_gossip_network(2, &Topology::Custom(zero), 1.0, 0).is_err());
        let bad_sum = vec![vec![0.6, 0.6], vec![0.5, 0.5]];
        assert!(build_gossip_network(2, &Topology::Custom(bad_sum), 1.0, 0).is_err());
        let row_only = vec![vec![0.3, 0.7], vec![0.4, 0.6]];
        let net = build_gossip_network(2, &Topology::Custom(row_only), 1.0, 0).unwrap();
        assert!(!net.is_doubly_stochastic());
        assert!(build_gossip_network(1, &Topology::Uniform, 1.0, 0).is_err());
        assert!(build_gossip_network(3, &Topology::Uniform, 0.0, 0).is_err());
    }

    #[test]
    fn schedule_is_deterministic_and_ordered() {
        let net = build_gossip_network(5, &Topology::Uniform, 1.0, 0).unwrap();
        let a = poisson_schedule(&net, 50.0, 3).unwrap();
        let b = poisson_schedule(&net, 50.0, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].time < w[1].time));
        assert!(a.iter().all(|e| e.time < 50.0 && e.sharer < 5 && e.receiver < 5));
        assert!(poisson_schedule(&net, 0.0, 3).is_err());
    }

    #[test]
    fn step_schedules() {
        assert_eq!(StepSchedule::Harmonic.alpha(4), 0.25);
        let s = StepSchedule::scaled(2.0, 3.0).unwrap();
        assert_eq!(s.alpha(1), 0.5);
        assert!(StepSchedule::scaled(0.0, 1.0).is_err());
        assert!(StepSchedule::scaled(1.0, -1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let u = toy_unit(0, [[0.5, 0.5], [0.5, 0.5]], [1.0, 1.0], 1);
        let q = StochasticMatrix::uniform(2);
        let g = unit_gradient(&u, &q, &[0.0, 0.0], 0).unwrap();
        assert!(g.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let g = unit_gradient(&u, &q, &[0.0, 1.0], 0).unwrap();
        assert_eq!(g, vec![1.0, 2.0, 1.0, 2.0]);
        let boundary = StochasticMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(unit_gradient(&u, &boundary, &[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn disagreement_examples() {
        let a = PolicyStack::new(vec![StochasticMatrix::uniform(2)]).unwrap();
        assert_eq!(disagreement_metric(&[a.clone(), a.clone()]).unwrap(), 0.0);

        let delta = 0.1;
        let b = PolicyStack::new(vec![
            StochasticMatrix::from_rows(vec![vec![0.5 + delta, 0.5 - delta], vec![0.5, 0.5]]).unwrap(),
        ])
        .unwrap();
        // two entries differ by delta; each sits delta/2 from the mean
        let expected = ((delta / 2.0).powi(2) * 2.0).sqrt();
        let d = disagreement_metric(&[a.clone(), b.clone()]).unwrap();
        assert_abs_diff_eq!(d, expected, epsilon = 1e-15);
        assert_eq!(d, disagreement_metric(&[b, a]).unwrap());
        assert!(disagreement_metric(&[]).is_err());
    }

    #[test]
    fn error_to_reference_examples() {
        let reference = PolicyStack::new(vec![StochasticMatrix::uniform(2)]).unwrap();
        assert_eq!(error_to_reference(&[reference.clone()], &reference).unwrap(), 0.0);
        // a single coordinate off by 0.01 (the norm does not need a stochastic stack)
        let off = PolicyStack { stages: vec![StochasticMatrix::from_flat_unchecked(2, vec![0.51, 0.5, 0.5, 0.5])] };
        let e = error_to_reference(&[reference.clone(), off], &reference).unwrap();
        assert_abs_diff_eq!(e, 0.01, epsilon = 1e-15);
        let two = PolicyStack::new(vec![StochasticMatrix::uniform(2); 2]).unwrap();
        assert!(error_to_reference(&[two], &reference).is_err());
    }

    #[test]
    fn identical_units_never_disagree_and_reach_the_recursion() {
        let u = toy_unit(0, [[0.8, 0.2], [0.3, 0.7]], [1.0, 2.0], 2);
        let units = vec![u.clone(), u.clone(), u];
        let costs = StageCosts::new(vec![vec![0.0, 1.0], vec![0.5, 0.0], vec![0.0, 2.0]]).unwrap();
        let (reference, _) = backward_recursion_consensus(&units, &costs).unwrap();
        let net = build_gossip_network(3, &Topology::Uniform, 1.0, 0).unwrap();
        let settings = ConsensusSettings { threshold: 1e-6, ..Default::default() };
        let report = run_global_consensus(&units, &costs, &net, &settings, Some(&reference), 1).unwrap();
        assert!(report.converged);
        assert!(report.disagreement.iter().all(|&d| d < 1e-12));
        assert!(report.final_error().unwrap() < 1e-4);
    }

    #[test]
    fn zero_threshold_is_flagged_non_converged() {
        let units = vec![
            toy_unit(0, [[0.8, 0.2], [0.3, 0.7]], [1.0, 2.0], 2),
            toy_unit(1, [[0.6, 0.4], [0.5, 0.5]], [2.0, 1.0], 2),
        ];
        let costs = StageCosts::new(vec![vec![0.0, 1.0], vec![0.5, 0.0], vec![0.0, 2.0]]).unwrap();
        let net = build_gossip_network(2, &Topology::Uniform, 1.0, 0).unwrap();
        let settings = ConsensusSettings { threshold: 0.0, max_iterations: 50, ..Default::default() };
        let report = run_global_consensus(&units, &costs, &net, &settings, None, 1).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 50);
        assert_eq!(report.disagreement.len(), 51);
    }

    #[test]
    fn local_payload_is_one_stage() {
        let units = vec![
            toy_unit(0, [[0.8, 0.2], [0.3, 0.7]], [1.0, 2.0], 3),
            toy_unit(1, [[0.6, 0.4], [0.5, 0.5]], [2.0, 1.0], 3),
        ];
        let costs = StageCosts::new(vec![vec![0.0, 1.0]; 4]).unwrap();
        let net = build_gossip_network(2, &Topology::Uniform, 1.0, 0).unwrap();
        let settings = ConsensusSettings { max_iterations: 20, ..Default::default() };
        let global = run_global_consensus(&units, &costs, &net, &settings, None, 1).unwrap();
        let local = run_local_pipeline(&units, &costs, &net, &settings, None, 1).unwrap();
        assert_eq!(global.payload_floats, 3 * local.stages[0].payload_floats);
        assert_eq!(local.stages[0].payload_floats, 4);
    }
}
