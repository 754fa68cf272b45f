use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dr_ensemble::consensus::{
    build_gossip_network, error_to_reference, run_global_consensus, run_local_pipeline, ConsensusRunReport,
};
use dr_ensemble::ingest::{
    build_markov_model, build_stage_costs, generate_ensemble, read_json, read_power_csv, write_json, EnsembleFile,
    MarkovModel, PowerSeries,
};
use dr_ensemble::math::SimplexPoint;
use dr_ensemble::simulator::{sample_joint_state, simulate_exact, write_trajectories, PolicyAssignment, Trajectory};
use dr_ensemble::solver::{backward_recursion_consensus, local_consensus_stack, PolicyStack, StageCosts, UnitProfile};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scheme};

/// Independent sub-seeds of the master seed, one per purpose.
pub mod purpose {
    pub const SYNTHETIC_SERIES: u64 = 1;
    pub const ENSEMBLE: u64 = 2;
    pub const NETWORK: u64 = 3;
    pub const GOSSIP: u64 = 4;
    /// Replica `r` uses `REPLICA + 2r` for its initial state and `REPLICA + 2r + 1` for transitions.
    pub const REPLICA: u64 = 1 << 32;
}

pub fn derive_seed(master: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(purpose);
    rng.next_u64()
}

/// A building-like load: a weekday afternoon bump over a base load with AR(1) noise,
/// sampled every 15 minutes.
pub fn synthetic_power_series(days: usize, seed: u64) -> Result<PowerSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shock = Normal::new(0.0, 6.0).expect("valid normal");
    let mut noise = 0.0;
    let readings = (0..days * 96)
        .map(|k| {
            let hour = (k % 96) as f64 / 4.0;
            let weekday = (k / 96) % 7 < 5;
            let occupied = (-((hour - 14.0) / 3.5).powi(2)).exp();
            let level = 120.0 + if weekday { 110.0 } else { 40.0 } * occupied;
            noise = 0.85 * noise + shock.sample(&mut rng);
            (level + noise).max(0.0)
        })
        .collect();
    Ok(PowerSeries::from_readings(readings)?)
}

/// The model named in the config, or one estimated from its power data.
pub fn load_model(config: &ExperimentConfig, master: u64) -> Result<MarkovModel> {
    let data = &config.data;
    let model = if let Some(path) = &data.model {
        read_json(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?
    } else {
        let series = match &data.power_csv {
            Some(path) => read_power_csv(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?,
            None => synthetic_power_series(data.synthetic_days, derive_seed(master, purpose::SYNTHETIC_SERIES))?,
        };
        build_markov_model(&series, config.states, data.binning, data.smoothing)?
    };
    if model.states != config.states {
        bail!("model has {} states but the config asks for {}", model.states, config.states);
    }
    Ok(model)
}

/// Condensed consensus report for the summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_disagreement: f64,
    /// Distance to the scheme's own closed form.
    pub final_error_to_reference: f64,
    pub payload_floats: usize,
    pub row_stochastic_only: bool,
}

impl ConsensusSummary {
    fn from_report(r: &ConsensusRunReport) -> Self {
        ConsensusSummary {
            iterations: r.iterations,
            converged: r.converged,
            final_disagreement: r.final_disagreement(),
            final_error_to_reference: r.final_error().unwrap_or(f64::NAN),
            payload_floats: r.payload_floats,
            row_stochastic_only: r.row_stochastic_only,
        }
    }
}

/// A scheme's policies, ready to simulate, plus what the negotiation left behind.
#[derive(Clone, Debug)]
pub struct SolvedScheme {
    pub scheme: Scheme,
    pub assignment: PolicyAssignment,
    pub consensus: Option<ConsensusSummary>,
    /// `k,disagreement,error_to_reference,alpha`
    pub trace_csv: Option<Vec<u8>>,
}

/// Solves one scheme. Decentralized schemes are checked against their closed forms.
pub fn solve_scheme(
    scheme: Scheme,
    units: &[UnitProfile],
    costs: &StageCosts,
    config: &ExperimentConfig,
    master: u64,
) -> Result<SolvedScheme> {
    let (centralized, values) = backward_recursion_consensus(units, costs)?;
    let settings = config.consensus.settings();
    let network = || {
        build_gossip_network(
            units.len(),
            &config.consensus.topology,
            config.consensus.rate,
            derive_seed(master, purpose::NETWORK),
        )
    };
    let gossip_seed = derive_seed(master, purpose::GOSSIP);
    Ok(match scheme {
        Scheme::Centralized => SolvedScheme {
            scheme,
            assignment: PolicyAssignment::Shared(centralized),
            consensus: None,
            trace_csv: None,
        },
        Scheme::Trivial => SolvedScheme {
            scheme,
            assignment: PolicyAssignment::TrivialClosedLoop { values },
            consensus: None,
            trace_csv: None,
        },
        Scheme::Global => {
            let report = run_global_consensus(units, costs, &network()?, &settings, Some(&centralized), gossip_seed)?;
            let mut trace = Vec::new();
            report.write_trace(&mut trace)?;
            SolvedScheme {
                scheme,
                consensus: Some(ConsensusSummary::from_report(&report)),
                assignment: PolicyAssignment::PerUnit(report.policies),
                trace_csv: Some(trace),
            }
        }
        Scheme::Local => {
            let reference = local_consensus_stack(units, costs)?;
            let pipeline = run_local_pipeline(units, costs, &network()?, &settings, Some(&reference), gossip_seed)?;
            let mut trace = Vec::new();
            pipeline.write_trace(&mut trace)?;
            let final_disagreement = pipeline.stages.iter().map(|r| r.final_disagreement()).fold(0.0, f64::max);
            let summary = ConsensusSummary {
                iterations: pipeline.iterations(),
                converged: pipeline.converged(),
                final_disagreement,
                final_error_to_reference: error_to_reference(&pipeline.policies, &reference)?,
                payload_floats: pipeline.stages[0].payload_floats,
                row_stochastic_only: pipeline.stages[0].row_stochastic_only,
            };
            SolvedScheme {
                scheme,
                consensus: Some(summary),
                assignment: PolicyAssignment::PerUnit(pipeline.policies),
                trace_csv: Some(trace),
            }
        }
    })
}

/// Simulates every scheme on `replicas` events. Replica `r` starts every scheme
/// from the same joint state and feeds it the same random numbers.
pub fn simulate_replicas(
    units: &[UnitProfile],
    assignments: &[(Scheme, &PolicyAssignment)],
    model: &MarkovModel,
    costs: &StageCosts,
    replicas: usize,
    master: u64,
) -> Result<Vec<Vec<Trajectory>>> {
    let occupancy = SimplexPoint::new(model.occupancy.clone())?;
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let base = purpose::REPLICA + 2 * r as u64;
            let initial = sample_joint_state(&occupancy, units.len(), derive_seed(master, base))?;
            let seed = derive_seed(master, base + 1);
            assignments
                .iter()
                .map(|(_, a)| Ok(simulate_exact(units, a, &initial, costs, &model.state_power_kw, seed)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// `max_l |a_l - b_l| / |b_l|`.
pub fn relative_linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    /// Realized cost of the event, averaged over replicas.
    pub mean_total_cost_usd: f64,
    /// Replica-averaged mean power per stage.
    pub mean_power_kw: Vec<f64>,
    /// Relative L-infinity distance of `mean_power_kw` to the centralized series.
    pub max_power_deviation_from_centralized: Option<f64>,
    /// Largest Frobenius distance of any unit's stack to the centralized stack.
    pub max_policy_deviation_from_centralized: Option<f64>,
    pub consensus: Option<ConsensusSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    #[serde(rename = "N")]
    pub units: usize,
    #[serde(rename = "S")]
    pub states: usize,
    #[serde(rename = "L")]
    pub stage_count: usize,
    pub replicas: usize,
    pub schemes: BTreeMap<Scheme, SchemeSummary>,
    /// Max entry gap between the global and local closed-form stacks.
    pub closed_form_global_local_gap: f64,
    /// Max over units of the Frobenius gap between the negotiated global and local stacks.
    pub negotiated_global_local_gap: Option<f64>,
    pub all_converged: bool,
    /// Trivial costs at least as much as centralized (when both ran).
    pub trivial_not_cheaper: Option<bool>,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.all_converged {
            0
        } else {
            2
        }
    }
}

/// All artifacts of one run, in memory.
pub struct Bundle {
    pub config: ExperimentConfig,
    pub model: MarkovModel,
    pub units: Vec<UnitProfile>,
    pub solved: Vec<SolvedScheme>,
    /// `trajectories[r][k]` is replica `r` of `solved[k]`.
    pub trajectories: Vec<Vec<Trajectory>>,
    pub summary: Summary,
}

/// Model, ensemble and stage costs of one experiment.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub model: MarkovModel,
    pub units: Vec<UnitProfile>,
    pub costs: StageCosts,
}

/// The config with its seed fixed, drawing one from the OS if absent.
pub fn resolve_seed(config: &ExperimentConfig) -> ExperimentConfig {
    let mut config = config.clone();
    config.seed.get_or_insert_with(rand::random);
    config
}

/// Generates the ensemble for `model` from the config.
pub fn generate_units(config: &ExperimentConfig, model: &MarkovModel, master: u64) -> Result<Vec<UnitProfile>> {
    let spec = config.ensemble_spec(derive_seed(master, purpose::ENSEMBLE));
    Ok(generate_ensemble(&model.default, &spec, config.stage_count - 1)?)
}

/// Checks that a stored ensemble fits the config and the model.
pub fn check_units(config: &ExperimentConfig, model: &MarkovModel, units: &[UnitProfile]) -> Result<()> {
    if units.len() != config.units {
        bail!("ensemble has {} units but the config asks for {}", units.len(), config.units);
    }
    if let Some(u) = units.iter().find(|u| u.states() != model.states || u.stages() + 1 != config.stage_count) {
        bail!("unit {} has S = {}, L = {}; expected S = {}, L = {}", u.id, u.states(), u.stages() + 1, model.states, config.stage_count);
    }
    Ok(())
}

pub fn prepare_inputs(config: &ExperimentConfig, master: u64) -> Result<Inputs> {
    let model = load_model(config, master)?;
    let units = generate_units(config, &model, master)?;
    inputs_from(config, model, units)
}

pub fn inputs_from(config: &ExperimentConfig, model: MarkovModel, units: Vec<UnitProfile>) -> Result<Inputs> {
    check_units(config, &model, &units)?;
    let costs = build_stage_costs(&model.state_power_kw, &config.tariff, config.stage_count)?;
    Ok(Inputs { model, units, costs })
}

/// Inputs stored in `dir` by earlier steps, building whatever is missing.
pub fn load_or_prepare_inputs(config: &ExperimentConfig, master: u64, dir: &Path) -> Result<Inputs> {
    let model_path = dir.join("model.json");
    let model: MarkovModel = if model_path.exists() {
        read_json(fs::File::open(&model_path)?).with_context(|| format!("reading {}", model_path.display()))?
    } else {
        load_model(config, master)?
    };
    let ensemble_path = dir.join("ensemble.json");
    let units = if ensemble_path.exists() {
        read_json::<EnsembleFile, _>(fs::File::open(&ensemble_path)?)
            .and_then(EnsembleFile::into_units)
            .with_context(|| format!("reading {}", ensemble_path.display()))?
    } else {
        generate_units(config, &model, master)?
    };
    inputs_from(config, model, units)
}

/// The configured schemes in canonical order, without repeats.
pub fn schemes_of(config: &ExperimentConfig) -> Vec<Scheme> {
    let mut schemes = config.schemes.clone();
    schemes.sort();
    schemes.dedup();
    schemes
}

/// Simulates the solved schemes and summarizes them.
pub fn compare(
    config: &ExperimentConfig,
    master: u64,
    inputs: &Inputs,
    solved: &[SolvedScheme],
) -> Result<(Vec<Vec<Trajectory>>, Summary)> {
    let assignments: Vec<(Scheme, &PolicyAssignment)> = solved.iter().map(|s| (s.scheme, &s.assignment)).collect();
    let trajectories =
        simulate_replicas(&inputs.units, &assignments, &inputs.model, &inputs.costs, config.replicas, master)?;
    let summary = summarize(config, master, &inputs.units, &inputs.costs, solved, &trajectories)?;
    Ok((trajectories, summary))
}

/// Ingests, generates, solves every scheme, simulates and summarizes.
pub fn run_experiment_in_memory(config: &ExperimentConfig) -> Result<Bundle> {
    config.validate()?;
    let config = resolve_seed(config);
    let master = config.seed.expect("resolved");
    let inputs = prepare_inputs(&config, master)?;
    let solved = schemes_of(&config)
        .into_iter()
        .map(|s| solve_scheme(s, &inputs.units, &inputs.costs, &config, master))
        .collect::<Result<Vec<_>>>()?;
    let (trajectories, summary) = compare(&config, master, &inputs, &solved)?;
    Ok(Bundle { config, model: inputs.model, units: inputs.units, solved, trajectories, summary })
}

fn stacks(assignment: &PolicyAssignment) -> Option<Vec<PolicyStack>> {
    match assignment {
        PolicyAssignment::Shared(p) => Some(vec![p.clone()]),
        PolicyAssignment::PerUnit(ps) => Some(ps.clone()),
        PolicyAssignment::TrivialClosedLoop { .. } => None,
    }
}

fn summarize(
    config: &ExperimentConfig,
    master: u64,
    units: &[UnitProfile],
    costs: &StageCosts,
    solved: &[SolvedScheme],
    trajectories: &[Vec<Trajectory>],
) -> Result<Summary> {
    let replicas = trajectories.len() as f64;
    let (centralized, _) = backward_recursion_consensus(units, costs)?;
    let local_closed = local_consensus_stack(units, costs)?;
    let l = config.stage_count;
    let averaged: Vec<(Vec<f64>, f64)> = (0..solved.len())
        .map(|k| {
            let mut power = vec![0.0; l];
            let mut cost = 0.0;
            for replica in trajectories {
                for (p, v) in power.iter_mut().zip(&replica[k].mean_power_kw) {
                    *p += v / replicas;
                }
                cost += replica[k].total_cost() / replicas;
            }
            (power, cost)
        })
        .collect();
    let position = |scheme: Scheme| solved.iter().position(|s| s.scheme == scheme);
    let centralized_power = position(Scheme::Centralized).map(|k| averaged[k].0.clone());

    let mut schemes = BTreeMap::new();
    for (k, s) in solved.iter().enumerate() {
        let policy_gap = stacks(&s.assignment).map(|p| error_to_reference(&p, &centralized)).transpose()?;
        schemes.insert(
            s.scheme,
            SchemeSummary {
                mean_total_cost_usd: averaged[k].1,
                mean_power_kw: averaged[k].0.clone(),
                max_power_deviation_from_centralized: centralized_power.as_ref().map(|c| relative_linf(&averaged[k].0, c)),
                max_policy_deviation_from_centralized: policy_gap,
                consensus: s.consensus.clone(),
            },
        );
    }
    let negotiated_global_local_gap = match (position(Scheme::Global), position(Scheme::Local)) {
        (Some(g), Some(lo)) => {
            let (g, lo) = (stacks(&solved[g].assignment).expect("global"), stacks(&solved[lo].assignment).expect("local"));
            let gap = g
                .iter()
                .zip(&lo)
                .map(|(a, b)| error_to_reference(std::slice::from_ref(a), b))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(gap.into_iter().fold(0.0, f64::max))
        }
        _ => None,
    };
    let trivial_not_cheaper = match (schemes.get(&Scheme::Trivial), schemes.get(&Scheme::Centralized)) {
        (Some(t), Some(c)) => Some(t.mean_total_cost_usd >= c.mean_total_cost_usd),
        _ => None,
    };
    Ok(Summary {
        seed: master,
        units: config.units,
        states: config.states,
        stage_count: l,
        replicas: trajectories.len(),
        closed_form_global_local_gap: centralized.max_abs_diff(&local_closed),
        negotiated_global_local_gap,
        all_converged: solved.iter().all(|s| s.consensus.as_ref().is_none_or(|c| c.converged)),
        trivial_not_cheaper,
        schemes,
    })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

/// Name of the policy artifact of `scheme`.
pub fn policy_file_name(scheme: Scheme) -> String {
    format!("policies_{scheme}.json")
}

pub fn consensus_file_name(scheme: Scheme) -> String {
    format!("consensus_{scheme}.json")
}

pub fn write_inputs(dir: &Path, config: &ExperimentConfig, model: &MarkovModel, units: &[UnitProfile]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(config, create(&dir.join("config.json"))?)?;
    write_json(model, create(&dir.join("model.json"))?)?;
    write_json(&EnsembleFile::from_units(units)?, create(&dir.join("ensemble.json"))?)?;
    Ok(())
}

/// `policies_<scheme>.json`, plus `consensus_<scheme>.json` and `trace_<scheme>.csv` for negotiated schemes.
pub fn write_solved(dir: &Path, solved: &SolvedScheme) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&solved.assignment, create(&dir.join(policy_file_name(solved.scheme)))?)?;
    if let Some(c) = &solved.consensus {
        write_json(c, create(&dir.join(consensus_file_name(solved.scheme)))?)?;
    }
    if let Some(trace) = &solved.trace_csv {
        fs::write(dir.join(format!("trace_{}.csv", solved.scheme)), trace)?;
    }
    Ok(())
}

/// Reads back what [`write_solved`] wrote.
pub fn read_solved(dir: &Path, scheme: Scheme) -> Result<SolvedScheme> {
    let path = dir.join(policy_file_name(scheme));
    let assignment = read_json(fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?)?;
    let consensus_path = dir.join(consensus_file_name(scheme));
    let consensus = if consensus_path.exists() { Some(read_json(fs::File::open(&consensus_path)?)?) } else { None };
    Ok(SolvedScheme { scheme, assignment, consensus, trace_csv: None })
}

/// `trajectories/<scheme>_replica_<r>.csv` and `trajectories/mean.csv`.
pub fn write_replicas(dir: &Path, schemes: &[Scheme], trajectories: &[Vec<Trajectory>]) -> Result<()> {
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir).with_context(|| format!("creating {}", traj_dir.display()))?;
    for (r, replica) in trajectories.iter().enumerate() {
        for (s, t) in schemes.iter().zip(replica) {
            let path = traj_dir.join(format!("{s}_replica_{r:03}.csv"));
            write_trajectories(create(&path)?, &[(s.name(), t)])?;
        }
    }
    Ok(())
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir).with_context(|| format!("creating {}", traj_dir.display()))?;
    let mut mean = csv::Writer::from_writer(create(&traj_dir.join("mean.csv"))?);
    mean.write_record(["stage", "scheme", "mean_power_kw", "mean_total_cost_usd"])?;
    for (scheme, s) in &summary.schemes {
        for (stage, p) in s.mean_power_kw.iter().enumerate() {
            mean.write_record([stage.to_string(), scheme.to_string(), p.to_string(), s.mean_total_cost_usd.to_string()])?;
        }
    }
    mean.flush()?;
    write_json(summary, create(&dir.join("summary.json"))?)?;
    Ok(())
}

/// Writes the bundle under `dir`: `config.json`, `model.json`, `ensemble.json`,
/// the per-scheme policy, consensus and trace files, the replica trajectories and `summary.json`.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    write_inputs(dir, &bundle.config, &bundle.model, &bundle.units)?;
    for s in &bundle.solved {
        write_solved(dir, s)?;
    }
    let schemes: Vec<Scheme> = bundle.solved.iter().map(|s| s.scheme).collect();
    write_replicas(dir, &schemes, &bundle.trajectories)?;
    write_summary(dir, &bundle.summary)
}

/// [`run_experiment_in_memory`] followed by [`write_bundle`] into the configured directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    let bundle = run_experiment_in_memory(config)?;
    write_bundle(&bundle, &config.out_dir)?;
    Ok(bundle.summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_purpose_and_master() {
        assert_ne!(derive_seed(1, purpose::ENSEMBLE), derive_seed(1, purpose::NETWORK));
        assert_ne!(derive_seed(1, purpose::ENSEMBLE), derive_seed(2, purpose::ENSEMBLE));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn synthetic_series_is_plausible() {
        let s = synthetic_power_series(14, 1).unwrap();
        assert_eq!(s.len(), 14 * 96);
        assert!(s.power_kw().iter().all(|&p| p >= 0.0));
        assert_eq!(s.power_kw(), synthetic_power_series(14, 1).unwrap().power_kw());
    }

    #[test]
    fn relative_linf_example() {
        assert_eq!(relative_linf(&[101.0, 50.0], &[100.0, 50.0]), 0.01);
    }
}
