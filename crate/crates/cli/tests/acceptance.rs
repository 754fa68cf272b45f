//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Failures are reported, not hidden: the process exits 0 after printing so
//! that the workspace test run completes, unless `ACCEPTANCE_STRICT=1` is set,
//! in which case any FAIL makes it exit 1. `ACCEPTANCE_ONLY=3,7` runs a subset.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use dr_ensemble::consensus::{
    build_gossip_network, run_global_consensus, run_local_pipeline, unit_gradient, ConsensusSettings, GossipClock,
    StepSchedule, Topology,
};
use dr_ensemble::math::{SimplexPoint, StochasticMatrix};
use dr_ensemble::simulator::sample_unit_transition;
use dr_ensemble::solver::oracle::{oracle_minimize, OracleObjective};
use dr_ensemble::solver::{
    backward_recursion_consensus, local_consensus_stack, local_stage_solve, realized_ensemble_cost,
    solve_myopic_posterior, solve_myopic_prior, solve_trivial, unit_value_table, JointState, StageCosts, UnitProfile,
};
use dr_ensemble_cli::config::{ExperimentConfig, Scheme};
use dr_ensemble_cli::experiment::{prepare_inputs, run_experiment_in_memory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_row(rng: &mut impl Rng, s: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..s).map(|_| rng.random_range(floor..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_units(rng: &mut impl Rng, n: usize, s: usize, stages: usize, gamma: (f64, f64)) -> Vec<UnitProfile> {
    (0..n)
        .map(|id| {
            let defaults = (0..stages)
                .map(|_| StochasticMatrix::from_rows((0..s).map(|_| random_row(rng, s, 0.05)).collect()).unwrap())
                .collect();
            let weights = (0..stages).map(|_| (0..s).map(|_| rng.random_range(gamma.0..gamma.1)).collect()).collect();
            UnitProfile::new(id as u64, defaults, weights).unwrap()
        })
        .collect()
}

fn random_costs(rng: &mut impl Rng, s: usize, l: usize, scale: f64) -> StageCosts {
    StageCosts::new((0..l).map(|_| (0..s).map(|_| rng.random_range(0.0..scale)).collect()).collect()).unwrap()
}

fn random_joint(rng: &mut impl Rng, n: usize, s: usize) -> JointState {
    JointState::new((0..n).map(|_| rng.random_range(0..s)).collect(), s).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A small experiment on the ingest pipeline's own ensemble recipe.
fn pipeline_config(states: usize, stage_count: usize, units: usize, seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig { states, stage_count, units, seed: Some(seed), ..ExperimentConfig::default() };
    config.data.synthetic_days = 30;
    config
}

fn oracle_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let oracle = |o: &OracleObjective| oracle_minimize(o, 1e-12, 200_000);
    for seed in 0..50 {
        let mut rng = rng(7_000 + seed);
        let (s, n, l) = (rng.random_range(2..=4), rng.random_range(1..=5), rng.random_range(2..=4));
        let units = random_units(&mut rng, n, s, l - 1, (0.5, 4.0));
        let costs = random_costs(&mut rng, s, l, 2.0);
        let q = costs.stage(1);
        let joint = random_joint(&mut rng, n, s);
        let x = random_row(&mut rng, s, 0.05);

        let (prior, _) = solve_myopic_prior(&units, 0, q)?;
        for (i, row) in oracle(&OracleObjective::prior(&units, 0, &x, q))?.rows.iter().enumerate() {
            worst = worst.max(max_abs(row.as_slice(), prior.row(i)));
        }
        let posterior = solve_myopic_posterior(&units, 0, &joint, q)?;
        let numeric = oracle(&OracleObjective::posterior(&units, 0, &joint, q))?;
        for (closed, row) in posterior.rows.iter().flatten().zip(&numeric.rows) {
            worst = worst.max(max_abs(closed.as_slice(), row.as_slice()));
        }
        let trivial = solve_trivial(&units, 0, &joint, q)?;
        let numeric = oracle(&OracleObjective::trivial(&units, 0, &joint, q))?;
        worst = worst.max(max_abs(trivial.as_slice(), numeric.rows[0].as_slice()));

        let (stack, values) = backward_recursion_consensus(&units, &costs)?;
        let tables = units.iter().map(|u| unit_value_table(u, &costs)).collect::<Result<Vec<_>, _>>()?;
        for stage in 0..l - 1 {
            let next = vec![values.stage(stage + 1).to_vec(); n];
            for (i, row) in oracle(&OracleObjective::stage(&units, stage, &next))?.rows.iter().enumerate() {
                worst = worst.max(max_abs(row.as_slice(), stack.stage(stage).row(i)));
            }
            let local = local_stage_solve(&tables, &units, stage)?;
            let next: Vec<Vec<f64>> = tables.iter().map(|t| t.stage(stage + 1).to_vec()).collect();
            for (i, row) in oracle(&OracleObjective::stage(&units, stage, &next))?.rows.iter().enumerate() {
                worst = worst.max(max_abs(row.as_slice(), local.row(i)));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-5 && elapsed < Duration::from_secs(60),
        format!("worst entry gap {worst:.2e} (tol 1e-5) over 50 instances in {:.1} s (limit 60 s)", elapsed.as_secs_f64()),
    )
}

fn hand_case() -> Result<Outcome> {
    let uniform = StochasticMatrix::uniform(2);
    let unit = UnitProfile::stage_invariant(0, uniform, vec![1.0, 1.0], 2)?;
    let costs = StageCosts::new(vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]])?;
    let (stack, values) = backward_recursion_consensus(&[unit], &costs)?;
    // independent evaluation of the one-step problem with uniform default and unit weight
    let e = (-1.0f64).exp();
    let value = -((1.0 + e) / 2.0).ln();
    let row = [1.0 / (1.0 + e), e / (1.0 + e)];
    ensure!((value - 0.379885).abs() < 1e-6 && (row[0] - 0.731059).abs() < 1e-6, "reference values drifted");
    let v_gap = max_abs(values.stage(1), &[value, value]);
    let p_gap = (0..2).map(|i| max_abs(stack.stage(1).row(i), &row)).fold(0.0, f64::max);
    outcome(
        v_gap <= 1e-6 && p_gap <= 1e-6,
        format!("v_2 = {:?}, stage-2 row 0 = {:?}; gaps {v_gap:.1e}, {p_gap:.1e} (tol 1e-6)", values.stage(1), stack.stage(1).row(0)),
    )
}

fn global_local_equivalence() -> Result<Outcome> {
    let mut homogeneous_gap: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = rng(300 + seed);
        let template = random_units(&mut rng, 1, 4, 5, (1.0, 5.0)).remove(0);
        let units: Vec<UnitProfile> = (0..5)
            .map(|id| UnitProfile::new(id, template.defaults().to_vec(), template.gamma_table().to_vec()))
            .collect::<Result<_, _>>()?;
        let costs = random_costs(&mut rng, 4, 6, 3.0);
        let (global, _) = backward_recursion_consensus(&units, &costs)?;
        homogeneous_gap = homogeneous_gap.max(global.max_abs_diff(&local_consensus_stack(&units, &costs)?));
    }

    // heterogeneous toys drawn by the ingest recipe
    let mut worst_error: f64 = 0.0;
    let mut gaps = Vec::new();
    let mut converged = true;
    for seed in 0..3 {
        let config = pipeline_config(3, 4, 5, 40 + seed);
        let inputs = prepare_inputs(&config, 40 + seed)?;
        let (units, costs) = (&inputs.units, &inputs.costs);
        let (global_ref, _) = backward_recursion_consensus(units, costs)?;
        let local_ref = local_consensus_stack(units, costs)?;
        let network = build_gossip_network(units.len(), &Topology::Uniform, 1.0, 0)?;
        // the error bound includes each unit's distance to the mean, so stop well inside it
        let settings = ConsensusSettings { threshold: 1e-3, ..config.consensus.settings() };
        let global = run_global_consensus(units, costs, &network, &settings, Some(&global_ref), seed)?;
        let local = run_local_pipeline(units, costs, &network, &settings, Some(&local_ref), seed)?;
        converged &= global.converged && local.converged();
        worst_error = worst_error.max(global.final_error().unwrap_or(f64::INFINITY));
        for stage in &local.stages {
            worst_error = worst_error.max(stage.final_error().unwrap_or(f64::INFINITY));
        }
        gaps.push(format!("{:.3}", global_ref.max_abs_diff(&local_ref)));
    }
    outcome(
        homogeneous_gap <= 1e-9 && converged && worst_error <= 0.01,
        format!(
            "homogeneous gap {homogeneous_gap:.1e} (tol 1e-9); heterogeneous worst error {worst_error:.2e} (tol 0.01), \
             closed-form global/local gaps [{}]",
            gaps.join(", ")
        ),
    )
}

/// Harmonic steps for 10^4 synchronous rounds; the last error and the first round within 0.01.
fn harmonic_run(units: &[UnitProfile], costs: &StageCosts) -> Result<(f64, Option<usize>)> {
    let (reference, _) = backward_recursion_consensus(units, costs)?;
    let network = build_gossip_network(units.len(), &Topology::Uniform, 1.0, 0)?;
    let settings = ConsensusSettings {
        schedule: StepSchedule::Harmonic,
        threshold: 0.0,
        max_iterations: 10_000,
        ..ConsensusSettings::default()
    };
    let report = run_global_consensus(units, costs, &network, &settings, Some(&reference), 4)?;
    let errors = report.error_to_reference.unwrap_or_default();
    Ok((*errors.last().unwrap_or(&f64::INFINITY), errors.iter().position(|&e| e <= 0.01)))
}

fn proposition_one() -> Result<Outcome> {
    let start = Instant::now();
    let inputs = prepare_inputs(&pipeline_config(5, 5, 20, 4), 4)?;
    // heterogeneous interior defaults and weights, priced by the ingested model
    let units = random_units(&mut rng(44), 20, 5, 4, (1.0, 5.0));
    let (last, first) = harmonic_run(&units, &inputs.costs)?;
    let elapsed = start.elapsed();
    // Each unit sits about alpha_k times the spread of the unit gradients away from
    // the mean, so heavier weights or clipped defaults need more rounds. Reported
    // for comparison: the case-study weights, and the ingest recipe's ensemble.
    let (heavy_last, _) = harmonic_run(&random_units(&mut rng(44), 20, 5, 4, (16.0, 24.0)), &inputs.costs)?;
    let (recipe_last, _) = harmonic_run(&inputs.units, &inputs.costs)?;
    outcome(
        last <= 0.01 && elapsed < Duration::from_secs(120),
        format!(
            "error after 10^4 rounds {last:.3e} (tol 0.01), first round within 0.01: {}, {:.1} s (limit 120 s); \
             with weights in [16, 24] {heavy_last:.3e}, ingest-recipe ensemble {recipe_last:.3e}",
            first.map_or("never".into(), |k| k.to_string()),
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_check() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = rng(900 + seed);
        let s = rng.random_range(2..=6);
        let unit = random_units(&mut rng, 1, s, 1, (0.5, 5.0)).remove(0);
        let q = StochasticMatrix::from_rows((0..s).map(|_| random_row(&mut rng, s, 0.05)).collect())?;
        let next: Vec<f64> = (0..s).map(|_| rng.random_range(-2.0..2.0)).collect();
        let analytic = unit_gradient(&unit, &q, &next, 0)?;
        // the objective written out directly, as a function of every entry
        let objective = |m: &[f64]| -> f64 {
            (0..s * s)
                .map(|e| {
                    let (i, j) = (e / s, e % s);
                    m[e] * next[j] + unit.gamma(0, i) * m[e] * (m[e] / unit.default_row(0, i)[j]).ln()
                })
                .sum()
        };
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(s * s);
        for e in 0..s * s {
            let (mut up, mut down) = (q.as_slice().to_vec(), q.as_slice().to_vec());
            up[e] += h;
            down[e] -= h;
            numeric.push((objective(&up) - objective(&down)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    outcome(worst <= 1e-5, format!("worst relative error {worst:.2e} over 100 interior points (tol 1e-5)"))
}

fn cost_ordering() -> Result<Outcome> {
    let (mut posterior_ok, mut prior_ok) = (0, 0);
    let mut worst_excess: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = rng(500 + seed);
        let (s, n) = (rng.random_range(2..=5), rng.random_range(1..=8));
        let units = random_units(&mut rng, n, s, 1, (0.5, 5.0));
        let joint = random_joint(&mut rng, n, s);
        let q: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..3.0)).collect();
        let posterior = solve_myopic_posterior(&units, 0, &joint, &q)?.optimal_cost;
        let (prior, _) = solve_myopic_prior(&units, 0, &q)?;
        let trivial = solve_trivial(&units, 0, &joint, &q)?;
        let prior_rows: Vec<&[f64]> = joint.states().iter().map(|&i| prior.row(i)).collect();
        let prior_cost = realized_ensemble_cost(&units, 0, &prior_rows, &joint, &q)?;
        let trivial_cost = realized_ensemble_cost(&units, 0, &vec![trivial.as_slice(); n], &joint, &q)?;
        posterior_ok += (posterior <= prior_cost + 1e-9) as usize;
        prior_ok += (prior_cost <= trivial_cost + 1e-9) as usize;
        worst_excess = worst_excess.max(prior_cost - trivial_cost);
    }
    outcome(
        posterior_ok == 50 && prior_ok == 50,
        format!(
            "posterior <= prior on {posterior_ok}/50, prior <= trivial on {prior_ok}/50 (largest prior - trivial {worst_excess:.3e})"
        ),
    )
}

fn case_study() -> Result<Outcome> {
    let start = Instant::now();
    let config = ExperimentConfig { seed: Some(2024), ..ExperimentConfig::default() };
    let bundle = run_experiment_in_memory(&config)?;
    let elapsed = start.elapsed();
    let deviation = |s: Scheme| bundle.summary.schemes[&s].max_power_deviation_from_centralized.unwrap_or(f64::INFINITY);
    let (global, local) = (deviation(Scheme::Global), deviation(Scheme::Local));
    let rounds: Vec<String> = [Scheme::Global, Scheme::Local]
        .iter()
        .map(|s| bundle.summary.schemes[s].consensus.as_ref().map_or(0, |c| c.iterations).to_string())
        .collect();
    outcome(
        global <= 0.02 && local <= 0.02 && bundle.summary.all_converged && elapsed < Duration::from_secs(300),
        format!(
            "power deviation from centralized: global {:.2}%, local {:.2}% (tol 2%); closed-form global/local gap {:.3}; \
             rounds global {} local {}; converged {}; {:.0} s on {} thread(s) (limit 300 s)",
            100.0 * global,
            100.0 * local,
            bundle.summary.closed_form_global_local_gap,
            rounds[0],
            rounds[1],
            bundle.summary.all_converged,
            elapsed.as_secs_f64(),
            rayon::current_num_threads()
        ),
    )
}

fn statistics() -> Result<Outcome> {
    let row = SimplexPoint::new(vec![0.1, 0.25, 0.05, 0.6])?;
    let draws = 100_000;
    let mut rng = rng(81);
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sample_unit_transition(&row, rng.random::<f64>())?] += 1;
    }
    let sampler_z = counts
        .iter()
        .zip(row.as_slice())
        .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs() / (p * (1.0 - p) / draws as f64).sqrt())
        .fold(0.0, f64::max);

    let network = build_gossip_network(10, &Topology::Uniform, 2.0, 0)?;
    let events = 20_000;
    let horizon = GossipClock::new(&network, 82).take(events).last().map_or(0.0, |e| e.time);
    // inter-arrival times are exponential with mean and deviation 1 / (N rate)
    let expected = 1.0 / 20.0;
    let clock_z = (horizon / events as f64 - expected).abs() / (expected / (events as f64).sqrt());
    outcome(
        sampler_z <= 3.0 && clock_z <= 3.0,
        format!("sampler worst {sampler_z:.2} SE over 1e5 draws, clock mean gap {clock_z:.2} SE over 2e4 events (limit 3)"),
    )
}

fn files_under(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir)?.display().to_string(), std::fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<Outcome> {
    let bin = env!("CARGO_BIN_EXE_dr-ensemble");
    let root = tempfile::tempdir()?;
    let mut csv = String::from("timestamp,power_kw\n");
    for k in 0..96 * 14 {
        let kw = 80.0 + 40.0 * ((k % 96) as f64 / 15.0).sin().abs() + (k * 7 % 11) as f64;
        csv += &format!("2024-05-{:02}T{:02}:{:02}:00Z,{kw}\n", 1 + k / 96, (k % 96) / 4, 15 * (k % 4));
    }
    let data = root.path().join("power.csv");
    std::fs::write(&data, csv)?;
    let config = root.path().join("config.json");
    std::fs::write(&config, r#"{"S": 4, "L": 4, "N": 6, "replicas": 3}"#)?;

    let steps: Vec<Vec<String>> = vec![
        vec!["ingest".into(), "--input".into(), data.display().to_string()],
        vec!["generate".into()],
        vec!["solve".into()],
        vec!["consensus".into(), "--scheme".into(), "global".into()],
        vec!["consensus".into(), "--scheme".into(), "local".into(), "--mode".into(), "async".into()],
        vec!["simulate".into(), "--scheme".into(), "local".into()],
        vec!["compare".into()],
    ];
    // both runs write to the same paths, since the stored config records its output directory
    let run = || -> Result<Vec<(String, Vec<u8>)>> {
        let (stepwise, whole) = (root.path().join("steps"), root.path().join("run"));
        for dir in [&stepwise, &whole] {
            if dir.exists() {
                std::fs::remove_dir_all(dir)?;
            }
        }
        let cli = |dir: &Path, args: &[String]| -> Result<()> {
            let status = Command::new(bin)
                .args(["--config", &config.display().to_string(), "--seed", "5", "--out-dir"])
                .arg(dir)
                .args(args)
                .output()?
                .status;
            ensure!(status.success() || status.code() == Some(2), "{args:?} failed: {status}");
            Ok(())
        };
        for step in &steps {
            cli(&stepwise, step)?;
        }
        cli(&whole, &["run".into()])?;
        let mut files = files_under(&stepwise)?;
        files.extend(files_under(&whole)?.into_iter().map(|(p, b)| (format!("run/{p}"), b)));
        Ok(files)
    };
    let (a, b) = (run()?, run()?);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let names_match = a.iter().map(|x| &x.0).eq(b.iter().map(|x| &x.0));
    outcome(
        names_match && differing.is_empty() && !a.is_empty(),
        format!("{} artifacts from ingest through compare and run; {} differ {:?}", a.len(), differing.len(), differing),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("backward recursion hand case", hand_case),
        ("global and local consensus", global_local_equivalence),
        ("harmonic steps reach the closed form", proposition_one),
        ("gradient against finite differences", gradient_check),
        ("myopic cost ordering", cost_ordering),
        ("case study scale", case_study),
        ("sampler and clock statistics", statistics),
        ("determinism", determinism),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failures = 0;
    let mut ran = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(k + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failures += !pass as usize;
        println!("criterion {} {} {name}: {detail} [{secs:.1} s]", k + 1, if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {ran} criteria pass", ran - failures);
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
