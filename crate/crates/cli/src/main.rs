use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dr_ensemble::consensus::Mode;
use dr_ensemble::ingest::{build_markov_model, read_power_csv, write_json, Binning};
use dr_ensemble_cli::config::{ExperimentConfig, Scheme};
use dr_ensemble_cli::experiment::{
    compare, load_model, load_or_prepare_inputs, read_solved, resolve_seed, schemes_of, solve_scheme, write_inputs,
    write_replicas, write_solved, write_summary, ConsensusSummary,
};

/// Decentralized demand response for ensembles of Markov loads.
#[derive(Parser)]
#[command(name = "dr-ensemble", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to `<out-dir>/config.json` if present, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Discretize a power series and estimate the default chain.
    Ingest {
        /// `timestamp,power_kw` CSV; the config's data source is used when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        states: Option<usize>,
        #[arg(long, value_parser = parse_binning)]
        binning: Option<Binning>,
    },
    /// Draw the heterogeneous ensemble.
    Generate,
    /// Closed-form centralized and trivial policies.
    Solve,
    /// Negotiate policies over the gossip network.
    Consensus {
        #[arg(long, value_parser = parse_decentralized)]
        scheme: Scheme,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Simulate one scheme's stored policies.
    Simulate {
        #[arg(long)]
        scheme: Scheme,
    },
    /// Simulate every stored scheme on shared replicas and summarize.
    Compare,
    /// All of the above.
    Run {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
}

fn parse_binning(s: &str) -> Result<Binning, String> {
    match s {
        "equal-width" => Ok(Binning::EqualWidth),
        "quantile" => Ok(Binning::Quantile),
        _ => Err("expected equal-width or quantile".into()),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "sync" | "synchronous" => Ok(Mode::Synchronous),
        "async" | "asynchronous" => Ok(Mode::Asynchronous),
        _ => Err("expected sync or async".into()),
    }
}

fn parse_decentralized(s: &str) -> Result<Scheme, String> {
    match s.parse::<Scheme>() {
        Ok(scheme) if scheme.is_decentralized() => Ok(scheme),
        _ => Err("expected global or local".into()),
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let stored = common.out_dir.clone().unwrap_or_else(|| ExperimentConfig::default().out_dir).join("config.json");
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    if let Some(dir) = &common.out_dir {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(resolve_seed(&config))
}

fn report_consensus(scheme: Scheme, c: &ConsensusSummary) {
    eprintln!(
        "{scheme}: {} after {} iterations, disagreement {:.3e}, error to closed form {:.3e}",
        if c.converged { "converged" } else { "NOT converged" },
        c.iterations,
        c.final_disagreement,
        c.final_error_to_reference,
    );
}

/// Runs the command; `Ok(false)` means a negotiation hit its iteration cap.
fn execute(cli: Cli) -> Result<bool> {
    let mut config = resolve_config(&cli.common)?;
    let master = config.seed.expect("seed resolved");
    let dir = config.out_dir.clone();
    let mut converged = true;
    match cli.command {
        Command::Ingest { input, states, binning } => {
            if let Some(s) = states {
                config.states = s;
            }
            if let Some(b) = binning {
                config.data.binning = b;
            }
            config.validate()?;
            let model = match input {
                Some(path) => {
                    let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    build_markov_model(&read_power_csv(file)?, config.states, config.data.binning, config.data.smoothing)?
                }
                None => load_model(&config, master)?,
            };
            std::fs::create_dir_all(&dir)?;
            write_json(&config, std::fs::File::create(dir.join("config.json"))?)?;
            write_json(&model, std::fs::File::create(dir.join("model.json"))?)?;
            eprintln!("wrote {}", dir.join("model.json").display());
        }
        Command::Generate => {
            let inputs = load_or_prepare_inputs(&config, master, &dir)?;
            write_inputs(&dir, &config, &inputs.model, &inputs.units)?;
            eprintln!("wrote {} units to {}", inputs.units.len(), dir.join("ensemble.json").display());
        }
        Command::Solve => {
            let inputs = load_or_prepare_inputs(&config, master, &dir)?;
            write_inputs(&dir, &config, &inputs.model, &inputs.units)?;
            for scheme in [Scheme::Centralized, Scheme::Trivial] {
                write_solved(&dir, &solve_scheme(scheme, &inputs.units, &inputs.costs, &config, master)?)?;
            }
            eprintln!("wrote centralized and trivial policies to {}", dir.display());
        }
        Command::Consensus { scheme, mode } => {
            if let Some(m) = mode {
                config.consensus.mode = m;
            }
            let inputs = load_or_prepare_inputs(&config, master, &dir)?;
            write_inputs(&dir, &config, &inputs.model, &inputs.units)?;
            let solved = solve_scheme(scheme, &inputs.units, &inputs.costs, &config, master)?;
            write_solved(&dir, &solved)?;
            let c = solved.consensus.as_ref().expect("negotiated scheme");
            report_consensus(scheme, c);
            converged = c.converged;
        }
        Command::Simulate { scheme } => {
            let inputs = load_or_prepare_inputs(&config, master, &dir)?;
            let solved = read_solved(&dir, scheme)?;
            let (trajectories, summary) = compare(&config, master, &inputs, std::slice::from_ref(&solved))?;
            write_replicas(&dir, &[scheme], &trajectories)?;
            eprintln!("{scheme}: mean event cost {:.4} USD", summary.schemes[&scheme].mean_total_cost_usd);
        }
        Command::Compare => {
            let inputs = load_or_prepare_inputs(&config, master, &dir)?;
            let solved = schemes_of(&config)
                .into_iter()
                .filter(|&s| dir.join(dr_ensemble_cli::experiment::policy_file_name(s)).exists())
                .map(|s| read_solved(&dir, s))
                .collect::<Result<Vec<_>>>()?;
            if solved.is_empty() {
                bail!("no stored policies in {}; run solve or consensus first", dir.display());
            }
            let schemes: Vec<Scheme> = solved.iter().map(|s| s.scheme).collect();
            let (trajectories, summary) = compare(&config, master, &inputs, &solved)?;
            write_replicas(&dir, &schemes, &trajectories)?;
            write_summary(&dir, &summary)?;
            converged = summary.all_converged;
            print_costs(&summary);
        }
        Command::Run { mode } => {
            if let Some(m) = mode {
                config.consensus.mode = m;
            }
            let bundle = dr_ensemble_cli::experiment::run_experiment_in_memory(&config)?;
            dr_ensemble_cli::experiment::write_bundle(&bundle, &dir)?;
            for s in &bundle.solved {
                if let Some(c) = &s.consensus {
                    report_consensus(s.scheme, c);
                }
            }
            print_costs(&bundle.summary);
            converged = bundle.summary.all_converged;
        }
    }
    Ok(converged)
}

fn print_costs(summary: &dr_ensemble_cli::experiment::Summary) {
    for (scheme, s) in &summary.schemes {
        eprintln!("{scheme}: mean event cost {:.4} USD", s.mean_total_cost_usd);
    }
    eprintln!("seed {}", summary.seed);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = dr_ensemble_cli::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
