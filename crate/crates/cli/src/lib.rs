//! Experiment driver for decentralized ensemble demand response.

pub mod config;
pub mod experiment;

/// Sizes the global rayon pool from `DR_ENSEMBLE_THREADS`, if set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("DR_ENSEMBLE_THREADS") {
        let threads: usize = value
            .parse()
            .map_err(|_| anyhow::anyhow!("DR_ENSEMBLE_THREADS must be a positive integer, got {value:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}
