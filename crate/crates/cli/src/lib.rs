//! Command-line harness: configuration, dataset ingestion and experiment
//! orchestration around `sandwich_core`.

pub mod commands;
pub mod config;
pub mod dataset;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SANDWICH_THREADS";

/// Size the global worker pool from [`THREADS_ENV`] if set. Call once,
/// before any parallel work.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    if n == 0 {
        anyhow::bail!("{THREADS_ENV} must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}
