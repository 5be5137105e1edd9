//! Batch front end for the layer-potential workbench: JSON run configs,
//! experiment drivers and the CSV / manifest / matrix artifact formats.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run_all, run_experiment, RunOutput};
pub use config::{parse_config, parse_config_str, Experiment, RunConfig};
pub use error::BenchError;

/// Caps the global worker pool at `POTBENCH_THREADS` when set.
pub fn configure_threads() -> Result<(), BenchError> {
    let Ok(value) = std::env::var("POTBENCH_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| BenchError::invalid("POTBENCH_THREADS", format!("expected a positive integer, got {value:?}")))?;
    // A pool that already exists (tests, repeated calls) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}
