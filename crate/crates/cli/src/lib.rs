//! Configuration parsing and dataset-generation orchestration for the
//! `cryosim` command line.

pub mod config;
pub mod pipeline;

/// Environment variable supplying the default worker count when neither
/// the `--workers` flag nor the config sets one.
pub const WORKERS_ENV_VAR: &str = "CRYOSIM_WORKERS";

/// Resolves the worker count: flag > config > environment > auto (0).
pub fn resolve_workers(flag: Option<usize>, config_value: usize) -> usize {
    if let Some(w) = flag {
        return w;
    }
    if config_value > 0 {
        return config_value;
    }
    std::env::var(WORKERS_ENV_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}
