//! Configuration-driven harness for the unimul simulator: parses run and
//! sweep files, runs them, and checks every product against a serial one.

pub mod config;
pub mod harness;

pub use config::{parse_config, parse_sweep, ConfigError, RunConfig};
pub use harness::{run_one, run_sweep, Problem, RunError, RunResult};
