//! Scenario configuration, end-to-end runs, trace files and comparison reports.

pub mod compare;
pub mod config;
pub mod sim;
pub mod tracefile;

pub use compare::{compare, emit_plot_data, write_report_csv, ComparisonReport, PairDelta};
pub use config::{load_scenario, parse_scenario, ConfigError, Protocol, ScenarioConfig};
pub use sim::{run_scenario, run_scenario_with, NodeReport, RunOptions, RunResult};
pub use tracefile::{read_csv, write_csv, TraceFile};
