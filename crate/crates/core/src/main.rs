use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};

use iotsim::energy::PowerSample;
use iotsim::harness::{
    compare, emit_plot_data, load_scenario, read_csv, run_scenario, write_csv, write_report_csv,
    Protocol, RunResult, ScenarioConfig,
};

#[derive(Parser)]
#[command(
    name = "iotsim",
    version,
    about = "Power simulator for MQTT, MQTT-SN, CoAP and HTTP on a low-power node"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write the client's power trace.
    Run {
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long)]
        interval: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML scenario file; flags override its values.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the server node's trace.
        #[arg(long)]
        broker_out: Option<PathBuf>,
    },
    /// Rank trace files by average total power.
    Compare {
        /// Trace CSVs; each is named after its file stem, or use NAME=PATH.
        #[arg(required = true, num_args = 2..)]
        traces: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run all four protocols in parallel and compare them.
    Suite {
        #[arg(long, default_value_t = 100)]
        duration: u64,
        #[arg(long, default_value_t = 10)]
        interval: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Directory for the per-protocol traces, report.csv and plot.dat.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn samples(r: &RunResult, server: bool) -> Vec<PowerSample> {
    let node = if server { &r.server } else { r.client() };
    node.rows.iter().map(|row| row.power).collect()
}

fn base_config(
    scenario: Option<&Path>,
    protocol: Option<Protocol>,
) -> Result<ScenarioConfig, String> {
    match (scenario, protocol) {
        (Some(path), p) => {
            let mut cfg = load_scenario(path).map_err(|e| e.to_string())?;
            if let Some(p) = p {
                cfg.protocol = p;
            }
            Ok(cfg)
        }
        (None, Some(p)) => Ok(ScenarioConfig::new(p)),
        (None, None) => Err("either --protocol or --scenario is required".into()),
    }
}

fn execute(cfg: &ScenarioConfig) -> Result<RunResult, String> {
    let result = run_scenario(cfg).map_err(|e| e.to_string())?;
    for f in result.failures() {
        log::warn!(
            "{} node {} at {:.3} s: {:?}",
            cfg.protocol,
            f.node,
            f.at_s,
            f.notice
        );
    }
    Ok(result)
}

fn real_main(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            protocol,
            duration,
            interval,
            seed,
            scenario,
            out,
            broker_out,
        } => {
            let mut cfg = base_config(scenario.as_deref(), protocol)?;
            cfg.duration_s = duration.unwrap_or(cfg.duration_s);
            cfg.interval_s = interval.unwrap_or(cfg.interval_s);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let result = execute(&cfg)?;
            write_csv(&out, &samples(&result, false)).map_err(|e| e.to_string())?;
            if let Some(path) = broker_out {
                write_csv(&path, &samples(&result, true)).map_err(|e| e.to_string())?;
            }
            let avg = result.client().average().map_err(|e| e.to_string())?;
            println!(
                "{}: average total {:.9} mW over {} rows",
                cfg.protocol,
                avg.total_mw,
                result.client().rows.len()
            );
        }
        Command::Compare {
            traces,
            report,
            plot,
        } => {
            let mut inputs = Vec::new();
            for spec in traces {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_owned(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(&spec);
                        let stem = p
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .unwrap_or(&spec)
                            .to_owned();
                        (stem, p)
                    }
                };
                let trace = read_csv(&path).map_err(|e| e.to_string())?;
                inputs.push((name, trace.avg));
            }
            let r = compare(&inputs).map_err(|e| e.to_string())?;
            print_report(&r);
            if let Some(path) = report {
                write_report_csv(&r, &path).map_err(|e| e.to_string())?;
            }
            if let Some(path) = plot {
                emit_plot_data(&r, &path).map_err(|e| e.to_string())?;
            }
        }
        Command::Suite {
            duration,
            interval,
            seed,
            scenario,
            out_dir,
        } => {
            std::fs::create_dir_all(&out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
            let mut base = base_config(scenario.as_deref(), Some(Protocol::Mqtt))?;
            base.duration_s = duration;
            base.interval_s = interval;
            base.seed = seed;
            let handles: Vec<_> = Protocol::ALL
                .into_iter()
                .map(|p| {
                    let cfg = ScenarioConfig {
                        protocol: p,
                        ..base.clone()
                    };
                    thread::spawn(move || execute(&cfg).map(|r| (p, r)))
                })
                .collect();
            let mut inputs = Vec::new();
            for h in handles {
                let (p, result) = h
                    .join()
                    .map_err(|_| "simulation thread panicked".to_owned())??;
                let rows = samples(&result, false);
                write_csv(&out_dir.join(format!("{p}.csv")), &rows).map_err(|e| e.to_string())?;
                inputs.push((
                    p.to_string(),
                    result.client().average().map_err(|e| e.to_string())?,
                ));
            }
            let r = compare(&inputs).map_err(|e| e.to_string())?;
            print_report(&r);
            write_report_csv(&r, &out_dir.join("report.csv")).map_err(|e| e.to_string())?;
            emit_plot_data(&r, &out_dir.join("plot.dat")).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn print_report(r: &iotsim::harness::ComparisonReport) {
    println!(
        "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "protocol", "cpu_mw", "lpm_mw", "tx_mw", "rx_mw", "total_mw"
    );
    for (name, s) in &r.averages {
        println!(
            "{name:<8} {:>12.9} {:>12.9} {:>12.9} {:>12.9} {:>12.9}",
            s.cpu_mw, s.lpm_mw, s.tx_mw, s.rx_mw, s.total_mw
        );
    }
    if let [first, .., last] = &r.ranking[..] {
        if let Some(d) = r.delta(first, last) {
            println!("{first} vs {last}: total {:+.1}%", d.total_pct);
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
