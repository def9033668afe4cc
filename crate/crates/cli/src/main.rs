//! `iesim`: validate configurations, simulate, fit, verify requirements and
//! sweep energy parameters of an IoT scenario.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iesim_core::export::{
    fit_trace, fits_csv, fits_to_timing, parse_trace_csv, powertrace_csv, summary_csv, trace_csv, CALIBRATED_MODES,
};
use iesim_core::model::OperatingMode;
use iesim_core::scenario::{parse_config, render_fitted, EnergyConfig, RdcProtocol, Scenario, ScenarioError};
use iesim_core::sim::{powertrace_log, replicate_summaries, run_trace, with_jobs, PowertraceConfig, SimError};
use iesim_core::smc::{device_rows, parse_requirements, verify_requirements, SmcError, SHIPPED_REQUIREMENTS};
use iesim_core::sweep::{duty_cycle_csv, lifetime_csv, spread, sweep, SweepError};

const EXIT_VIOLATED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DEADLOCK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "iesim", version, about = "Energy simulation and statistical model checking for IoT device networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario XML file; the shipped building scenario when omitted.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Root seed of all random streams.
    #[arg(long, global = true, env = "IESIM_SEED", default_value_t = 0)]
    seed: u64,
    /// Simulated time as <int><s|m|h|d|w>, e.g. 5d.
    #[arg(long, global = true)]
    horizon: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for replicas; all cores when omitted.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Energy parameter override NAME=VALUE, e.g. rdc-protocol=LPP (repeatable).
    #[arg(long = "set", global = true, value_name = "NAME=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a scenario or energy-parameter document.
    ValidateConfig {
        /// Document to check; defaults to --scenario.
        path: Option<PathBuf>,
    },
    /// Run one replica and write trace, powertrace and summary CSVs.
    Simulate {
        /// Powertrace reporting period in seconds.
        #[arg(long, default_value_t = 1.0)]
        powertrace_period: f64,
    },
    /// Fit duration distributions per (device type, mode) from a trace CSV.
    Fit {
        /// Trace CSV written by `simulate`.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Check requirements by statistical model checking.
    Verify {
        /// Requirements TOML; the shipped requirements when omitted.
        #[arg(long)]
        requirements: Option<PathBuf>,
        /// Only check these requirement ids (repeatable).
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Vary one energy parameter over its full range.
    Sweep {
        /// One of rdc-protocol, rdc-frequency, retransmissions, service-protocol, header-size, interference.
        #[arg(long)]
        parameter: String,
        /// Replicas per parameter value.
        #[arg(long, default_value_t = 10)]
        replicas: usize,
    },
    /// Per-device lifetime and duty-cycle tables for every RDC protocol.
    Report {
        /// Replicas per protocol.
        #[arg(long, default_value_t = 10)]
        replicas: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Deadlock { .. } | SimError::Zeno { .. } => Failure { code: EXIT_DEADLOCK, message: e.to_string() },
            _ => Failure::usage(e.to_string()),
        }
    }
}

impl From<SmcError> for Failure {
    fn from(e: SmcError) -> Self {
        match e {
            SmcError::Sim(s) => s.into(),
            other => Failure::usage(other.to_string()),
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Sim(s) => s.into(),
            SweepError::Smc(s) => s.into(),
            other => Failure::usage(other.to_string()),
        }
    }
}

/// Parses `<int><s|m|h|d|w>` into seconds; zero is rejected.
fn parse_horizon(text: &str) -> Result<f64, Failure> {
    let bad = || Failure::usage(format!("invalid --horizon {text:?}: expected a positive <int><s|m|h|d|w>, e.g. 5d"));
    let t = text.trim();
    let unit = t.chars().last().ok_or_else(bad)?;
    let scale: u64 = match unit {
        's' => 1,
        'm' => 60,
        'h' => 3_600,
        'd' => 86_400,
        'w' => 604_800,
        _ => return Err(bad()),
    };
    let n: u64 = t[..t.len() - 1].parse().map_err(|_| bad())?;
    match n.checked_mul(scale) {
        Some(s) if s > 0 => Ok(s as f64),
        _ => Err(bad()),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn load_scenario(common: &Common) -> Result<Scenario, Failure> {
    let mut scenario = match &common.scenario {
        Some(path) => Scenario::parse(&read(path)?)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        None => Scenario::shipped(),
    };
    let mut cfg = scenario.config;
    for o in &common.overrides {
        let (name, value) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("invalid --set {o:?}: expected NAME=VALUE")))?;
        cfg.set(name.trim(), value.trim())?;
    }
    scenario.config = cfg;
    Ok(scenario)
}

fn horizon(common: &Common, default: &str) -> Result<f64, Failure> {
    parse_horizon(common.horizon.as_deref().unwrap_or(default))
}

fn validate_config(common: &Common, path: Option<&Path>) -> Result<u8, Failure> {
    let Some(path) = path.or(common.scenario.as_deref()) else {
        Scenario::shipped();
        println!("shipped scenario: ok");
        return Ok(0);
    };
    let text = read(path)?;
    let is_scenario = text.contains("<scenario");
    let result = if is_scenario { Scenario::parse(&text).map(|s| s.config) } else { parse_config(&text) };
    match result {
        Ok(cfg) => {
            let shown: Vec<String> = iesim_core::scenario::PARAMETER_NAMES
                .iter()
                .map(|n| format!("{n}={}", cfg.get(n).unwrap_or_default()))
                .collect();
            println!("{}: ok ({})", path.display(), shown.join(", "));
            Ok(0)
        }
        Err(e) => Err(Failure::usage(format!("{}: {e}", path.display()))),
    }
}

fn simulate(common: &Common, period: f64) -> Result<u8, Failure> {
    let scenario = load_scenario(common)?;
    let horizon = horizon(common, "1w")?;
    let sys = scenario.build_system()?;
    let trace = match run_trace(&sys, horizon, common.seed, false) {
        Ok(t) => t,
        Err(e @ SimError::Deadlock { .. }) => {
            let path = write(&common.out, "deadlock.txt", &format!("{e}\n"))?;
            return Err(Failure { code: EXIT_DEADLOCK, message: format!("{e}\nsnapshot written to {}", path.display()) });
        }
        Err(e) => return Err(e.into()),
    };
    let records = powertrace_log(&trace, PowertraceConfig { period, ..PowertraceConfig::default() })?;
    let summary = summary_csv(&trace).map_err(|e| Failure::usage(e.to_string()))?;
    write(&common.out, "trace.csv", &trace_csv(&trace))?;
    write(&common.out, "powertrace.csv", &powertrace_csv(&trace, &records))?;
    write(&common.out, "summary.csv", &summary)?;
    println!(
        "simulated {} devices for {horizon} s (seed {}); wrote trace.csv, powertrace.csv, summary.csv to {}",
        trace.devices.len(),
        common.seed,
        common.out.display()
    );
    Ok(0)
}

fn fit(common: &Common, trace_path: &Path) -> Result<u8, Failure> {
    let rows = parse_trace_csv(&read(trace_path)?).map_err(|e| Failure::usage(format!("{}: {e}", trace_path.display())))?;
    // Device types come from the scenario topology; unknown devices fit on their own.
    let scenario = load_scenario(common)?;
    let types: HashMap<&str, &str> =
        scenario.topology.devices.iter().map(|d| (d.name.as_str(), d.device_type.as_str())).collect();
    let fits = fit_trace(&rows, |name| types.get(name).map_or_else(|| name.to_string(), |t| t.to_string()))
        .map_err(|e| Failure::usage(e.to_string()))?;
    let fitted = fits_to_timing(&fits, &CALIBRATED_MODES);
    write(&common.out, "fits.csv", &fits_csv(&fits))?;
    write(&common.out, "fitted-timing.xml", &render_fitted(&fitted, ""))?;
    let mut calibrated = scenario.clone();
    calibrated.fitted.extend(fitted);
    write(&common.out, "calibrated-scenario.xml", &calibrated.render())?;
    for f in &fits {
        println!(
            "{:<10} {:<4} {:<12} mean {:.6} s  n={}",
            f.device_type,
            f.mode.name(),
            f.report.distribution.to_string(),
            f.report.distribution.mean(),
            f.report.sample_count
        );
    }
    println!("wrote fits.csv, fitted-timing.xml, calibrated-scenario.xml to {}", common.out.display());
    Ok(0)
}

fn verify(common: &Common, requirements: Option<&Path>, only: &[String]) -> Result<u8, Failure> {
    let scenario = load_scenario(common)?;
    let horizon = horizon(common, "5d")?;
    let text = match requirements {
        Some(p) => read(p)?,
        None => SHIPPED_REQUIREMENTS.to_string(),
    };
    let reqs = parse_requirements(&text)?;
    let sys = scenario.build_system()?;
    let report = verify_requirements(&sys, &reqs, only, horizon, common.seed)?;
    print!("{}", report.render_table());
    write(&common.out, "verdicts.csv", &report.to_csv())?;
    write(&common.out, "devices.csv", &report.devices_csv())?;
    Ok(if report.all_hold() { 0 } else { EXIT_VIOLATED })
}

fn run_sweep(common: &Common, parameter: &str, replicas: usize) -> Result<u8, Failure> {
    if replicas == 0 {
        return Err(Failure::usage("--replicas must be at least 1"));
    }
    let scenario = load_scenario(common)?;
    let horizon = horizon(common, "5d")?;
    let points = sweep(&scenario, parameter, replicas, horizon, common.seed)?;
    write(&common.out, &format!("sweep-{parameter}.csv"), &lifetime_csv(&points))?;
    write(&common.out, &format!("sweep-{parameter}-duty.csv"), &duty_cycle_csv(&points))?;
    for p in &points {
        println!("{parameter}={:<12} lifetime {:>9.3} h", p.value, p.lifetime_hours);
    }
    println!("spread {:.3} h", spread(&points));
    Ok(0)
}

fn report(common: &Common, replicas: usize) -> Result<u8, Failure> {
    if replicas == 0 {
        return Err(Failure::usage("--replicas must be at least 1"));
    }
    let scenario = load_scenario(common)?;
    let horizon = horizon(common, "5d")?;
    let mut csv = String::from(
        "rdc_protocol,device,type,role,lifetime_mean_h,work_lpm,work_cpu,work_tx,work_rx,energy_lpm,energy_cpu,energy_tx,energy_rx\n",
    );
    for protocol in RdcProtocol::ALL {
        let cfg = EnergyConfig { rdc_protocol: protocol, ..scenario.config };
        let sys = scenario.with_config(cfg).build_system()?;
        let runs = replicate_summaries(&sys, horizon, replicas, common.seed)?;
        let rows = device_rows(&sys, &runs)?;
        println!("{protocol}");
        println!("  {:<14} {:>10} {:>8} {:>8} {:>8} {:>8}", "device", "lf_h", "wLPM", "wCPU", "wTx", "wRx");
        for d in &rows {
            let w = d.working_duty_cycle;
            println!(
                "  {:<14} {:>10.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                d.name, d.lifetime_mean, w[0], w[1], w[2], w[3]
            );
            csv.push_str(&format!("{protocol},{},{},{},{:.6}", d.name, d.device_type, d.role, d.lifetime_mean));
            for m in OperatingMode::ALL {
                csv.push_str(&format!(",{:.6}", d.working_duty_cycle[m.index()]));
            }
            for m in OperatingMode::ALL {
                csv.push_str(&format!(",{:.6}", d.energy_duty_cycle[m.index()]));
            }
            csv.push('\n');
        }
    }
    write(&common.out, "report.csv", &csv)?;
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8, Failure> {
    let c = &cli.common;
    let body = || match &cli.command {
        Command::ValidateConfig { path } => validate_config(c, path.as_deref()),
        Command::Simulate { powertrace_period } => simulate(c, *powertrace_period),
        Command::Fit { trace } => fit(c, trace),
        Command::Verify { requirements, only } => verify(c, requirements.as_deref(), only),
        Command::Sweep { parameter, replicas } => run_sweep(c, parameter, *replicas),
        Command::Report { replicas } => report(c, *replicas),
    };
    if c.jobs == Some(0) {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    with_jobs(c.jobs, body)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_horizon;

    #[test]
    fn horizons() {
        assert_eq!(parse_horizon("90s").ok(), Some(90.0));
        assert_eq!(parse_horizon("2m").ok(), Some(120.0));
        assert_eq!(parse_horizon("1w").ok(), Some(604_800.0));
        assert_eq!(parse_horizon("5d").ok(), Some(432_000.0));
        for bad in ["0s", "", "5", "1.5h", "-1d", "3y", "d"] {
            assert!(parse_horizon(bad).is_err(), "{bad}");
        }
    }
}
