//! CSV artifacts: mode traces, powertrace tick logs, per-device energy
//! summaries, and distribution fitting from an exported trace.
//!
//! Every real number is written with six fractional digits and every line
//! ends with `\n`, so identical runs give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::energy::EnergyError;
use crate::model::{OperatingMode, TimingEntry, TimingKey};
use crate::scenario::FittedTiming;
use crate::sim::{PowertraceRecord, Trace};
use crate::smc::{DeviceStats, DutyCycleNotion, Scope, SmcError};
use crate::stochastics::{
    fit_normal, fit_poisson_quantized, select_fit, Distribution, DistributionKind, FitReport, StochasticsError,
    DEFAULT_POISSON_QUANTUM,
};

pub const TRACE_HEADER: &str = "time_s,device,mode,duration_s";
pub const POWERTRACE_HEADER: &str = "time_s,device,cpu,lpm,tx,rx";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("fitting {device_type}/{mode}: {source}")]
    Fit { device_type: String, mode: OperatingMode, source: StochasticsError },
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Smc(#[from] SmcError),
}

/// All mode intervals, ordered by start time then device order.
pub fn trace_csv(trace: &Trace) -> String {
    let mut rows: Vec<(f64, usize, usize)> = Vec::new();
    for (d, dev) in trace.devices.iter().enumerate() {
        rows.extend((0..dev.ledger.intervals.len()).map(|k| (dev.ledger.intervals[k].start, d, k)));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut s = String::with_capacity(rows.len() * 40 + 32);
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for (_, d, k) in rows {
        let dev = &trace.devices[d];
        let i = &dev.ledger.intervals[k];
        let _ = writeln!(s, "{:.6},{},{},{:.6}", i.start, dev.name, i.mode, i.duration);
    }
    s
}

pub fn powertrace_csv(trace: &Trace, records: &[PowertraceRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 48 + 32);
    s.push_str(POWERTRACE_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{}.{:06},{},{},{},{},{}",
            r.time_us / 1_000_000,
            r.time_us % 1_000_000,
            trace.devices[r.device].name,
            r.cpu,
            r.lpm,
            r.tx,
            r.rx
        );
    }
    s
}

pub const SUMMARY_HEADER: &str = "device,type,role,window_s,time_lpm_s,time_cpu_s,time_tx_s,time_rx_s,\
duty_time_lpm,duty_time_cpu,duty_time_tx,duty_time_rx,\
duty_energy_lpm,duty_energy_cpu,duty_energy_tx,duty_energy_rx,\
work_duty_time_lpm,work_duty_time_cpu,work_duty_time_tx,work_duty_time_rx,\
peripheral_j,total_energy_j,lifetime_h";

/// One row per device: mode times, both duty-cycle readings, energy, lifetime.
pub fn summary_csv(trace: &Trace) -> Result<String, ExportError> {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for dev in &trace.devices {
        let st = DeviceStats::from_ledger(&dev.ledger, &dev.profile)?;
        let _ = write!(s, "{},{},{},{:.6}", dev.name, dev.device_type, dev.role, st.window);
        for m in OperatingMode::ALL {
            let _ = write!(s, ",{:.6}", st.mode_time[m.index()]);
        }
        for m in OperatingMode::ALL {
            let _ = write!(s, ",{:.6}", st.duty_cycle(m, Scope::WholeHorizon, DutyCycleNotion::Time)?);
        }
        for m in OperatingMode::ALL {
            let _ = write!(s, ",{:.6}", st.duty_cycle(m, Scope::WholeHorizon, DutyCycleNotion::Energy)?);
        }
        for m in OperatingMode::ALL {
            // NaN marks a horizon without working hours.
            let v = st.duty_cycle(m, Scope::WorkingHours, DutyCycleNotion::Time).unwrap_or(f64::NAN);
            let _ = write!(s, ",{v:.6}");
        }
        let _ = writeln!(s, ",{:.6},{:.6},{:.6}", st.peripheral_energy, st.total_energy(), st.lifetime()?);
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub device: String,
    pub mode: OperatingMode,
    pub duration: f64,
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>, ExportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        _ => return Err(ExportError::Parse { line: 1, reason: format!("expected header {TRACE_HEADER:?}") }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| ExportError::Parse { line: i + 1, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0);
        rows.push(TraceRow {
            time: num(f[0]).ok_or_else(|| bad(format!("bad time {:?}", f[0])))?,
            device: f[1].to_string(),
            mode: OperatingMode::from_name(f[2]).ok_or_else(|| bad(format!("bad mode {:?}", f[2])))?,
            duration: num(f[3]).ok_or_else(|| bad(format!("bad duration {:?}", f[3])))?,
        });
    }
    Ok(rows)
}

/// Fitted interval durations of one (device type, mode) group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeFit {
    pub device_type: String,
    pub mode: OperatingMode,
    pub report: FitReport,
}

/// Preferred family per mode: counts of 1 ms quanta for CPU and Tx,
/// normal for LPM and Rx.
pub fn preferred_family(mode: OperatingMode) -> DistributionKind {
    match mode {
        OperatingMode::Cpu | OperatingMode::Tx => DistributionKind::Poisson,
        OperatingMode::Lpm | OperatingMode::Rx => DistributionKind::Normal,
    }
}

/// Fits the preferred family first and falls back to the best chi-square
/// among the others only when the preferred fit is impossible. Constant
/// samples give a Dirac fit. Poisson fits round durations to the 1 ms quantum.
pub fn fit_mode(samples: &[f64], mode: OperatingMode) -> Result<FitReport, StochasticsError> {
    if samples.len() >= 2 && samples.iter().all(|&x| x == samples[0]) {
        return Ok(FitReport {
            distribution: Distribution::dirac(samples[0])?,
            sample_count: samples.len(),
            chi_square: 0.0,
            degrees_of_freedom: 0,
        });
    }
    let q = DEFAULT_POISSON_QUANTUM;
    let preferred = match preferred_family(mode) {
        DistributionKind::Poisson => {
            let rounded: Vec<f64> = samples.iter().map(|x| (x / q).round() * q).collect();
            fit_poisson_quantized(&rounded, q)
        }
        _ => fit_normal(samples),
    };
    match preferred {
        Ok(r) => Ok(r),
        Err(_) if samples.len() >= crate::stochastics::SELECT_FIT_MIN_SAMPLES => select_fit(
            samples,
            &[DistributionKind::Normal, DistributionKind::Exponential, DistributionKind::Uniform],
        ),
        Err(e) => Err(e),
    }
}

/// Groups trace rows by (device type, mode) and fits each group.
/// Groups with fewer than two intervals are skipped.
pub fn fit_trace(rows: &[TraceRow], type_of: impl Fn(&str) -> String) -> Result<Vec<ModeFit>, ExportError> {
    let mut groups: BTreeMap<(String, OperatingMode), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((type_of(&r.device), r.mode)).or_default().push(r.duration);
    }
    let mut out = Vec::new();
    for ((device_type, mode), samples) in groups {
        if samples.len() < 2 {
            continue;
        }
        let report = fit_mode(&samples, mode)
            .map_err(|source| ExportError::Fit { device_type: device_type.clone(), mode, source })?;
        out.push(ModeFit { device_type, mode, report });
    }
    Ok(out)
}

/// Arc whose duration a mode's interval fit calibrates. CPU and Tx intervals
/// are single arc sojourns; LPM intervals are sleeps cut short by wake-ups
/// and Rx intervals merge listening with receptions, so their fits describe
/// the trace but are poor arc calibrations.
pub fn arc_for_mode(mode: OperatingMode) -> TimingKey {
    match mode {
        OperatingMode::Cpu => TimingKey::SndPacket,
        OperatingMode::Tx => TimingKey::TxSojourn,
        OperatingMode::Lpm => TimingKey::LpmSleep,
        OperatingMode::Rx => TimingKey::RxListen,
    }
}

/// Modes whose fits are applied by default.
pub const CALIBRATED_MODES: [OperatingMode; 2] = [OperatingMode::Cpu, OperatingMode::Tx];

/// Scenario overrides for the given fits, restricted to `modes`.
pub fn fits_to_timing(fits: &[ModeFit], modes: &[OperatingMode]) -> FittedTiming {
    fits.iter()
        .filter(|f| modes.contains(&f.mode))
        .map(|f| ((f.device_type.clone(), arc_for_mode(f.mode)), TimingEntry::new(f.report.distribution.clone())))
        .collect()
}

pub const FIT_HEADER: &str = "device_type,mode,arc,distribution,parameters,mean_s,samples,chi_square,dof";

pub fn fits_csv(fits: &[ModeFit]) -> String {
    let mut s = String::from(FIT_HEADER);
    s.push('\n');
    for f in fits {
        let params: Vec<String> = f.report.parameters().iter().map(|p| format!("{p:.6}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{:.6},{}",
            f.device_type,
            f.mode,
            arc_for_mode(f.mode).name(),
            f.report.kind().name(),
            params.join(" "),
            f.report.distribution.mean(),
            f.report.sample_count,
            f.report.chi_square,
            f.report.degrees_of_freedom
        );
    }
    s
}
