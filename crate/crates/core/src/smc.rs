//! Requirement properties over simulation runs and statistical model
//! checking: Wald's sequential test and Chernoff–Hoeffding estimation.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::energy::{lifetime_from_energy, DeviceProfile, EnergyError, EnergyLedger};
use crate::model::{OperatingMode, SystemModel};
use crate::sim::{is_working_time, replica_seed, run_summary, working_overlap, RunSummary, SimError, Trace};
use crate::stochastics::{rng_from_seed, substream_seed};

/// Requirements shipped with the building scenario.
pub const SHIPPED_REQUIREMENTS: &str = include_str!("../scenarios/requirements.toml");

#[derive(Debug, Error)]
pub enum SmcError {
    #[error("invalid property {id}: {reason}")]
    InvalidProperty { id: String, reason: String },
    #[error("invalid SMC configuration: {0}")]
    InvalidConfig(String),
    #[error("scope window of device {device} is empty")]
    EmptyScope { device: String },
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("unknown requirement id {0:?}")]
    UnknownRequirement(String),
    #[error("requirements file: {0}")]
    Requirements(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    WholeHorizon,
    WorkingHours,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::WholeHorizon => "whole-horizon",
            Scope::WorkingHours => "working-hours",
        }
    }
}

impl FromStr for Scope {
    type Err = SmcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole-horizon" => Ok(Scope::WholeHorizon),
            "working-hours" => Ok(Scope::WorkingHours),
            _ => Err(SmcError::Requirements(format!("unknown scope {s:?}; expected whole-horizon or working-hours"))),
        }
    }
}

/// Which duty cycle a time-share predicate compares: the fraction of time
/// spent in the mode, or the mode's share of the energy spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DutyCycleNotion {
    #[default]
    Time,
    Energy,
}

impl FromStr for DutyCycleNotion {
    type Err = SmcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time" => Ok(DutyCycleNotion::Time),
            "energy" => Ok(DutyCycleNotion::Energy),
            _ => Err(SmcError::Requirements(format!("unknown duty-cycle notion {s:?}; expected time or energy"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predicate {
    LifetimeAtLeast { hours: f64 },
    ModeTimeshareAtLeast { mode: OperatingMode, ratio: f64, scope: Scope },
    ModeTimeshareAtMost { mode: OperatingMode, ratio: f64, scope: Scope },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub id: String,
    pub predicate: Predicate,
    pub notion: DutyCycleNotion,
}

impl Property {
    pub fn new(id: impl Into<String>, predicate: Predicate) -> Result<Self, SmcError> {
        let id = id.into();
        let bad = |reason: &str| Err(SmcError::InvalidProperty { id: id.clone(), reason: reason.to_string() });
        match predicate {
            Predicate::LifetimeAtLeast { hours } if !(hours.is_finite() && hours > 0.0) => {
                return bad("hours must be positive");
            }
            Predicate::ModeTimeshareAtLeast { ratio, .. } | Predicate::ModeTimeshareAtMost { ratio, .. }
                if !(0.0..=1.0).contains(&ratio) =>
            {
                return bad("ratio must lie in [0, 1]");
            }
            _ => {}
        }
        Ok(Self { id, predicate, notion: DutyCycleNotion::Time })
    }

    pub fn with_notion(mut self, notion: DutyCycleNotion) -> Self {
        self.notion = notion;
        self
    }

    pub fn lifetime_at_least(id: &str, hours: f64) -> Result<Self, SmcError> {
        Self::new(id, Predicate::LifetimeAtLeast { hours })
    }

    pub fn timeshare_at_least(id: &str, mode: OperatingMode, ratio: f64, scope: Scope) -> Result<Self, SmcError> {
        Self::new(id, Predicate::ModeTimeshareAtLeast { mode, ratio, scope })
    }

    pub fn timeshare_at_most(id: &str, mode: OperatingMode, ratio: f64, scope: Scope) -> Result<Self, SmcError> {
        Self::new(id, Predicate::ModeTimeshareAtMost { mode, ratio, scope })
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.predicate {
            Predicate::LifetimeAtLeast { hours } => write!(f, "lf >= {hours} h"),
            Predicate::ModeTimeshareAtLeast { mode, ratio, scope } => {
                write!(f, "D_{mode} >= {}% ({})", ratio * 100.0, scope.name())
            }
            Predicate::ModeTimeshareAtMost { mode, ratio, scope } => {
                write!(f, "D_{mode} <= {}% ({})", ratio * 100.0, scope.name())
            }
        }
    }
}

/// Per-device totals a predicate needs, from either a full ledger or a
/// streaming summary. Working-hours fields are restricted to [8 h, 18 h).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceStats {
    pub name: String,
    pub window: f64,
    pub working_window: f64,
    pub mode_time: [f64; 4],
    pub working_mode_time: [f64; 4],
    pub peripheral_energy: f64,
    pub working_peripheral_energy: f64,
    pub profile: Arc<DeviceProfile>,
}

impl DeviceStats {
    pub fn from_ledger(ledger: &EnergyLedger, profile: &Arc<DeviceProfile>) -> Result<Self, SmcError> {
        let mut s = Self::empty(&ledger.device, ledger.window, profile);
        for i in &ledger.intervals {
            s.mode_time[i.mode.index()] += i.duration;
            s.working_mode_time[i.mode.index()] += working_overlap(i.start, i.end());
        }
        for (t, e) in &ledger.peripheral_events {
            let c = profile.peripheral_cost(e)?;
            s.peripheral_energy += c;
            if is_working_time(*t) {
                s.working_peripheral_energy += c;
            }
        }
        Ok(s)
    }

    pub fn from_summary(summary: &crate::sim::DeviceSummary, profile: &Arc<DeviceProfile>) -> Result<Self, SmcError> {
        let mut s = Self::empty(&summary.name, summary.window, profile);
        s.mode_time = summary.mode_time;
        s.working_mode_time = summary.working_mode_time;
        for (e, n) in &summary.peripheral_counts {
            s.peripheral_energy += profile.peripheral_cost(e)? * *n as f64;
        }
        for (e, n) in &summary.working_peripheral_counts {
            s.working_peripheral_energy += profile.peripheral_cost(e)? * *n as f64;
        }
        Ok(s)
    }

    fn empty(name: &str, window: (f64, f64), profile: &Arc<DeviceProfile>) -> Self {
        Self {
            name: name.to_string(),
            window: window.1 - window.0,
            working_window: working_overlap(window.0, window.1),
            mode_time: [0.0; 4],
            working_mode_time: [0.0; 4],
            peripheral_energy: 0.0,
            working_peripheral_energy: 0.0,
            profile: profile.clone(),
        }
    }

    fn mode_energy(&self, times: &[f64; 4]) -> [f64; 4] {
        OperatingMode::ALL.map(|m| times[m.index()] * self.profile.power(m))
    }

    pub fn total_energy(&self) -> f64 {
        self.mode_energy(&self.mode_time).iter().sum::<f64>() + self.peripheral_energy
    }

    pub fn lifetime(&self) -> Result<f64, SmcError> {
        Ok(lifetime_from_energy(&self.profile, self.total_energy(), self.window)?)
    }

    /// Duty cycle of `mode` over `scope`.
    pub fn duty_cycle(&self, mode: OperatingMode, scope: Scope, notion: DutyCycleNotion) -> Result<f64, SmcError> {
        let (len, times, per) = match scope {
            Scope::WholeHorizon => (self.window, &self.mode_time, self.peripheral_energy),
            Scope::WorkingHours => (self.working_window, &self.working_mode_time, self.working_peripheral_energy),
        };
        if len <= 0.0 {
            return Err(SmcError::EmptyScope { device: self.name.clone() });
        }
        match notion {
            DutyCycleNotion::Time => Ok(times[mode.index()] / len),
            DutyCycleNotion::Energy => {
                let e = self.mode_energy(times);
                let total = e.iter().sum::<f64>() + per;
                if total <= 0.0 {
                    return Err(SmcError::Energy(EnergyError::ZeroEnergy));
                }
                Ok(e[mode.index()] / total)
            }
        }
    }

    pub fn satisfies(&self, property: &Property) -> Result<bool, SmcError> {
        Ok(match property.predicate {
            Predicate::LifetimeAtLeast { hours } => self.lifetime()? >= hours,
            Predicate::ModeTimeshareAtLeast { mode, ratio, scope } => self.duty_cycle(mode, scope, property.notion)? >= ratio,
            Predicate::ModeTimeshareAtMost { mode, ratio, scope } => self.duty_cycle(mode, scope, property.notion)? <= ratio,
        })
    }
}

/// Evaluates `property` for device `device` of a full trace.
pub fn evaluate(property: &Property, trace: &Trace, device: usize) -> Result<bool, SmcError> {
    let d = trace.devices.get(device).ok_or_else(|| SmcError::UnknownDevice(device.to_string()))?;
    DeviceStats::from_ledger(&d.ledger, &d.profile)?.satisfies(property)
}

/// Evaluates `property` on a streaming summary; agrees with [`evaluate`].
pub fn evaluate_summary(
    property: &Property,
    summary: &RunSummary,
    system: &SystemModel,
    device: usize,
) -> Result<bool, SmcError> {
    let d = summary.devices.get(device).ok_or_else(|| SmcError::UnknownDevice(device.to_string()))?;
    DeviceStats::from_summary(d, &system.devices()[device].profile)?.satisfies(property)
}

/// Which device a Bernoulli sample observes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DeviceSelector {
    /// A device drawn uniformly per replica from the replica seed.
    #[default]
    Uniform,
    Named(String),
}

const SELECTOR_STREAM: u64 = 0x5e1e_c7;

impl DeviceSelector {
    pub fn select(&self, system: &SystemModel, replica_seed: u64) -> Result<usize, SmcError> {
        let n = system.devices().len();
        match self {
            DeviceSelector::Uniform if n == 0 => Err(SmcError::UnknownDevice("<no devices>".into())),
            DeviceSelector::Uniform => {
                Ok(rng_from_seed(substream_seed(replica_seed, SELECTOR_STREAM)).random_range(0..n))
            }
            DeviceSelector::Named(name) => system
                .devices()
                .iter()
                .position(|d| &d.name == name)
                .ok_or_else(|| SmcError::UnknownDevice(name.clone())),
        }
    }
}

impl FromStr for DeviceSelector {
    type Err = SmcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uniform" => DeviceSelector::Uniform,
            name => DeviceSelector::Named(name.to_string()),
        })
    }
}

impl fmt::Display for DeviceSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceSelector::Uniform => f.write_str("uniform"),
            DeviceSelector::Named(n) => f.write_str(n),
        }
    }
}

/// Test parameters. H0: p >= p0 against H1: p <= p1, with p1 <= theta <= p0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmcConfig {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    /// (p1, p0).
    pub indifference: (f64, f64),
    pub delta: f64,
    pub max_samples: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self { alpha: 0.05, beta: 0.05, theta: 0.9, indifference: (0.85, 0.95), delta: 0.05, max_samples: 100_000 }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<(), SmcError> {
        let (p1, p0) = self.indifference;
        let err = |m: String| Err(SmcError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return err(format!("alpha = {} must lie in (0, 0.5)", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 0.5) {
            return err(format!("beta = {} must lie in (0, 0.5)", self.beta));
        }
        if !(0.0 <= p1 && p1 <= self.theta && self.theta <= p0 && p0 <= 1.0) {
            return err(format!("need 0 <= p1 <= theta <= p0 <= 1, got p1 = {p1}, theta = {}, p0 = {p0}", self.theta));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return err(format!("delta = {} must be positive", self.delta));
        }
        if self.max_samples == 0 {
            return err("max_samples must be at least 1".into());
        }
        Ok(())
    }

    /// Symmetric indifference region of half-width `half` around `theta`.
    pub fn around(theta: f64, half: f64) -> Self {
        Self { theta, indifference: ((theta - half).max(0.0), (theta + half).min(1.0)), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerdictKind {
    AcceptH0,
    AcceptH1,
    Estimate(f64),
    /// Sample budget exhausted; carries the running success fraction.
    Inconclusive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub samples_used: usize,
    pub successes: usize,
    pub config: SmcConfig,
}

impl Verdict {
    pub fn p_hat(&self) -> f64 {
        self.successes as f64 / self.samples_used.max(1) as f64
    }

    /// H0 accepted, or estimate at least theta.
    pub fn holds(&self) -> bool {
        match self.kind {
            VerdictKind::AcceptH0 => true,
            VerdictKind::Estimate(p) => p >= self.config.theta,
            VerdictKind::AcceptH1 | VerdictKind::Inconclusive(_) => false,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            VerdictKind::AcceptH0 => "accept-h0",
            VerdictKind::AcceptH1 => "accept-h1",
            VerdictKind::Estimate(_) => "estimate",
            VerdictKind::Inconclusive(_) => "inconclusive",
        }
    }
}

/// N = ⌈ln(2/α) / (2δ²)⌉ samples give Pr(|p̂ − p| < δ) ≥ 1 − α.
pub fn chernoff_samples(delta: f64, alpha: f64) -> usize {
    ((2.0 / alpha).ln() / (2.0 * delta * delta)).ceil() as usize
}

/// Wald's sequential probability ratio test. `sample(i)` yields the i-th
/// Bernoulli outcome; outcomes are consumed in index order.
pub fn sprt<E>(mut sample: impl FnMut(usize) -> Result<bool, E>, cfg: &SmcConfig) -> Result<Verdict, E>
where
    E: From<SmcError>,
{
    cfg.validate()?;
    let (p1, p0) = cfg.indifference;
    if p1 >= p0 {
        return Err(SmcError::InvalidConfig(format!("sprt needs p1 < p0, got ({p1}, {p0})")).into());
    }
    let upper = ((1.0 - cfg.beta) / cfg.alpha).ln();
    let lower = (cfg.beta / (1.0 - cfg.alpha)).ln();
    let on_success = (p1 / p0).ln();
    let on_failure = ((1.0 - p1) / (1.0 - p0)).ln();
    let mut llr = 0.0;
    let mut successes = 0;
    for i in 0..cfg.max_samples {
        if sample(i)? {
            successes += 1;
            llr += on_success;
        } else {
            llr += on_failure;
        }
        let kind = if llr >= upper {
            Some(VerdictKind::AcceptH1)
        } else if llr <= lower {
            Some(VerdictKind::AcceptH0)
        } else {
            None
        };
        if let Some(kind) = kind {
            return Ok(Verdict { kind, samples_used: i + 1, successes, config: *cfg });
        }
    }
    let n = cfg.max_samples;
    Ok(Verdict {
        kind: VerdictKind::Inconclusive(successes as f64 / n as f64),
        samples_used: n,
        successes,
        config: *cfg,
    })
}

/// Chernoff–Hoeffding estimate with `cfg.delta` and `cfg.alpha`.
pub fn estimate<E>(mut sample: impl FnMut(usize) -> Result<bool, E>, cfg: &SmcConfig) -> Result<Verdict, E>
where
    E: From<SmcError>,
{
    cfg.validate()?;
    let n = chernoff_samples(cfg.delta, cfg.alpha);
    let mut successes = 0;
    for i in 0..n {
        successes += usize::from(sample(i)?);
    }
    Ok(Verdict { kind: VerdictKind::Estimate(successes as f64 / n as f64), samples_used: n, successes, config: *cfg })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sprt,
    Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Requirement {
    pub property: Property,
    pub method: Method,
    pub config: SmcConfig,
    pub selector: DeviceSelector,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SmcSection {
    alpha: Option<f64>,
    beta: Option<f64>,
    delta: Option<f64>,
    max_samples: Option<usize>,
    method: Option<String>,
    device: Option<String>,
    duty_cycle: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RequirementEntry {
    id: String,
    #[serde(rename = "type")]
    kind: String,
    hours: Option<f64>,
    mode: Option<String>,
    ratio: Option<f64>,
    scope: Option<String>,
    theta: Option<f64>,
    indifference: Option<(f64, f64)>,
    method: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    delta: Option<f64>,
    max_samples: Option<usize>,
    device: Option<String>,
    duty_cycle: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequirementsFile {
    #[serde(default)]
    smc: SmcSection,
    #[serde(default)]
    requirement: Vec<RequirementEntry>,
}

/// Parses a requirements file (TOML). Schema: an optional `[smc]` table of
/// defaults and one `[[requirement]]` table per property.
pub fn parse_requirements(text: &str) -> Result<Vec<Requirement>, SmcError> {
    let file: RequirementsFile = toml::from_str(text).map_err(|e| SmcError::Requirements(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for r in file.requirement {
        if !seen.insert(r.id.clone()) {
            return Err(SmcError::Requirements(format!("duplicate requirement id {:?}", r.id)));
        }
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| SmcError::Requirements(format!("requirement {:?} needs `{what}`", r.id)))
        };
        let mode = || -> Result<OperatingMode, SmcError> {
            let m = r.mode.as_deref().ok_or_else(|| SmcError::Requirements(format!("requirement {:?} needs `mode`", r.id)))?;
            OperatingMode::from_name(m).ok_or_else(|| SmcError::Requirements(format!("unknown mode {m:?}")))
        };
        let scope: Scope = r.scope.as_deref().unwrap_or("whole-horizon").parse()?;
        let predicate = match r.kind.as_str() {
            "lifetime_at_least" => Predicate::LifetimeAtLeast { hours: need(r.hours, "hours")? },
            "mode_timeshare_at_least" => Predicate::ModeTimeshareAtLeast { mode: mode()?, ratio: need(r.ratio, "ratio")?, scope },
            "mode_timeshare_at_most" => Predicate::ModeTimeshareAtMost { mode: mode()?, ratio: need(r.ratio, "ratio")?, scope },
            other => {
                return Err(SmcError::Requirements(format!(
                    "unknown requirement type {other:?}; expected lifetime_at_least, mode_timeshare_at_least or mode_timeshare_at_most"
                )))
            }
        };
        let notion: DutyCycleNotion = r.duty_cycle.as_deref().or(file.smc.duty_cycle.as_deref()).unwrap_or("time").parse()?;
        let property = Property::new(r.id.clone(), predicate)?.with_notion(notion);
        let method = match r.method.as_deref().or(file.smc.method.as_deref()).unwrap_or("estimate") {
            "sprt" => Method::Sprt,
            "estimate" => Method::Estimate,
            m => return Err(SmcError::Requirements(format!("unknown method {m:?}; expected sprt or estimate"))),
        };
        let d = SmcConfig::default();
        let theta = r.theta.unwrap_or(d.theta);
        let half = 0.05;
        let config = SmcConfig {
            alpha: r.alpha.or(file.smc.alpha).unwrap_or(d.alpha),
            beta: r.beta.or(file.smc.beta).unwrap_or(d.beta),
            theta,
            indifference: r.indifference.unwrap_or(((theta - half).max(0.0), (theta + half).min(1.0))),
            delta: r.delta.or(file.smc.delta).unwrap_or(d.delta),
            max_samples: r.max_samples.or(file.smc.max_samples).unwrap_or(d.max_samples),
        };
        config.validate()?;
        let selector = r.device.as_deref().or(file.smc.device.as_deref()).unwrap_or("uniform").parse()?;
        out.push(Requirement { property, method, config, selector });
    }
    Ok(out)
}

/// Replica summaries computed on demand, in parallel chunks, shared by
/// every requirement so all properties observe the same runs.
pub struct ReplicaPool<'a> {
    system: &'a SystemModel,
    horizon: f64,
    root_seed: u64,
    chunk: usize,
    runs: Vec<RunSummary>,
}

impl<'a> ReplicaPool<'a> {
    pub fn new(system: &'a SystemModel, horizon: f64, root_seed: u64) -> Self {
        let chunk = rayon::current_num_threads().max(1) * 4;
        Self { system, horizon, root_seed, chunk, runs: Vec::new() }
    }

    pub fn get(&mut self, i: usize) -> Result<&RunSummary, SmcError> {
        while self.runs.len() <= i {
            let from = self.runs.len();
            let to = (i + 1).max(from + self.chunk);
            let batch: Result<Vec<RunSummary>, SimError> = (from..to)
                .into_par_iter()
                .map(|k| run_summary(self.system, self.horizon, replica_seed(self.root_seed, k as u64)))
                .collect();
            self.runs.extend(batch?);
        }
        Ok(&self.runs[i])
    }

    pub fn runs(&self) -> &[RunSummary] {
        &self.runs
    }

    /// Bernoulli outcome of `requirement` on replica `i`.
    pub fn outcome(&mut self, requirement: &Requirement, i: usize) -> Result<bool, SmcError> {
        let system = self.system;
        let run = self.get(i)?;
        let device = requirement.selector.select(system, run.seed)?;
        evaluate_summary(&requirement.property, run, system, device)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequirementResult {
    pub id: String,
    pub property: String,
    pub verdict: Verdict,
}

/// Mean per-device figures over the replicas used for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRow {
    pub name: String,
    pub device_type: String,
    pub role: String,
    pub lifetime_mean: f64,
    pub lifetime_min: f64,
    pub lifetime_max: f64,
    /// Working-hours time share per mode (LPM, CPU, Tx, Rx).
    pub working_duty_cycle: [f64; 4],
    /// Whole-horizon energy share per mode.
    pub energy_duty_cycle: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub results: Vec<RequirementResult>,
    pub devices: Vec<DeviceRow>,
    pub replicas: usize,
}

impl Report {
    pub fn all_hold(&self) -> bool {
        self.results.iter().all(|r| r.verdict.holds())
    }

    /// `requirement,verdict,p_hat,samples`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("requirement,verdict,p_hat,samples\n");
        for r in &self.results {
            let _ = writeln!(s, "{},{},{:.6},{}", r.id, r.verdict.label(), r.verdict.p_hat(), r.verdict.samples_used);
        }
        s
    }

    pub fn devices_csv(&self) -> String {
        let mut s = String::from(
            "device,type,role,lifetime_mean_h,lifetime_min_h,lifetime_max_h,work_lpm,work_cpu,work_tx,work_rx,energy_lpm,energy_cpu,energy_tx,energy_rx\n",
        );
        for d in &self.devices {
            let _ = write!(s, "{},{},{},{:.6},{:.6},{:.6}", d.name, d.device_type, d.role, d.lifetime_mean, d.lifetime_min, d.lifetime_max);
            for v in d.working_duty_cycle.iter().chain(&d.energy_duty_cycle) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<32} {:<13} {:>7} {:>8} {:>6}", "requirement", "property", "verdict", "p_hat", "samples", "holds");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<12} {:<32} {:<13} {:>7.4} {:>8} {:>6}",
                r.id,
                r.property,
                r.verdict.label(),
                r.verdict.p_hat(),
                r.verdict.samples_used,
                if r.verdict.holds() { "yes" } else { "no" }
            );
        }
        let _ = writeln!(s, "\nper-device means over {} replicas", self.replicas);
        let _ = writeln!(
            s,
            "{:<14} {:<10} {:<10} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7} {:>7}",
            "device", "type", "role", "lf_mean_h", "lf_min_h", "lf_max_h", "wLPM", "wCPU", "wTx", "wRx"
        );
        for d in &self.devices {
            let w = d.working_duty_cycle;
            let _ = writeln!(
                s,
                "{:<14} {:<10} {:<10} {:>9.1} {:>9.1} {:>9.1} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                d.name, d.device_type, d.role, d.lifetime_mean, d.lifetime_min, d.lifetime_max, w[0], w[1], w[2], w[3]
            );
        }
        s
    }
}

/// Per-device means over a set of runs.
pub fn device_rows(system: &SystemModel, runs: &[RunSummary]) -> Result<Vec<DeviceRow>, SmcError> {
    let mut rows = Vec::new();
    for (k, dev) in system.devices().iter().enumerate() {
        let mut lts = Vec::with_capacity(runs.len());
        let mut work = [0.0; 4];
        let mut energy = [0.0; 4];
        for run in runs {
            let st = DeviceStats::from_summary(&run.devices[k], &dev.profile)?;
            lts.push(st.lifetime()?);
            for m in OperatingMode::ALL {
                work[m.index()] += st.duty_cycle(m, Scope::WorkingHours, DutyCycleNotion::Time).unwrap_or(0.0);
                energy[m.index()] += st.duty_cycle(m, Scope::WholeHorizon, DutyCycleNotion::Energy)?;
            }
        }
        let n = runs.len().max(1) as f64;
        rows.push(DeviceRow {
            name: dev.name.clone(),
            device_type: dev.device_type.clone(),
            role: dev.role.clone(),
            lifetime_mean: lts.iter().sum::<f64>() / n,
            lifetime_min: lts.iter().copied().fold(f64::INFINITY, f64::min),
            lifetime_max: lts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            working_duty_cycle: work.map(|v| v / n),
            energy_duty_cycle: energy.map(|v| v / n),
        });
    }
    Ok(rows)
}

/// Checks every requirement (or those named in `only`) against replicas of
/// `system`. Replica `i` is shared by all requirements.
pub fn verify_requirements(
    system: &SystemModel,
    requirements: &[Requirement],
    only: &[String],
    horizon: f64,
    root_seed: u64,
) -> Result<Report, SmcError> {
    let by_id: BTreeMap<&str, &Requirement> = requirements.iter().map(|r| (r.property.id.as_str(), r)).collect();
    let selected: Vec<&Requirement> = if only.is_empty() {
        requirements.iter().collect()
    } else {
        only.iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| SmcError::UnknownRequirement(id.clone())))
            .collect::<Result<_, _>>()?
    };
    let mut pool = ReplicaPool::new(system, horizon, root_seed);
    let mut results = Vec::new();
    for req in selected {
        let sample = |i: usize| pool.outcome(req, i);
        let verdict = match req.method {
            Method::Sprt => sprt(sample, &req.config)?,
            Method::Estimate => estimate(sample, &req.config)?,
        };
        results.push(RequirementResult { id: req.property.id.clone(), property: req.property.to_string(), verdict });
    }
    if pool.runs().is_empty() {
        pool.get(0)?;
    }
    let devices = device_rows(system, pool.runs())?;
    Ok(Report { results, devices, replicas: pool.runs().len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::ModeInterval;
    use rand::Rng;


    fn profile() -> Arc<DeviceProfile> {
        Arc::new(DeviceProfile::new("Z1", [5.1e-6, 0.008, 0.0174, 0.0188], [None; 4], 2.5, 3.0, BTreeMap::new()).unwrap())
    }

    fn stats(intervals: &[(OperatingMode, f64, f64)], window: (f64, f64)) -> DeviceStats {
        let mut l = EnergyLedger::new("d", window);
        for &(mode, start, duration) in intervals {
            l.intervals.push(ModeInterval { mode, start, duration });
        }
        DeviceStats::from_ledger(&l, &profile()).unwrap()
    }

    fn phi2() -> Property {
        Property::timeshare_at_least("phi2", OperatingMode::Lpm, 0.9, Scope::WorkingHours).unwrap()
    }

    fn phi3() -> Property {
        Property::timeshare_at_most("phi3", OperatingMode::Rx, 0.2, Scope::WorkingHours).unwrap()
    }

    #[test]
    fn always_lpm_satisfies_phi2() {
        let s = stats(&[(OperatingMode::Lpm, 0.0, 86_400.0)], (0.0, 86_400.0));
        assert!(s.satisfies(&phi2()).unwrap());
    }

    #[test]
    fn always_rx_violates_phi3() {
        let s = stats(&[(OperatingMode::Rx, 0.0, 86_400.0)], (0.0, 86_400.0));
        assert!(!s.satisfies(&phi3()).unwrap());
    }

    #[test]
    fn lpm_95_rx_5_of_working_hours() {
        // Working hours of day 1 span 28800..64800 (36000 s): 34200 LPM, 1800 Rx.
        let s = stats(&[(OperatingMode::Lpm, 28_800.0, 34_200.0), (OperatingMode::Rx, 63_000.0, 1_800.0)], (0.0, 86_400.0));
        let d_lpm = s.duty_cycle(OperatingMode::Lpm, Scope::WorkingHours, DutyCycleNotion::Time).unwrap();
        assert!((d_lpm - 0.95).abs() < 1e-12);
        assert!(s.satisfies(&phi2()).unwrap());
        assert!(s.satisfies(&phi3()).unwrap());
    }

    #[test]
    fn empty_working_scope_is_an_error() {
        let s = stats(&[(OperatingMode::Lpm, 0.0, 3_600.0)], (0.0, 3_600.0));
        assert!(matches!(s.satisfies(&phi2()), Err(SmcError::EmptyScope { .. })));
    }

    #[test]
    fn invalid_properties() {
        assert!(Property::lifetime_at_least("x", 0.0).is_err());
        assert!(Property::timeshare_at_most("x", OperatingMode::Rx, 1.2, Scope::WholeHorizon).is_err());
    }

    #[test]
    fn chernoff_sample_sizes() {
        assert_eq!(chernoff_samples(0.05, 0.05), 738);
        assert_eq!(chernoff_samples(0.01, 0.05), 18_445);
    }

    #[test]
    fn sprt_degenerate_samplers() {
        let cfg = SmcConfig { theta: 0.5, indifference: (0.4, 0.6), ..SmcConfig::default() };
        let v = sprt(|_| Ok::<_, SmcError>(true), &cfg).unwrap();
        assert_eq!(v.kind, VerdictKind::AcceptH0);
        assert!(v.samples_used <= 10, "{}", v.samples_used);
        let v = sprt(|_| Ok::<_, SmcError>(false), &cfg).unwrap();
        assert_eq!(v.kind, VerdictKind::AcceptH1);
    }

    #[test]
    fn sprt_inconclusive_at_budget() {
        let cfg = SmcConfig { theta: 0.5, indifference: (0.49, 0.51), max_samples: 10, ..SmcConfig::default() };
        let v = sprt(|i| Ok::<_, SmcError>(i % 2 == 0), &cfg).unwrap();
        assert_eq!(v.kind, VerdictKind::Inconclusive(0.5));
        assert_eq!(v.samples_used, 10);
    }

    #[test]
    fn sprt_bernoulli_point_nine() {
        let cfg = SmcConfig { alpha: 0.01, beta: 0.01, theta: 0.5, indifference: (0.45, 0.55), ..SmcConfig::default() };
        let mut accepted = 0;
        for run in 0..200u64 {
            let mut rng = rng_from_seed(substream_seed(99, run));
            let v = sprt(|_| Ok::<_, SmcError>(rng.random_bool(0.9)), &cfg).unwrap();
            accepted += usize::from(v.kind == VerdictKind::AcceptH0);
        }
        assert!(accepted >= 198, "{accepted}");
    }

    #[test]
    fn estimate_constant_true() {
        let v = estimate(|_| Ok::<_, SmcError>(true), &SmcConfig::default()).unwrap();
        assert_eq!(v.kind, VerdictKind::Estimate(1.0));
        assert_eq!(v.samples_used, 738);
    }

    #[test]
    fn config_validation() {
        assert!(SmcConfig::default().validate().is_ok());
        assert!(SmcConfig { alpha: 0.5, ..SmcConfig::default() }.validate().is_err());
        assert!(SmcConfig { indifference: (0.95, 0.85), ..SmcConfig::default() }.validate().is_err());
        assert!(SmcConfig { delta: 0.0, ..SmcConfig::default() }.validate().is_err());
    }

    #[test]
    fn shipped_requirements_parse() {
        let reqs = parse_requirements(SHIPPED_REQUIREMENTS).unwrap();
        let ids: Vec<&str> = reqs.iter().map(|r| r.property.id.as_str()).collect();
        assert_eq!(ids, ["phi1", "phi2", "phi3"]);
        assert!(reqs.iter().all(|r| r.method == Method::Estimate && r.selector == DeviceSelector::Uniform));
    }

    #[test]
    fn requirements_parse() {
        let text = r#"
            [smc]
            alpha = 0.05
            delta = 0.05

            [[requirement]]
            id = "phi1"
            type = "lifetime_at_least"
            hours = 168
            theta = 0.8

            [[requirement]]
            id = "phi3"
            type = "mode_timeshare_at_most"
            mode = "Rx"
            ratio = 0.2
            scope = "working-hours"
            method = "sprt"
            indifference = [0.6, 0.8]
            theta = 0.7
        "#;
        let reqs = parse_requirements(text).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].method, Method::Estimate);
        assert_eq!(reqs[1].method, Method::Sprt);
        assert_eq!(reqs[1].config.indifference, (0.6, 0.8));
        assert!(parse_requirements("[[requirement]]\nid = \"x\"\ntype = \"bogus\"\n").is_err());
        assert!(parse_requirements("[[requirement]]\nid = \"x\"\ntype = \"lifetime_at_least\"\n").is_err());
    }
}
