//! One-parameter sweeps of a scenario across the parameter's full range.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::OperatingMode;
use crate::scenario::{EnergyConfig, Scenario, ScenarioError, PARAMETER_NAMES};
use crate::sim::{replicate_summaries, SimError};
use crate::smc::{device_rows, DeviceRow, SmcError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown parameter {0:?}; expected one of rdc-protocol, rdc-frequency, retransmissions, service-protocol, header-size, interference")]
    UnknownParameter(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Smc(#[from] SmcError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    /// Mean lifetime over devices and replicas.
    pub lifetime_hours: f64,
    pub devices: Vec<DeviceRow>,
}

/// Runs `replicas` replicas per value of `parameter`, all other parameters
/// kept at the scenario's values. Every value reuses the same replica seeds.
pub fn sweep(
    scenario: &Scenario,
    parameter: &str,
    replicas: usize,
    horizon: f64,
    root_seed: u64,
) -> Result<Vec<SweepPoint>, SweepError> {
    if !PARAMETER_NAMES.contains(&parameter) {
        return Err(SweepError::UnknownParameter(parameter.to_string()));
    }
    let values = EnergyConfig::sweep_values(parameter).expect("known parameter");
    let mut out = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = scenario.config;
        cfg.set(parameter, &value)?;
        let sys = scenario.with_config(cfg).build_system()?;
        let runs = replicate_summaries(&sys, horizon, replicas, root_seed)?;
        let devices = device_rows(&sys, &runs)?;
        let lifetime_hours = devices.iter().map(|d| d.lifetime_mean).sum::<f64>() / devices.len().max(1) as f64;
        out.push(SweepPoint { value, lifetime_hours, devices });
    }
    Ok(out)
}

/// max − min of the mean lifetime across sweep points.
pub fn spread(points: &[SweepPoint]) -> f64 {
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.lifetime_hours), hi.max(p.lifetime_hours)));
    if points.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// `param_value,lifetime_hours`.
pub fn lifetime_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("param_value,lifetime_hours\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6}", p.value, p.lifetime_hours);
    }
    s
}

/// Per value, device and mode: lifetime plus working-hours time share and
/// whole-horizon energy share.
pub fn duty_cycle_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("param_value,device,lifetime_hours,mode,duty_cycle_time_working,duty_cycle_energy\n");
    for p in points {
        for d in &p.devices {
            for m in OperatingMode::ALL {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{},{:.6},{:.6}",
                    p.value,
                    d.name,
                    d.lifetime_mean,
                    m,
                    d.working_duty_cycle[m.index()],
                    d.energy_duty_cycle[m.index()]
                );
            }
        }
    }
    s
}
