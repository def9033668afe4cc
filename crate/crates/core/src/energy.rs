//! Energy accounting over mode ledgers: per-mode energy, total energy with
//! peripheral costs, the two duty-cycle readings and battery lifetime.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::model::OperatingMode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("profile {profile}: {field} must be strictly positive, got {value}")]
    NonPositive { profile: String, field: String, value: f64 },
    #[error("profile {profile}: LPM current ({lpm} A) must be below {mode} current ({other} A)")]
    LpmNotCheapest { profile: String, mode: OperatingMode, lpm: f64, other: f64 },
    #[error("profile {profile}: peripheral event {event:?} has invalid cost {cost} J")]
    BadPeripheralCost { profile: String, event: String, cost: f64 },
    #[error("peripheral event {event:?} has no cost entry in profile {profile}")]
    UnknownPeripheral { profile: String, event: String },
    #[error("total energy is zero, duty cycle ratio is undefined")]
    ZeroEnergy,
    #[error("observation window has zero length")]
    EmptyWindow,
}

/// Electrical characteristics of one device type.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    /// Current draw per mode in amperes, indexed by [`OperatingMode::index`].
    pub current: [f64; 4],
    /// Supply voltage per mode in volts.
    pub voltage: [f64; 4],
    /// Battery capacity in ampere-hours.
    pub battery_capacity: f64,
    pub vcc: f64,
    /// Joules charged per peripheral event.
    pub peripheral_costs: BTreeMap<String, f64>,
}

impl DeviceProfile {
    /// Builds and validates a profile. A `None` voltage defaults to `vcc`.
    pub fn new(
        name: impl Into<String>,
        current: [f64; 4],
        voltage: [Option<f64>; 4],
        battery_capacity: f64,
        vcc: f64,
        peripheral_costs: BTreeMap<String, f64>,
    ) -> Result<Self, EnergyError> {
        let profile = Self {
            name: name.into(),
            current,
            voltage: voltage.map(|v| v.unwrap_or(vcc)),
            battery_capacity,
            vcc,
            peripheral_costs,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        let positive = |field: String, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(EnergyError::NonPositive { profile: self.name.clone(), field, value })
            }
        };
        for mode in OperatingMode::ALL {
            positive(format!("current[{mode}]"), self.current[mode.index()])?;
            positive(format!("voltage[{mode}]"), self.voltage[mode.index()])?;
        }
        positive("battery capacity".into(), self.battery_capacity)?;
        positive("vcc".into(), self.vcc)?;
        let lpm = self.current[OperatingMode::Lpm.index()];
        for mode in [OperatingMode::Rx, OperatingMode::Tx] {
            let other = self.current[mode.index()];
            if lpm >= other {
                return Err(EnergyError::LpmNotCheapest { profile: self.name.clone(), mode, lpm, other });
            }
        }
        for (event, &cost) in &self.peripheral_costs {
            if !(cost.is_finite() && cost >= 0.0) {
                return Err(EnergyError::BadPeripheralCost { profile: self.name.clone(), event: event.clone(), cost });
            }
        }
        Ok(())
    }

    /// Power draw in watts while in `mode`.
    #[inline]
    pub fn power(&self, mode: OperatingMode) -> f64 {
        self.current[mode.index()] * self.voltage[mode.index()]
    }

    pub fn peripheral_cost(&self, event: &str) -> Result<f64, EnergyError> {
        self.peripheral_costs
            .get(event)
            .copied()
            .ok_or_else(|| EnergyError::UnknownPeripheral { profile: self.name.clone(), event: event.to_string() })
    }

    /// Battery energy in joules: C_batt (Ah) · Vcc · 3600.
    pub fn battery_energy(&self) -> f64 {
        self.battery_capacity * self.vcc * 3600.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeInterval {
    pub mode: OperatingMode,
    pub start: f64,
    pub duration: f64,
}

impl ModeInterval {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Time-ordered, non-overlapping mode intervals of one device inside a window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyLedger {
    pub device: String,
    pub intervals: Vec<ModeInterval>,
    pub peripheral_events: Vec<(f64, Arc<str>)>,
    pub window: (f64, f64),
}

impl EnergyLedger {
    pub fn new(device: impl Into<String>, window: (f64, f64)) -> Self {
        Self { device: device.into(), intervals: Vec::new(), peripheral_events: Vec::new(), window }
    }

    pub fn window_length(&self) -> f64 {
        self.window.1 - self.window.0
    }

    /// N_y: number of intervals spent in `mode`.
    pub fn visits(&self, mode: OperatingMode) -> usize {
        self.intervals.iter().filter(|i| i.mode == mode).count()
    }

    pub fn mode_time(&self, mode: OperatingMode) -> f64 {
        self.intervals.iter().filter(|i| i.mode == mode).fold(0.0, |acc, i| acc + i.duration)
    }

    /// Restriction of the ledger to `[from, to)`, clipping intervals that straddle the bounds.
    pub fn sub_window(&self, from: f64, to: f64) -> EnergyLedger {
        let from = from.max(self.window.0);
        let to = to.min(self.window.1).max(from);
        let intervals = self
            .intervals
            .iter()
            .filter_map(|i| {
                let s = i.start.max(from);
                let e = i.end().min(to);
                (e > s).then_some(ModeInterval { mode: i.mode, start: s, duration: e - s })
            })
            .collect();
        let peripheral_events = self
            .peripheral_events
            .iter()
            .filter(|(t, _)| *t >= from && *t < to)
            .cloned()
            .collect();
        EnergyLedger { device: self.device.clone(), intervals, peripheral_events, window: (from, to) }
    }

    /// Checks ordering, non-overlap and window containment.
    pub fn is_well_formed(&self) -> bool {
        let (lo, hi) = self.window;
        let tol = 1e-9 * hi.abs().max(1.0);
        let mut cursor = lo - tol;
        for i in &self.intervals {
            if i.duration < 0.0 || i.start < cursor || i.end() > hi + tol {
                return false;
            }
            cursor = i.end() - tol;
        }
        true
    }
}

/// Σ I_y · V_y · Δt over the intervals of `mode`.
pub fn mode_energy(ledger: &EnergyLedger, profile: &DeviceProfile, mode: OperatingMode) -> f64 {
    ledger.mode_time(mode) * profile.power(mode)
}

/// E_PER: summed peripheral event costs.
pub fn peripheral_energy(ledger: &EnergyLedger, profile: &DeviceProfile) -> Result<f64, EnergyError> {
    ledger
        .peripheral_events
        .iter()
        .try_fold(0.0, |acc, (_, event)| Ok(acc + profile.peripheral_cost(event)?))
}

pub fn total_energy(ledger: &EnergyLedger, profile: &DeviceProfile) -> Result<f64, EnergyError> {
    let modes: f64 = OperatingMode::ALL.iter().map(|&m| mode_energy(ledger, profile, m)).sum();
    Ok(modes + peripheral_energy(ledger, profile)?)
}

/// Energy share of `mode` (peripherals count in the denominator).
pub fn duty_cycle_energy(ledger: &EnergyLedger, profile: &DeviceProfile, mode: OperatingMode) -> Result<f64, EnergyError> {
    let total = total_energy(ledger, profile)?;
    if total <= 0.0 {
        return Err(EnergyError::ZeroEnergy);
    }
    Ok(mode_energy(ledger, profile, mode) / total)
}

/// Time share of `mode` over the ledger window.
pub fn duty_cycle_time(ledger: &EnergyLedger, mode: OperatingMode) -> Result<f64, EnergyError> {
    let len = ledger.window_length();
    if len <= 0.0 {
        return Err(EnergyError::EmptyWindow);
    }
    Ok(ledger.mode_time(mode) / len)
}

/// Hours until the battery is exhausted at the ledger's average power.
pub fn lifetime(profile: &DeviceProfile, ledger: &EnergyLedger) -> Result<f64, EnergyError> {
    lifetime_from_energy(profile, total_energy(ledger, profile)?, ledger.window_length())
}

/// Lifetime in hours given `energy` joules spent over `window` seconds.
pub fn lifetime_from_energy(profile: &DeviceProfile, energy: f64, window: f64) -> Result<f64, EnergyError> {
    if window <= 0.0 {
        return Err(EnergyError::EmptyWindow);
    }
    if energy <= 0.0 {
        return Err(EnergyError::ZeroEnergy);
    }
    let avg_power = energy / window;
    Ok(profile.battery_energy() / avg_power / 3600.0)
}
