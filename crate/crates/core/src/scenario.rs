//! Scenario ingestion: the six energy parameters, device profiles, the
//! calibrated effect model mapping parameters to mode timings, the building
//! topology and assembly of the composed system.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use roxmltree::{Document, Node};
use thiserror::Error;

use crate::energy::{DeviceProfile, EnergyError};
use crate::model::{
    build_energy_automaton, var, AtomicComponent, Device, Interaction, ModeTimingModel, ModelError, Port, RetryPolicy,
    SystemModel, TimingEntry, TimingKey, Transition,
};
use crate::sim::is_working_time;
use crate::stochastics::{Distribution, DistributionKind, StochasticsError};

/// The scenario shipped with the crate: four floors, default parameters.
pub const SHIPPED_SCENARIO: &str = include_str!("../scenarios/bms.xml");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("malformed document: {0}")]
    Xml(String),
    #[error("invalid {field} = {value:?}: allowed {allowed}")]
    Validation { field: String, value: String, allowed: String },
    #[error("unknown device type {name:?}; known profiles: {known}")]
    UnknownDeviceType { name: String, known: String },
    #[error("{0}")]
    Topology(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Distribution(#[from] StochasticsError),
}

fn invalid(field: &str, value: impl fmt::Display, allowed: &str) -> ScenarioError {
    ScenarioError::Validation { field: field.to_string(), value: value.to_string(), allowed: allowed.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RdcProtocol {
    ContikiMac,
    XMac,
    Lpp,
    NullRdc,
}

impl RdcProtocol {
    pub const ALL: [RdcProtocol; 4] = [RdcProtocol::ContikiMac, RdcProtocol::XMac, RdcProtocol::Lpp, RdcProtocol::NullRdc];

    pub fn name(self) -> &'static str {
        match self {
            RdcProtocol::ContikiMac => "ContikiMAC",
            RdcProtocol::XMac => "XMAC",
            RdcProtocol::Lpp => "LPP",
            RdcProtocol::NullRdc => "nullRDC",
        }
    }

    /// Prefix of the protocol's calibration coefficients.
    pub fn key(self) -> &'static str {
        match self {
            RdcProtocol::ContikiMac => "contikimac",
            RdcProtocol::XMac => "xmac",
            RdcProtocol::Lpp => "lpp",
            RdcProtocol::NullRdc => "nullrdc",
        }
    }
}

impl FromStr for RdcProtocol {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.trim().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        RdcProtocol::ALL
            .into_iter()
            .find(|p| p.key() == norm)
            .ok_or_else(|| invalid("rdc-protocol", s, "one of ContikiMAC, XMAC, LPP, nullRDC"))
    }
}

impl fmt::Display for RdcProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ServiceProtocol {
    CoAp,
    Mqtt,
    Http,
}

impl ServiceProtocol {
    pub const ALL: [ServiceProtocol; 3] = [ServiceProtocol::CoAp, ServiceProtocol::Mqtt, ServiceProtocol::Http];

    pub fn name(self) -> &'static str {
        match self {
            ServiceProtocol::CoAp => "CoAP",
            ServiceProtocol::Mqtt => "MQTT",
            ServiceProtocol::Http => "HTTP",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ServiceProtocol::CoAp => "coap",
            ServiceProtocol::Mqtt => "mqtt",
            ServiceProtocol::Http => "http",
        }
    }
}

impl FromStr for ServiceProtocol {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServiceProtocol::ALL
            .into_iter()
            .find(|p| p.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid("service-protocol", s, "one of CoAP, MQTT, HTTP"))
    }
}

impl fmt::Display for ServiceProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The six energy parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub rdc_protocol: RdcProtocol,
    /// Channel check rate in Hz: even, in [2, 32].
    pub rdc_frequency: u32,
    /// Retransmission budget: [0, 5].
    pub retransmissions: u32,
    pub service_protocol: ServiceProtocol,
    /// Header size in bytes: even, in [32, 64].
    pub header_size: u32,
    /// Collision-probability scale in [0, 1].
    pub interference: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            rdc_protocol: RdcProtocol::XMac,
            rdc_frequency: 8,
            retransmissions: 4,
            service_protocol: ServiceProtocol::CoAp,
            header_size: 48,
            interference: 0.0,
        }
    }
}

/// XML element names of the six parameters, in canonical order.
pub const PARAMETER_NAMES: [&str; 6] =
    ["rdc-protocol", "rdc-frequency", "retransmissions", "service-protocol", "header-size", "interference"];

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(2..=32).contains(&self.rdc_frequency) || self.rdc_frequency % 2 != 0 {
            return Err(invalid("rdc-frequency", self.rdc_frequency, "even integer in [2, 32] Hz"));
        }
        if self.retransmissions > 5 {
            return Err(invalid("retransmissions", self.retransmissions, "integer in [0, 5]"));
        }
        if !(32..=64).contains(&self.header_size) || self.header_size % 2 != 0 {
            return Err(invalid("header-size", self.header_size, "even integer in [32, 64] bytes"));
        }
        if !(0.0..=1.0).contains(&self.interference) {
            return Err(invalid("interference", self.interference, "real number in [0, 1]"));
        }
        Ok(())
    }

    /// Sets one parameter from its XML name and textual value, then validates.
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ScenarioError> {
        let int = |field: &str, allowed: &str| -> Result<u32, ScenarioError> {
            let v = value.trim();
            v.parse::<u32>().map_err(|_| invalid(field, v, allowed))
        };
        match name {
            "rdc-protocol" => self.rdc_protocol = value.parse()?,
            "rdc-frequency" => self.rdc_frequency = int(name, "even integer in [2, 32] Hz")?,
            "retransmissions" => self.retransmissions = int(name, "integer in [0, 5]")?,
            "service-protocol" => self.service_protocol = value.parse()?,
            "header-size" => self.header_size = int(name, "even integer in [32, 64] bytes")?,
            "interference" => {
                let v = value.trim();
                self.interference = v
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| invalid(name, v, "real number in [0, 1]"))?;
            }
            other => return Err(invalid("parameter", other, &PARAMETER_NAMES.join(", "))),
        }
        self.validate()
    }

    pub fn get(&self, name: &str) -> Option<String> {
        Some(match name {
            "rdc-protocol" => self.rdc_protocol.to_string(),
            "rdc-frequency" => self.rdc_frequency.to_string(),
            "retransmissions" => self.retransmissions.to_string(),
            "service-protocol" => self.service_protocol.to_string(),
            "header-size" => self.header_size.to_string(),
            "interference" => format_f64(self.interference),
            _ => return None,
        })
    }

    /// The full variation range of a parameter, as textual values.
    pub fn sweep_values(name: &str) -> Option<Vec<String>> {
        Some(match name {
            "rdc-protocol" => RdcProtocol::ALL.iter().map(|p| p.to_string()).collect(),
            "rdc-frequency" => (2..=32).step_by(2).map(|f: u32| f.to_string()).collect(),
            "retransmissions" => (0..=5).map(|r: u32| r.to_string()).collect(),
            "service-protocol" => ServiceProtocol::ALL.iter().map(|p| p.to_string()).collect(),
            "header-size" => (32..=64).step_by(2).map(|h: u32| h.to_string()).collect(),
            "interference" => (0..=10).map(|i| format_f64(f64::from(i) / 10.0)).collect(),
            _ => return None,
        })
    }
}

/// Shortest decimal text that parses back to the same value.
pub fn format_f64(x: f64) -> String {
    format!("{x}")
}

fn xml_error(e: impl fmt::Display) -> ScenarioError {
    ScenarioError::Xml(e.to_string())
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(name))
}

fn children<'a, 'i: 'a>(node: Node<'a, 'i>, name: &'a str) -> impl Iterator<Item = Node<'a, 'i>> + 'a {
    node.children().filter(move |c| c.is_element() && c.has_tag_name(name))
}

fn attr_f64(node: Node<'_, '_>, name: &str, field: &str) -> Result<Option<f64>, ScenarioError> {
    match node.attribute(name) {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(Some)
            .ok_or_else(|| invalid(field, v, "finite number")),
    }
}

fn req_f64(node: Node<'_, '_>, name: &str, field: &str) -> Result<f64, ScenarioError> {
    attr_f64(node, name, field)?.ok_or_else(|| invalid(field, "<missing>", "finite number"))
}

fn req_attr<'a>(node: Node<'a, '_>, name: &str, field: &str) -> Result<&'a str, ScenarioError> {
    node.attribute(name).ok_or_else(|| invalid(field, "<missing>", "a value"))
}

fn parse_params_node(node: Option<Node<'_, '_>>) -> Result<EnergyConfig, ScenarioError> {
    let mut cfg = EnergyConfig::default();
    if let Some(block) = node {
        for el in block.children().filter(|c| c.is_element()) {
            let name = el.tag_name().name();
            if !PARAMETER_NAMES.contains(&name) {
                return Err(invalid("energy-parameters", name, &PARAMETER_NAMES.join(", ")));
            }
            cfg.set(name, el.text().unwrap_or(""))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses the energy parameters from a document whose root is either
/// `<energy-parameters>` or a `<scenario>` containing that block. Missing
/// parameters take their defaults.
pub fn parse_config(document: &str) -> Result<EnergyConfig, ScenarioError> {
    let doc = Document::parse(document).map_err(xml_error)?;
    let root = doc.root_element();
    if root.has_tag_name("energy-parameters") {
        parse_params_node(Some(root))
    } else {
        parse_params_node(child(root, "energy-parameters"))
    }
}

pub fn render_config(cfg: &EnergyConfig) -> String {
    let mut s = String::from("<energy-parameters>\n");
    render_params_into(cfg, &mut s, "  ");
    s.push_str("</energy-parameters>\n");
    s
}

fn render_params_into(cfg: &EnergyConfig, s: &mut String, indent: &str) {
    for name in PARAMETER_NAMES {
        let _ = writeln!(s, "{indent}<{name}>{}</{name}>", cfg.get(name).unwrap_or_default());
    }
}

/// Default coefficients of the effect model.
pub const DEFAULT_COEFFICIENTS: &[(&str, f64)] = &[
    ("checks-per-cycle", 256.0),
    ("min-sleep-s", 0.001),
    ("false-wake-fraction", 1.0),
    ("wake-latency-s", 0.0002),
    ("cpu-base-s", 0.004),
    ("cpu-per-header-byte-s", 0.0002),
    ("header-reference-bytes", 64.0),
    ("airtime-per-byte-s", 32e-6),
    ("base-loss", 0.01),
    ("collision-gain", 0.8),
    ("max-loss", 0.9),
    ("duration-cv", 0.1),
    ("poisson-quantum-s", 0.001),
    ("service.coap.radio-factor", 1.0),
    ("service.coap.cpu-factor", 1.0),
    ("service.mqtt.radio-factor", 1.15),
    ("service.mqtt.cpu-factor", 1.1),
    ("service.http.radio-factor", 1.4),
    ("service.http.cpu-factor", 1.3),
    ("xmac.interval-factor", 1.0),
    ("xmac.check-s", 0.001),
    ("xmac.rendezvous", 0.5),
    ("xmac.rx-dwell-s", 0.23),
    ("contikimac.interval-factor", 1.0),
    ("contikimac.check-s", 0.002),
    ("contikimac.rendezvous", 0.8),
    ("contikimac.rx-dwell-s", 0.30),
    ("lpp.interval-factor", 2.0),
    ("lpp.check-s", 0.001),
    ("lpp.rendezvous", 0.1),
    ("lpp.rx-dwell-s", 0.03),
    ("nullrdc.interval-factor", 1.0),
    ("nullrdc.check-s", 0.0),
    ("nullrdc.rendezvous", 0.02),
    ("nullrdc.rx-dwell-s", 0.01),
];

const DEVICE_FACTORS: [&str; 3] = ["rx-factor", "tx-factor", "cpu-factor"];

/// Named coefficients of the effect model. Per device type factors are
/// named `device.<type>.{rx,tx,cpu}-factor` and default to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    coefficients: BTreeMap<String, f64>,
}

impl Default for CalibrationSet {
    fn default() -> Self {
        Self { coefficients: DEFAULT_COEFFICIENTS.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }
}

impl CalibrationSet {
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), ScenarioError> {
        if !value.is_finite() {
            return Err(invalid(name, value, "finite number"));
        }
        let known = DEFAULT_COEFFICIENTS.iter().any(|(k, _)| *k == name)
            || name
                .strip_prefix("device.")
                .and_then(|rest| rest.rsplit_once('.'))
                .is_some_and(|(ty, f)| !ty.is_empty() && DEVICE_FACTORS.contains(&f));
        if !known {
            return Err(invalid("coefficient", name, "a documented calibration coefficient"));
        }
        self.coefficients.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> f64 {
        match self.coefficients.get(name) {
            Some(v) => *v,
            None if name.starts_with("device.") => 1.0,
            None => panic!("unknown calibration coefficient {name}"),
        }
    }

    pub fn coefficients(&self) -> &BTreeMap<String, f64> {
        &self.coefficients
    }

    fn protocol(&self, p: RdcProtocol, what: &str) -> f64 {
        self.get(&format!("{}.{what}", p.key()))
    }

    fn service(&self, s: ServiceProtocol, what: &str) -> f64 {
        self.get(&format!("service.{}.{what}", s.key()))
    }

    fn device(&self, device_type: &str, what: &str) -> f64 {
        self.get(&format!("device.{device_type}.{what}"))
    }
}

/// Reporting workload of the floor servers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workload {
    /// Reporting period inside working hours, seconds.
    pub working_period: f64,
    /// Reporting period outside working hours, seconds.
    pub off_period: f64,
    /// Payload bytes per resource reading.
    pub resource_bytes: f64,
    /// False disables the periodic timers entirely.
    pub enabled: bool,
}

impl Default for Workload {
    fn default() -> Self {
        Self { working_period: 30.0, off_period: 300.0, resource_bytes: 6.0, enabled: true }
    }
}

impl Workload {
    pub fn none() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        for (field, v) in [
            ("workload working-period-s", self.working_period),
            ("workload off-period-s", self.off_period),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, v, "positive number of seconds"));
            }
        }
        if !(self.resource_bytes.is_finite() && self.resource_bytes >= 0.0) {
            return Err(invalid("workload resource-bytes", self.resource_bytes, "non-negative number"));
        }
        Ok(())
    }
}

/// Size of one server report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageShape {
    /// Resource readings carried; each costs one exchange.
    pub resources: f64,
    pub resource_bytes: f64,
}

fn timing_entry(kind: DistributionKind, mean: f64, calib: &CalibrationSet) -> TimingEntry {
    let mean = mean.max(0.0);
    let dist = match kind {
        DistributionKind::Poisson => {
            let q = calib.get("poisson-quantum-s");
            Distribution::poisson((mean / q).max(1e-3), q)
        }
        DistributionKind::Normal if mean > 0.0 => Distribution::normal(mean, calib.get("duration-cv") * mean),
        _ => Distribution::dirac(mean),
    };
    TimingEntry::new(dist.expect("effect model parameters are positive and finite"))
}

/// Maps the energy parameters to the timing of one device type.
///
/// A duty cycle lasts `checks-per-cycle` wake intervals of
/// `interval-factor / rdc_frequency` seconds. Idle listening per cycle is one
/// channel check per interval plus, under interference, a false-wake share of
/// the cycle; nullRDC listens for the whole cycle. Each report carries one
/// exchange per resource: CPU time shrinks with the header size
/// (compression), radio time grows with it, and every transmission attempt
/// fails with probability `base-loss + collision-gain · interference`
/// (capped by `max-loss`), retried up to the retransmission budget.
pub fn effect_model(
    cfg: &EnergyConfig,
    device_type: &str,
    calib: &CalibrationSet,
    msg: MessageShape,
) -> ModeTimingModel {
    let p = cfg.rdc_protocol;
    let f = f64::from(cfg.rdc_frequency);
    let h = f64::from(cfg.header_size);
    let interval = calib.protocol(p, "interval-factor") / f;
    let cycle = calib.get("checks-per-cycle") * interval;
    let min_sleep = calib.get("min-sleep-s");
    let (listen, sleep) = if p == RdcProtocol::NullRdc {
        (cycle - min_sleep, min_sleep)
    } else {
        let listen = calib.get("checks-per-cycle") * calib.protocol(p, "check-s")
            + cfg.interference * calib.get("false-wake-fraction") * cycle;
        (listen, (cycle - listen).max(min_sleep))
    };

    let radio = calib.service(cfg.service_protocol, "radio-factor");
    let cpu_svc = calib.service(cfg.service_protocol, "cpu-factor");
    let airtime = calib.get("airtime-per-byte-s") * (h + msg.resource_bytes);
    let cpu = msg.resources
        * cpu_svc
        * calib.device(device_type, "cpu-factor")
        * (calib.get("cpu-base-s") + calib.get("cpu-per-header-byte-s") * (calib.get("header-reference-bytes") - h));
    let tx_attempt =
        msg.resources * radio * calib.device(device_type, "tx-factor") * (calib.protocol(p, "rendezvous") * interval + airtime);
    let rx_msg = msg.resources * radio * calib.device(device_type, "rx-factor") * (calib.protocol(p, "rx-dwell-s") + airtime);
    let loss = (calib.get("base-loss") + calib.get("collision-gain") * cfg.interference).min(calib.get("max-loss"));

    let mut t = ModeTimingModel::new();
    t.set(TimingKey::Activate, timing_entry(DistributionKind::Dirac, 0.0, calib));
    t.set(TimingKey::Process, timing_entry(DistributionKind::Dirac, calib.get("wake-latency-s"), calib));
    t.set(TimingKey::SndPacket, timing_entry(DistributionKind::Poisson, cpu, calib));
    t.set(TimingKey::Recv, timing_entry(DistributionKind::Dirac, 0.0, calib));
    let mut tx = timing_entry(DistributionKind::Poisson, tx_attempt, calib);
    tx.retry = Some(RetryPolicy { failure_probability: loss.clamp(0.0, 1.0), max_retries: cfg.retransmissions });
    t.set(TimingKey::TxSojourn, tx);
    t.set(TimingKey::RxReceive, timing_entry(DistributionKind::Normal, rx_msg, calib));
    t.set(TimingKey::RxListen, timing_entry(DistributionKind::Normal, listen, calib));
    t.set(TimingKey::LpmSleep, timing_entry(DistributionKind::Normal, sleep, calib));
    t.set(TimingKey::Tick, timing_entry(DistributionKind::Dirac, 0.0, calib));
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Temperature,
    Humidity,
    Motion,
    LightSensor,
    Alarm,
    LightActuator,
    Thermostat,
}

impl Resource {
    pub const ALL: [Resource; 7] = [
        Resource::Temperature,
        Resource::Humidity,
        Resource::Motion,
        Resource::LightSensor,
        Resource::Alarm,
        Resource::LightActuator,
        Resource::Thermostat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Resource::Temperature => "temperature",
            Resource::Humidity => "humidity",
            Resource::Motion => "motion",
            Resource::LightSensor => "light-sensor",
            Resource::Alarm => "alarm",
            Resource::LightActuator => "light-actuator",
            Resource::Thermostat => "thermostat",
        }
    }
}

impl FromStr for Resource {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Resource::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid("resource", s, "temperature, humidity, motion, light-sensor, alarm, light-actuator, thermostat"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Server,
    Controller,
    BuildingManager,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Server => "server",
            Role::Controller => "controller",
            Role::BuildingManager => "bm",
        }
    }

    /// Peripheral event emitted on every timer tick.
    pub fn peripheral_event(self) -> &'static str {
        match self {
            Role::Server => "sensor-sample",
            Role::Controller => "controller-poll",
            Role::BuildingManager => "bm-log",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloorSpec {
    pub controller_type: String,
    pub server_type: String,
    pub resources: Vec<Resource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologySpec {
    pub bm_type: String,
    pub floors: Vec<FloorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyDevice {
    pub name: String,
    pub device_type: String,
    pub role: Role,
    pub floor: u32,
    pub resources: Vec<Resource>,
}

/// Devices in simulation order plus directed forwarding links (by device index).
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub devices: Vec<TopologyDevice>,
    pub links: Vec<(usize, usize)>,
}

impl Topology {
    pub fn floors(&self) -> usize {
        self.devices.iter().filter(|d| d.role == Role::Controller).count()
    }

    pub fn device(&self, name: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.name == name)
    }

    /// Mean resources per server report.
    pub fn message_resources(&self) -> f64 {
        let servers: Vec<&TopologyDevice> = self.devices.iter().filter(|d| d.role == Role::Server).collect();
        if servers.is_empty() {
            1.0
        } else {
            servers.iter().map(|d| d.resources.len() as f64).sum::<f64>() / servers.len() as f64
        }
    }
}

/// Floor `k` holds `controller-k` and `server-k`; each server reports to its
/// controller, each controller forwards to the floor below and floor 1 to
/// the building-management device `bm`.
pub fn build_bms_topology(spec: &TopologySpec, known_types: &[&str]) -> Result<Topology, ScenarioError> {
    if spec.floors.is_empty() {
        return Err(ScenarioError::Topology("a building needs at least one floor".into()));
    }
    let check = |t: &str| {
        if known_types.contains(&t) {
            Ok(t.to_string())
        } else {
            Err(ScenarioError::UnknownDeviceType { name: t.to_string(), known: known_types.join(", ") })
        }
    };
    let mut devices = Vec::new();
    let mut links = Vec::new();
    for (k, floor) in spec.floors.iter().enumerate() {
        let level = k as u32 + 1;
        devices.push(TopologyDevice {
            name: format!("controller-{level}"),
            device_type: check(&floor.controller_type)?,
            role: Role::Controller,
            floor: level,
            resources: Vec::new(),
        });
        devices.push(TopologyDevice {
            name: format!("server-{level}"),
            device_type: check(&floor.server_type)?,
            role: Role::Server,
            floor: level,
            resources: floor.resources.clone(),
        });
    }
    devices.push(TopologyDevice {
        name: "bm".into(),
        device_type: check(&spec.bm_type)?,
        role: Role::BuildingManager,
        floor: 1,
        resources: Vec::new(),
    });
    let bm = devices.len() - 1;
    for k in 0..spec.floors.len() {
        let controller = 2 * k;
        links.push((controller + 1, controller));
        links.push((controller, if k == 0 { bm } else { controller - 2 }));
    }
    Ok(Topology { devices, links })
}

/// Fitted durations replacing effect-model entries, keyed by (device type, arc).
pub type FittedTiming = BTreeMap<(String, TimingKey), TimingEntry>;

pub type Profiles = BTreeMap<String, Arc<DeviceProfile>>;

/// Timing of every device type used by a topology.
pub fn timing_for(
    device_type: &str,
    cfg: &EnergyConfig,
    calib: &CalibrationSet,
    workload: &Workload,
    topology: &Topology,
    fitted: &FittedTiming,
) -> ModeTimingModel {
    let msg = MessageShape { resources: topology.message_resources(), resource_bytes: workload.resource_bytes };
    let mut t = effect_model(cfg, device_type, calib, msg);
    for ((ty, key), entry) in fitted {
        if ty == device_type {
            t.set(*key, entry.clone());
        }
    }
    t
}

/// Reporting timer. `clock` mirrors simulated time at each `elapse` start so
/// the period can follow the working-hours calendar; `phase` staggers devices.
fn timer_component(
    name: &str,
    workload: &Workload,
    reports: f64,
    event: &str,
    phase: f64,
) -> Result<AtomicComponent, ModelError> {
    let mut b = AtomicComponent::builder(name);
    let start = b.location("Start", None);
    let wait = b.location("Wait", None);
    let due = b.location("Due", None);
    b.initial(start);
    let clock = b.variable("clock", phase);
    let out = b.variable("reports", 0.0);
    let (wp, op) = (workload.working_period, workload.off_period);
    let working = move |v: &[f64]| is_working_time(v[clock]);
    let dirac = |x: f64| Distribution::dirac(x).expect("validated workload period");
    b.transition(Transition::new("phase", start, wait, dirac(phase)));
    b.transition(Transition::new("elapse", wait, due, dirac(wp)).guard(working).action(move |v| {
        v[clock] += wp;
        v[out] = reports;
    }));
    b.transition(Transition::new("elapse", wait, due, dirac(op)).guard(move |v| !working(v)).action(move |v| {
        v[clock] += op;
        v[out] = reports;
    }));
    b.transition(Transition::new("fire", due, wait, dirac(0.0)).exported().peripheral(event));
    b.build()
}

/// Composes one energy automaton per device, a reporting timer per device
/// and a `sndPacket`/`recv` interaction per topology link.
pub fn build_system(
    topology: &Topology,
    cfg: &EnergyConfig,
    calib: &CalibrationSet,
    profiles: &Profiles,
    workload: &Workload,
    fitted: &FittedTiming,
) -> Result<SystemModel, ScenarioError> {
    if topology.devices.is_empty() {
        return Err(ScenarioError::Topology("topology has no devices".into()));
    }
    cfg.validate()?;
    workload.validate()?;
    let known = || profiles.keys().cloned().collect::<Vec<_>>().join(", ");
    let mut components = Vec::new();
    let mut devices = Vec::new();
    let mut timings: BTreeMap<&str, ModeTimingModel> = BTreeMap::new();
    for (i, d) in topology.devices.iter().enumerate() {
        let profile = profiles
            .get(&d.device_type)
            .ok_or_else(|| ScenarioError::UnknownDeviceType { name: d.device_type.clone(), known: known() })?;
        let timing = timings
            .entry(d.device_type.as_str())
            .or_insert_with(|| timing_for(&d.device_type, cfg, calib, workload, topology, fitted));
        let relay = d.role == Role::Controller;
        components.push(build_energy_automaton(&d.name, profile, timing, relay)?);
        devices.push(Device {
            name: d.name.clone(),
            component: i,
            device_type: d.device_type.clone(),
            role: d.role.name().to_string(),
            profile: profile.clone(),
        });
    }
    let mut interactions = Vec::new();
    for &(from, to) in &topology.links {
        let (Some(a), Some(b)) = (topology.devices.get(from), topology.devices.get(to)) else {
            return Err(ScenarioError::Topology(format!("dangling link ({from}, {to})")));
        };
        interactions.push(Interaction::new(
            format!("{}->{}", a.name, b.name),
            vec![Port { component: from, label: "sndPacket".into() }, Port { component: to, label: "recv".into() }],
        ));
    }
    let mut owners = Vec::new();
    if workload.enabled {
        let incoming = components[0].var(var::INCOMING).expect("energy automaton variable");
        let n = topology.devices.len() as f64;
        for (i, d) in topology.devices.iter().enumerate() {
            let reports = if d.role == Role::Server { 1.0 } else { 0.0 };
            let phase = workload.working_period * i as f64 / n;
            let timer =
                timer_component(&format!("timer:{}", d.name), workload, reports, d.role.peripheral_event(), phase)?;
            let out = timer.var("reports").expect("timer variable");
            components.push(timer);
            let t = components.len() - 1;
            owners.push((t, i));
            interactions.push(
                Interaction::new(
                    format!("tick:{}", d.name),
                    vec![Port { component: t, label: "fire".into() }, Port { component: i, label: "tick".into() }],
                )
                .with_transfer((0, out), (1, incoming)),
            );
        }
    }
    Ok(SystemModel::new(components, interactions, Vec::new(), devices, &owners)?)
}

/// A complete, validated scenario document.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub config: EnergyConfig,
    pub topology_spec: TopologySpec,
    pub topology: Topology,
    pub profiles: Profiles,
    pub calibration: CalibrationSet,
    pub workload: Workload,
    pub fitted: FittedTiming,
}

impl Scenario {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_SCENARIO).expect("shipped scenario is valid")
    }

    pub fn parse(document: &str) -> Result<Self, ScenarioError> {
        let doc = Document::parse(document).map_err(xml_error)?;
        let root = doc.root_element();
        if !root.has_tag_name("scenario") {
            return Err(ScenarioError::Xml(format!("expected <scenario> root, found <{}>", root.tag_name().name())));
        }
        let name = root.attribute("name").unwrap_or("scenario").to_string();
        let config = parse_params_node(child(root, "energy-parameters"))?;

        let mut profiles = Profiles::new();
        let pnode = child(root, "profiles").ok_or_else(|| invalid("profiles", "<missing>", "at least one <profile>"))?;
        for p in children(pnode, "profile") {
            let profile = parse_profile(p)?;
            profiles.insert(profile.name.clone(), Arc::new(profile));
        }
        if profiles.is_empty() {
            return Err(invalid("profiles", "<empty>", "at least one <profile>"));
        }

        let mut calibration = CalibrationSet::default();
        if let Some(c) = child(root, "calibration") {
            for coef in children(c, "coefficient") {
                let n = req_attr(coef, "name", "coefficient name")?;
                calibration.set(n, req_f64(coef, "value", n)?)?;
            }
        }

        let mut workload = Workload::default();
        if let Some(w) = child(root, "workload") {
            if let Some(v) = attr_f64(w, "working-period-s", "workload working-period-s")? {
                workload.working_period = v;
            }
            if let Some(v) = attr_f64(w, "off-period-s", "workload off-period-s")? {
                workload.off_period = v;
            }
            if let Some(v) = attr_f64(w, "resource-bytes", "workload resource-bytes")? {
                workload.resource_bytes = v;
            }
            if let Some(v) = w.attribute("enabled") {
                workload.enabled = v.parse().map_err(|_| invalid("workload enabled", v, "true or false"))?;
            }
        }
        workload.validate()?;

        let tnode = child(root, "topology").ok_or_else(|| invalid("topology", "<missing>", "a <topology> block"))?;
        let bm_type = child(tnode, "bm-device")
            .map(|b| req_attr(b, "type", "bm-device type").map(str::to_string))
            .transpose()?
            .ok_or_else(|| invalid("topology", "<no bm-device>", "a <bm-device type=...>"))?;
        let mut floors = Vec::new();
        for f in children(tnode, "floor") {
            let ctrl = child(f, "controller").ok_or_else(|| invalid("floor", "<no controller>", "one controller per floor"))?;
            let srv = child(f, "server").ok_or_else(|| invalid("floor", "<no server>", "one server per floor"))?;
            let resources = srv
                .attribute("resources")
                .unwrap_or("")
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<Vec<Resource>, _>>()?;
            floors.push(FloorSpec {
                controller_type: req_attr(ctrl, "type", "controller type")?.to_string(),
                server_type: req_attr(srv, "type", "server type")?.to_string(),
                resources,
            });
        }
        let topology_spec = TopologySpec { bm_type, floors };
        let known: Vec<&str> = profiles.keys().map(String::as_str).collect();
        let topology = build_bms_topology(&topology_spec, &known)?;

        let mut fitted = FittedTiming::new();
        if let Some(ft) = child(root, "fitted-timing") {
            for e in children(ft, "entry") {
                let ty = req_attr(e, "device-type", "fitted entry device-type")?;
                let arc = req_attr(e, "arc", "fitted entry arc")?;
                let key = TimingKey::from_name(arc).ok_or_else(|| invalid("fitted entry arc", arc, "an energy automaton arc name"))?;
                let kind_s = req_attr(e, "distribution", "fitted entry distribution")?;
                let kind = DistributionKind::from_name(kind_s)
                    .ok_or_else(|| invalid("fitted entry distribution", kind_s, "dirac, uniform, normal, poisson, exponential"))?;
                let params = req_attr(e, "parameters", "fitted entry parameters")?
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| invalid("fitted entry parameters", v, "numbers")))
                    .collect::<Result<Vec<_>, _>>()?;
                let dist = Distribution::from_parts(kind, &params)?;
                fitted.insert((ty.to_string(), key), TimingEntry::new(dist));
            }
        }

        Ok(Self { name, config, topology_spec, topology, profiles, calibration, workload, fitted })
    }

    pub fn with_config(&self, config: EnergyConfig) -> Self {
        Self { config, ..self.clone() }
    }

    pub fn build_system(&self) -> Result<SystemModel, ScenarioError> {
        build_system(&self.topology, &self.config, &self.calibration, &self.profiles, &self.workload, &self.fitted)
    }

    pub fn timing(&self, device_type: &str) -> ModeTimingModel {
        timing_for(device_type, &self.config, &self.calibration, &self.workload, &self.topology, &self.fitted)
    }

    /// Serialises the scenario; `parse(render())` reproduces it.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "<scenario name=\"{}\">", escape(&self.name));
        s.push_str("  <energy-parameters>\n");
        render_params_into(&self.config, &mut s, "    ");
        s.push_str("  </energy-parameters>\n");
        let w = &self.workload;
        let _ = writeln!(
            s,
            "  <workload working-period-s=\"{}\" off-period-s=\"{}\" resource-bytes=\"{}\" enabled=\"{}\"/>",
            w.working_period, w.off_period, w.resource_bytes, w.enabled
        );
        s.push_str("  <topology>\n");
        let _ = writeln!(s, "    <bm-device type=\"{}\"/>", escape(&self.topology_spec.bm_type));
        for (k, f) in self.topology_spec.floors.iter().enumerate() {
            let res: Vec<&str> = f.resources.iter().map(|r| r.name()).collect();
            let _ = writeln!(s, "    <floor level=\"{}\">", k + 1);
            let _ = writeln!(s, "      <controller type=\"{}\"/>", escape(&f.controller_type));
            let _ = writeln!(s, "      <server type=\"{}\" resources=\"{}\"/>", escape(&f.server_type), res.join(" "));
            s.push_str("    </floor>\n");
        }
        s.push_str("  </topology>\n  <profiles>\n");
        for p in self.profiles.values() {
            s.push_str(&render_profile(p, "    "));
        }
        s.push_str("  </profiles>\n  <calibration>\n");
        for (k, v) in self.calibration.coefficients() {
            let _ = writeln!(s, "    <coefficient name=\"{}\" value=\"{}\"/>", escape(k), v);
        }
        s.push_str("  </calibration>\n");
        if !self.fitted.is_empty() {
            s.push_str(&render_fitted(&self.fitted, "  "));
        }
        s.push_str("</scenario>\n");
        s
    }
}

/// `<fitted-timing>` block for the given entries.
pub fn render_fitted(fitted: &FittedTiming, indent: &str) -> String {
    let mut s = format!("{indent}<fitted-timing>\n");
    for ((ty, key), e) in fitted {
        let params: Vec<String> = e.duration.parameters().iter().map(|p| format!("{p}")).collect();
        let _ = writeln!(
            s,
            "{indent}  <entry device-type=\"{}\" arc=\"{}\" distribution=\"{}\" parameters=\"{}\"/>",
            escape(ty),
            key.name(),
            e.duration.kind().name(),
            params.join(" ")
        );
    }
    let _ = writeln!(s, "{indent}</fitted-timing>");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn parse_profile(p: Node<'_, '_>) -> Result<DeviceProfile, ScenarioError> {
    let name = req_attr(p, "name", "profile name")?;
    let field = |f: &str| format!("profile {name} {f}");
    let battery = req_f64(p, "battery-ah", &field("battery-ah"))?;
    let vcc = req_f64(p, "vcc", &field("vcc"))?;
    let mut current = [f64::NAN; 4];
    let mut voltage = [None; 4];
    for m in children(p, "mode") {
        let mname = req_attr(m, "name", &field("mode name"))?;
        let mode = crate::model::OperatingMode::from_name(mname).ok_or_else(|| invalid(&field("mode"), mname, "LPM, CPU, Tx, Rx"))?;
        current[mode.index()] = req_f64(m, "current-a", &field("current-a"))?;
        voltage[mode.index()] = attr_f64(m, "voltage-v", &field("voltage-v"))?;
    }
    for mode in crate::model::OperatingMode::ALL {
        if current[mode.index()].is_nan() {
            return Err(invalid(&field("mode"), format!("<missing {mode}>"), "one <mode> per operating mode"));
        }
    }
    let mut costs = BTreeMap::new();
    for e in children(p, "peripheral") {
        let ev = req_attr(e, "event", &field("peripheral event"))?;
        costs.insert(ev.to_string(), req_f64(e, "joules", &field("peripheral joules"))?);
    }
    Ok(DeviceProfile::new(name, current, voltage, battery, vcc, costs)?)
}

fn render_profile(p: &DeviceProfile, indent: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{indent}<profile name=\"{}\" battery-ah=\"{}\" vcc=\"{}\">", escape(&p.name), p.battery_capacity, p.vcc);
    for m in crate::model::OperatingMode::ALL {
        let _ = writeln!(
            s,
            "{indent}  <mode name=\"{}\" current-a=\"{}\" voltage-v=\"{}\"/>",
            m,
            p.current[m.index()],
            p.voltage[m.index()]
        );
    }
    for (e, j) in &p.peripheral_costs {
        let _ = writeln!(s, "{indent}  <peripheral event=\"{}\" joules=\"{}\"/>", escape(e), j);
    }
    let _ = writeln!(s, "{indent}</profile>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_block_gives_defaults() {
        let cfg = parse_config("<energy-parameters/>").unwrap();
        assert_eq!(cfg, EnergyConfig::default());
        assert_eq!(cfg.rdc_protocol, RdcProtocol::XMac);
        assert_eq!((cfg.rdc_frequency, cfg.retransmissions, cfg.header_size), (8, 4, 48));
        assert_eq!(cfg.service_protocol, ServiceProtocol::CoAp);
        assert_eq!(cfg.interference, 0.0);
    }

    #[test]
    fn odd_frequency_rejected() {
        let err = parse_config("<energy-parameters><rdc-frequency>7</rdc-frequency></energy-parameters>").unwrap_err();
        assert!(err.to_string().contains("rdc-frequency"), "{err}");
        assert!(err.to_string().contains("even"));
    }

    #[test]
    fn interference_out_of_range_rejected() {
        let err = parse_config("<energy-parameters><interference>1.5</interference></energy-parameters>").unwrap_err();
        assert!(matches!(err, ScenarioError::Validation { ref field, .. } if field == "interference"));
    }

    #[test]
    fn other_range_errors() {
        for doc in [
            "<energy-parameters><retransmissions>6</retransmissions></energy-parameters>",
            "<energy-parameters><header-size>33</header-size></energy-parameters>",
            "<energy-parameters><header-size>66</header-size></energy-parameters>",
            "<energy-parameters><rdc-protocol>TDMA</rdc-protocol></energy-parameters>",
            "<energy-parameters><service-protocol>AMQP</service-protocol></energy-parameters>",
            "<energy-parameters><colour>red</colour></energy-parameters>",
            "<energy-parameters><rdc-frequency>",
        ] {
            assert!(parse_config(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg = EnergyConfig {
            rdc_protocol: RdcProtocol::Lpp,
            rdc_frequency: 16,
            retransmissions: 0,
            service_protocol: ServiceProtocol::Mqtt,
            header_size: 62,
            interference: 0.35,
        };
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn protocol_names_are_lenient() {
        assert_eq!("X-MAC".parse::<RdcProtocol>().unwrap(), RdcProtocol::XMac);
        assert_eq!("nullrdc".parse::<RdcProtocol>().unwrap(), RdcProtocol::NullRdc);
        assert_eq!("ContikiMAC".parse::<RdcProtocol>().unwrap(), RdcProtocol::ContikiMac);
    }

    fn msg() -> MessageShape {
        MessageShape { resources: 7.0, resource_bytes: 6.0 }
    }

    fn model(cfg: EnergyConfig) -> ModeTimingModel {
        effect_model(&cfg, "Z1", &CalibrationSet::default(), msg())
    }

    #[test]
    fn null_rdc_listens_far_longer_than_lpp() {
        let null = model(EnergyConfig { rdc_protocol: RdcProtocol::NullRdc, ..Default::default() });
        let lpp = model(EnergyConfig { rdc_protocol: RdcProtocol::Lpp, ..Default::default() });
        assert!(null.expected(TimingKey::RxListen) >= 100.0 * lpp.expected(TimingKey::RxListen));
        let xmac = model(EnergyConfig::default());
        assert!(lpp.expected(TimingKey::LpmSleep) > xmac.expected(TimingKey::LpmSleep));
    }

    #[test]
    fn retransmissions_lengthen_tx() {
        let r0 = model(EnergyConfig { retransmissions: 0, ..Default::default() });
        let r5 = model(EnergyConfig { retransmissions: 5, ..Default::default() });
        assert!(r5.expected(TimingKey::TxSojourn) > r0.expected(TimingKey::TxSojourn));
    }

    #[test]
    fn header_trades_cpu_for_radio() {
        let h32 = model(EnergyConfig { header_size: 32, ..Default::default() });
        let h64 = model(EnergyConfig { header_size: 64, ..Default::default() });
        assert!(h64.expected(TimingKey::TxSojourn) > h32.expected(TimingKey::TxSojourn));
        assert!(h64.expected(TimingKey::SndPacket) < h32.expected(TimingKey::SndPacket));
    }

    #[test]
    fn contikimac_wakeups_cost_more_than_xmac() {
        let x = model(EnergyConfig::default());
        let c = model(EnergyConfig { rdc_protocol: RdcProtocol::ContikiMac, ..Default::default() });
        assert!(c.expected(TimingKey::RxListen) > x.expected(TimingKey::RxListen));
    }

    #[test]
    fn shipped_topology_counts() {
        let s = Scenario::shipped();
        assert_eq!(s.topology.devices.len(), 9);
        assert_eq!(s.topology.links.len(), 8);
        assert_eq!(s.topology.floors(), 4);
        let types: Vec<&str> = s.topology.devices.iter().map(|d| d.device_type.as_str()).collect();
        assert_eq!(types, ["Z1", "Z1", "Sky", "Sky", "OpenMote", "OpenMote", "Sensortag", "Sensortag", "Z1"]);
        let sys = s.build_system().unwrap();
        assert_eq!(sys.devices().len(), 9);
        let links = sys.interactions().iter().filter(|i| i.name.contains("->")).count();
        assert_eq!(links, 8);
    }

    #[test]
    fn one_floor_topology() {
        let spec = TopologySpec {
            bm_type: "Z1".into(),
            floors: vec![FloorSpec { controller_type: "Z1".into(), server_type: "Z1".into(), resources: vec![] }],
        };
        let t = build_bms_topology(&spec, &["Z1"]).unwrap();
        assert_eq!(t.devices.len(), 3);
        assert_eq!(t.links, vec![(1, 0), (0, 2)]);
    }

    #[test]
    fn unknown_device_type() {
        let spec = TopologySpec {
            bm_type: "Z1".into(),
            floors: vec![FloorSpec { controller_type: "ESP32".into(), server_type: "Z1".into(), resources: vec![] }],
        };
        let err = build_bms_topology(&spec, &["Z1", "Sky"]).unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownDeviceType { ref name, ref known } if name == "ESP32" && known.contains("Sky")));
        assert!(build_bms_topology(&TopologySpec { bm_type: "Z1".into(), floors: vec![] }, &["Z1"]).is_err());
    }

    #[test]
    fn empty_topology_rejected() {
        let s = Scenario::shipped();
        let empty = Topology { devices: vec![], links: vec![] };
        assert!(build_system(&empty, &s.config, &s.calibration, &s.profiles, &s.workload, &s.fitted).is_err());
        let dangling = Topology { devices: s.topology.devices.clone(), links: vec![(0, 42)] };
        assert!(build_system(&dangling, &s.config, &s.calibration, &s.profiles, &s.workload, &s.fitted).is_err());
    }

    #[test]
    fn scenario_render_round_trip() {
        let mut s = Scenario::shipped();
        s.fitted.insert(("Z1".into(), TimingKey::RxReceive), TimingEntry::new(Distribution::normal(1.5, 0.2).unwrap()));
        let again = Scenario::parse(&s.render()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn calibration_rejects_unknown_names() {
        let mut c = CalibrationSet::default();
        assert!(c.set("xmac.check-s", 0.002).is_ok());
        assert!(c.set("device.Z1.rx-factor", 1.2).is_ok());
        assert!(c.set("warp-factor", 9.0).is_err());
        assert!(c.set("xmac.check-s", f64::NAN).is_err());
        assert_eq!(c.get("device.Unknown.tx-factor"), 1.0);
    }
}
