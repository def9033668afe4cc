//! Component-based stochastic state machines.
//!
//! Atomic components own locations, guarded transitions and a numeric
//! variable store. Components synchronise through interactions over their
//! exported transitions; interactions carry data transfers and are filtered
//! by an acyclic priority relation. Sojourn time lives on transitions: a
//! component stays (and is billed) in the source location until the sampled
//! duration has elapsed, then moves.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::energy::DeviceProfile;
use crate::stochastics::{rng_from_seed, substream_seed, Distribution, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatingMode {
    Lpm,
    Cpu,
    Tx,
    Rx,
}

impl OperatingMode {
    pub const ALL: [OperatingMode; 4] = [OperatingMode::Lpm, OperatingMode::Cpu, OperatingMode::Tx, OperatingMode::Rx];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatingMode::Lpm => "LPM",
            OperatingMode::Cpu => "CPU",
            OperatingMode::Tx => "Tx",
            OperatingMode::Rx => "Rx",
        }
    }

    /// Case-insensitive lookup.
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(name.trim()))
    }
}

impl fmt::Display for OperatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no duration for {0}")]
    MissingDuration(String),
    #[error("component {component}: {reason}")]
    InvalidComponent { component: String, reason: String },
    #[error("duplicate component id {0:?}")]
    DuplicateComponent(String),
    #[error("interaction {interaction}: {reason}")]
    UnresolvedInteraction { interaction: String, reason: String },
    #[error("priority relation is invalid: {0}")]
    InvalidPriority(String),
    #[error("device {device}: {reason}")]
    InvalidDevice { device: String, reason: String },
    #[error("{0} is not enabled in the current state")]
    NotEnabled(String),
}

pub type VarId = usize;
pub type LocId = usize;
pub type Guard = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;
pub type Action = Arc<dyn Fn(&mut [f64]) + Send + Sync>;

/// Failed attempts repeat the transition's duration up to `max_retries` extra times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub failure_probability: f64,
    pub max_retries: u32,
}

impl RetryPolicy {
    /// E[number of attempts] = Σ_{j=0..r} q^j.
    pub fn expected_attempts(&self) -> f64 {
        let q = self.failure_probability;
        (0..=self.max_retries).map(|j| q.powi(j as i32)).sum()
    }
}

#[derive(Clone)]
pub struct Transition {
    pub label: String,
    pub source: LocId,
    pub target: LocId,
    pub guard: Option<Guard>,
    pub duration: Distribution,
    pub exported: bool,
    pub action: Option<Action>,
    /// An interruptible transition in progress is abandoned when an interaction moves the component.
    pub interruptible: bool,
    /// Among enabled internal transitions only those of the highest rank are eligible.
    pub rank: u8,
    pub retry: Option<RetryPolicy>,
    pub peripheral_event: Option<Arc<str>>,
}

impl fmt::Debug for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transition")
            .field("label", &self.label)
            .field("source", &self.source)
            .field("target", &self.target)
            .field("guarded", &self.guard.is_some())
            .field("duration", &self.duration)
            .field("exported", &self.exported)
            .field("interruptible", &self.interruptible)
            .field("rank", &self.rank)
            .field("retry", &self.retry)
            .field("peripheral_event", &self.peripheral_event)
            .finish()
    }
}

impl Transition {
    pub fn new(label: impl Into<String>, source: LocId, target: LocId, duration: Distribution) -> Self {
        Self {
            label: label.into(),
            source,
            target,
            guard: None,
            duration,
            exported: false,
            action: None,
            interruptible: false,
            rank: 0,
            retry: None,
            peripheral_event: None,
        }
    }

    pub fn exported(mut self) -> Self {
        self.exported = true;
        self
    }

    pub fn guard(mut self, g: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.guard = Some(Arc::new(g));
        self
    }

    pub fn action(mut self, a: impl Fn(&mut [f64]) + Send + Sync + 'static) -> Self {
        self.action = Some(Arc::new(a));
        self
    }

    pub fn interruptible(mut self) -> Self {
        self.interruptible = true;
        self
    }

    pub fn rank(mut self, rank: u8) -> Self {
        self.rank = rank;
        self
    }

    pub fn retry(mut self, policy: Option<RetryPolicy>) -> Self {
        self.retry = policy;
        self
    }

    pub fn peripheral(mut self, event: &str) -> Self {
        self.peripheral_event = Some(Arc::from(event));
        self
    }

    #[inline]
    pub fn is_enabled(&self, vars: &[f64]) -> bool {
        self.guard.as_ref().is_none_or(|g| g(vars))
    }

    pub fn is_self_loop(&self) -> bool {
        self.source == self.target
    }

    /// One draw of the sojourn, summing attempts when a retry policy applies.
    #[inline]
    pub fn sample_duration<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut total = self.duration.sample(rng);
        if let Some(p) = self.retry {
            let mut retries = 0;
            while retries < p.max_retries && rng.random::<f64>() < p.failure_probability {
                total += self.duration.sample(rng);
                retries += 1;
            }
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct AtomicComponent {
    pub name: String,
    locations: Vec<String>,
    modes: Vec<Option<OperatingMode>>,
    initial: LocId,
    transitions: Vec<Transition>,
    var_names: Vec<String>,
    initial_values: Vec<f64>,
    internal_by_location: Vec<Vec<usize>>,
}

impl AtomicComponent {
    pub fn builder(name: impl Into<String>) -> ComponentBuilder {
        ComponentBuilder {
            name: name.into(),
            locations: Vec::new(),
            modes: Vec::new(),
            initial: None,
            transitions: Vec::new(),
            var_names: Vec::new(),
            initial_values: Vec::new(),
        }
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn location_name(&self, loc: LocId) -> &str {
        &self.locations[loc]
    }

    pub fn location(&self, name: &str) -> Option<LocId> {
        self.locations.iter().position(|l| l == name)
    }

    pub fn mode(&self, loc: LocId) -> Option<OperatingMode> {
        self.modes[loc]
    }

    pub fn initial(&self) -> LocId {
        self.initial
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.var_names.iter().position(|v| v == name)
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn initial_values(&self) -> &[f64] {
        &self.initial_values
    }

    pub fn exported_labels(&self) -> Vec<&str> {
        let mut labels: Vec<&str> =
            self.transitions.iter().filter(|t| t.exported).map(|t| t.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Internal transitions leaving `loc`.
    pub fn internal_from(&self, loc: LocId) -> &[usize] {
        &self.internal_by_location[loc]
    }

    /// Enabled internal transitions of the highest rank present.
    pub fn eligible_internal(&self, loc: LocId, vars: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let mut best = 0u8;
        for &t in &self.internal_by_location[loc] {
            let tr = &self.transitions[t];
            if !tr.is_enabled(vars) {
                continue;
            }
            if out.is_empty() || tr.rank > best {
                out.clear();
                best = tr.rank;
                out.push(t);
            } else if tr.rank == best {
                out.push(t);
            }
        }
    }
}

pub struct ComponentBuilder {
    name: String,
    locations: Vec<String>,
    modes: Vec<Option<OperatingMode>>,
    initial: Option<LocId>,
    transitions: Vec<Transition>,
    var_names: Vec<String>,
    initial_values: Vec<f64>,
}

impl ComponentBuilder {
    pub fn location(&mut self, name: &str, mode: Option<OperatingMode>) -> LocId {
        self.locations.push(name.to_string());
        self.modes.push(mode);
        self.locations.len() - 1
    }

    pub fn initial(&mut self, loc: LocId) -> &mut Self {
        self.initial = Some(loc);
        self
    }

    pub fn variable(&mut self, name: &str, value: f64) -> VarId {
        self.var_names.push(name.to_string());
        self.initial_values.push(value);
        self.var_names.len() - 1
    }

    pub fn transition(&mut self, t: Transition) -> &mut Self {
        self.transitions.push(t);
        self
    }

    pub fn build(self) -> Result<AtomicComponent, ModelError> {
        let bad = |reason: String| ModelError::InvalidComponent { component: self.name.clone(), reason };
        let initial = self.initial.ok_or_else(|| bad("no initial location".into()))?;
        if initial >= self.locations.len() {
            return Err(bad(format!("initial location {initial} is not declared")));
        }
        let mut seen = HashSet::new();
        for l in &self.locations {
            if !seen.insert(l) {
                return Err(bad(format!("duplicate location {l:?}")));
            }
        }
        let mut internal_by_location = vec![Vec::new(); self.locations.len()];
        for (i, t) in self.transitions.iter().enumerate() {
            if t.source >= self.locations.len() || t.target >= self.locations.len() {
                return Err(bad(format!("transition {} references an undeclared location", t.label)));
            }
            if !t.exported {
                internal_by_location[t.source].push(i);
            }
        }
        Ok(AtomicComponent {
            name: self.name,
            locations: self.locations,
            modes: self.modes,
            initial,
            transitions: self.transitions,
            var_names: self.var_names,
            initial_values: self.initial_values,
            internal_by_location,
        })
    }
}

/// A participant port: the exported label `label` of component `component`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Port {
    pub component: usize,
    pub label: String,
}

/// Copies `from` (participant index, variable) into `to` when the interaction fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub from: (usize, VarId),
    pub to: (usize, VarId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub name: String,
    pub participants: Vec<Port>,
    pub transfers: Vec<Transfer>,
}

impl Interaction {
    pub fn new(name: impl Into<String>, participants: Vec<Port>) -> Self {
        Self { name: name.into(), participants, transfers: Vec::new() }
    }

    pub fn with_transfer(mut self, from: (usize, VarId), to: (usize, VarId)) -> Self {
        self.transfers.push(Transfer { from, to });
        self
    }
}

/// `(higher, lower)`: when both are enabled, `lower` is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Priority {
    pub higher: usize,
    pub lower: usize,
}

/// Energy-relevant metadata attached to a component that models a device.
#[derive(Debug, Clone)]
pub struct Device {
    pub name: String,
    pub component: usize,
    pub device_type: String,
    pub role: String,
    pub profile: Arc<DeviceProfile>,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedPort {
    pub component: usize,
    /// Transitions carrying the port label, per source location.
    pub by_location: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    components: Vec<AtomicComponent>,
    interactions: Vec<Interaction>,
    priorities: Vec<Priority>,
    devices: Vec<Device>,
    /// Device whose ledger receives modes and peripheral events of each component.
    owner: Vec<Option<usize>>,
    pub(crate) ports: Vec<Vec<ResolvedPort>>,
    pub(crate) interactions_of: Vec<Vec<usize>>,
    pub(crate) higher_than: Vec<Vec<usize>>,
}

/// Current location and variable store of every component.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub locations: Vec<LocId>,
    pub vars: Vec<Vec<f64>>,
}

/// A single step of the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Internal { component: usize, transition: usize },
    Interaction(usize),
}

impl SystemModel {
    /// Validates and indexes a system. `owners` maps extra (non-device)
    /// components to the device they belong to, e.g. a device's timer.
    pub fn new(
        components: Vec<AtomicComponent>,
        interactions: Vec<Interaction>,
        priorities: Vec<Priority>,
        devices: Vec<Device>,
        owners: &[(usize, usize)],
    ) -> Result<Self, ModelError> {
        let mut names = HashSet::new();
        for c in &components {
            if !names.insert(c.name.as_str()) {
                return Err(ModelError::DuplicateComponent(c.name.clone()));
            }
        }
        let n = components.len();
        let mut ports = Vec::with_capacity(interactions.len());
        let mut interactions_of = vec![Vec::new(); n];
        for (ix, inter) in interactions.iter().enumerate() {
            let unresolved =
                |reason: String| ModelError::UnresolvedInteraction { interaction: inter.name.clone(), reason };
            if inter.participants.is_empty() {
                return Err(unresolved("no participants".into()));
            }
            let mut resolved = Vec::with_capacity(inter.participants.len());
            let mut members = HashSet::new();
            for p in &inter.participants {
                let comp = components
                    .get(p.component)
                    .ok_or_else(|| unresolved(format!("component index {} does not exist", p.component)))?;
                if !members.insert(p.component) {
                    return Err(unresolved(format!("component {} participates twice", comp.name)));
                }
                let mut by_location = vec![Vec::new(); comp.locations.len()];
                let mut found = false;
                for (ti, t) in comp.transitions.iter().enumerate() {
                    if t.label == p.label {
                        if !t.exported {
                            return Err(unresolved(format!("{}.{} is not exported", comp.name, p.label)));
                        }
                        by_location[t.source].push(ti);
                        found = true;
                    }
                }
                if !found {
                    return Err(unresolved(format!("{} has no transition {:?}", comp.name, p.label)));
                }
                interactions_of[p.component].push(ix);
                resolved.push(ResolvedPort { component: p.component, by_location });
            }
            for tr in &inter.transfers {
                for (pi, var) in [tr.from, tr.to] {
                    let ok = inter
                        .participants
                        .get(pi)
                        .is_some_and(|p| var < components[p.component].var_names.len());
                    if !ok {
                        return Err(unresolved(format!("data transfer references participant {pi} variable {var}")));
                    }
                }
            }
            ports.push(resolved);
        }
        let mut higher_than = vec![Vec::new(); interactions.len()];
        for p in &priorities {
            if p.higher >= interactions.len() || p.lower >= interactions.len() {
                return Err(ModelError::InvalidPriority(format!("pair ({}, {}) references a missing interaction", p.higher, p.lower)));
            }
            higher_than[p.lower].push(p.higher);
        }
        check_acyclic(&higher_than, &interactions)?;
        let mut owner = vec![None; n];
        for (di, d) in devices.iter().enumerate() {
            if d.component >= n {
                return Err(ModelError::InvalidDevice { device: d.name.clone(), reason: "component does not exist".into() });
            }
            if owner[d.component].is_some() {
                return Err(ModelError::InvalidDevice { device: d.name.clone(), reason: "component already bound".into() });
            }
            owner[d.component] = Some(di);
        }
        for &(comp, dev) in owners {
            if comp >= n || dev >= devices.len() {
                return Err(ModelError::InvalidDevice { device: format!("#{dev}"), reason: format!("bad owner pair ({comp}, {dev})") });
            }
            if owner[comp].is_some() {
                return Err(ModelError::InvalidDevice { device: devices[dev].name.clone(), reason: format!("component {} already owned", components[comp].name) });
            }
            owner[comp] = Some(dev);
        }
        Ok(Self { components, interactions, priorities, devices, owner, ports, interactions_of, higher_than })
    }

    pub fn components(&self) -> &[AtomicComponent] {
        &self.components
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn priorities(&self) -> &[Priority] {
        &self.priorities
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn owner(&self, component: usize) -> Option<usize> {
        self.owner[component]
    }

    /// The component's device if the component is the device's energy automaton.
    pub fn device_of_component(&self, component: usize) -> Option<usize> {
        self.owner[component].filter(|&d| self.devices[d].component == component)
    }

    pub fn component_index(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }

    pub fn initial_state(&self) -> SystemState {
        SystemState {
            locations: self.components.iter().map(|c| c.initial).collect(),
            vars: self.components.iter().map(|c| c.initial_values.clone()).collect(),
        }
    }

    /// Per-component random streams for a replica seeded `seed`.
    pub fn component_rngs(&self, seed: u64) -> Vec<SimRng> {
        (0..self.components.len()).map(|j| rng_from_seed(substream_seed(seed, j as u64 + 1))).collect()
    }

    /// Transitions of participant `p` of `ix` enabled in `state`.
    pub(crate) fn port_enabled<'a>(&'a self, ix: usize, p: usize, loc: LocId, vars: &'a [f64]) -> impl Iterator<Item = usize> + 'a {
        let port = &self.ports[ix][p];
        let comp = &self.components[port.component];
        port.by_location[loc].iter().copied().filter(move |&t| comp.transitions[t].is_enabled(vars))
    }

    /// Every participant has an enabled transition carrying its port label.
    pub fn interaction_enabled(&self, ix: usize, state: &SystemState) -> bool {
        self.ports[ix].iter().enumerate().all(|(p, port)| {
            let c = port.component;
            self.port_enabled(ix, p, state.locations[c], &state.vars[c]).next().is_some()
        })
    }

    pub fn enabled_internal(&self, state: &SystemState) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        for (c, comp) in self.components.iter().enumerate() {
            comp.eligible_internal(state.locations[c], &state.vars[c], &mut buf);
            out.extend(buf.iter().map(|&t| (c, t)));
        }
        out
    }

    /// Picks one of `candidates` uniformly with `rng`.
    pub(crate) fn pick<R: RngCore + ?Sized>(candidates: &[usize], rng: &mut R) -> usize {
        if candidates.len() == 1 {
            candidates[0]
        } else {
            candidates[rng.random_range(0..candidates.len())]
        }
    }

    /// Chooses one enabled transition per participant. `None` if some participant has none.
    pub(crate) fn choose_port_transitions(
        &self,
        ix: usize,
        state: &SystemState,
        rngs: &mut [SimRng],
        buf: &mut Vec<usize>,
        out: &mut Vec<usize>,
    ) -> bool {
        out.clear();
        for (p, port) in self.ports[ix].iter().enumerate() {
            let c = port.component;
            buf.clear();
            buf.extend(self.port_enabled(ix, p, state.locations[c], &state.vars[c]));
            if buf.is_empty() {
                return false;
            }
            out.push(Self::pick(buf, &mut rngs[c]));
        }
        true
    }

    /// Applies the effects of an interaction: data transfers, then actions, then moves.
    pub(crate) fn apply_interaction(&self, ix: usize, chosen: &[usize], state: &mut SystemState) {
        let inter = &self.interactions[ix];
        if !inter.transfers.is_empty() {
            let values: Vec<f64> = inter
                .transfers
                .iter()
                .map(|t| state.vars[inter.participants[t.from.0].component][t.from.1])
                .collect();
            for (t, v) in inter.transfers.iter().zip(values) {
                state.vars[inter.participants[t.to.0].component][t.to.1] = v;
            }
        }
        for (port, &t) in self.ports[ix].iter().zip(chosen) {
            self.apply_transition(port.component, t, state);
        }
    }

    #[inline]
    pub(crate) fn apply_transition(&self, component: usize, t: usize, state: &mut SystemState) {
        let tr = &self.components[component].transitions[t];
        if let Some(a) = &tr.action {
            a(&mut state.vars[component]);
        }
        state.locations[component] = tr.target;
    }

    /// Executes a move atomically and returns its elapsed time: the sampled
    /// duration, or the maximum over participants for an interaction.
    pub fn fire(&self, state: &mut SystemState, mv: Move, rngs: &mut [SimRng]) -> Result<f64, ModelError> {
        match mv {
            Move::Internal { component, transition } => {
                let comp = &self.components[component];
                let tr = comp
                    .transitions
                    .get(transition)
                    .ok_or_else(|| ModelError::NotEnabled(format!("{}#{transition}", comp.name)))?;
                if tr.exported || tr.source != state.locations[component] || !tr.is_enabled(&state.vars[component]) {
                    return Err(ModelError::NotEnabled(format!("{}.{}", comp.name, tr.label)));
                }
                let elapsed = tr.sample_duration(&mut rngs[component]);
                self.apply_transition(component, transition, state);
                Ok(elapsed)
            }
            Move::Interaction(ix) => {
                let name = || self.interactions.get(ix).map_or(format!("interaction #{ix}"), |i| i.name.clone());
                if ix >= self.interactions.len() {
                    return Err(ModelError::NotEnabled(name()));
                }
                let mut buf = Vec::new();
                let mut chosen = Vec::new();
                if !self.choose_port_transitions(ix, state, rngs, &mut buf, &mut chosen) {
                    return Err(ModelError::NotEnabled(name()));
                }
                let mut elapsed: f64 = 0.0;
                for (port, &t) in self.ports[ix].iter().zip(&chosen) {
                    let d = self.components[port.component].transitions[t].sample_duration(&mut rngs[port.component]);
                    elapsed = elapsed.max(d);
                }
                self.apply_interaction(ix, &chosen, state);
                Ok(elapsed)
            }
        }
    }
}

fn check_acyclic(higher_than: &[Vec<usize>], interactions: &[Interaction]) -> Result<(), ModelError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    fn visit(v: usize, edges: &[Vec<usize>], mark: &mut [u8]) -> Option<usize> {
        mark[v] = 1;
        for &w in &edges[v] {
            match mark[w] {
                1 => return Some(w),
                0 => {
                    if let Some(c) = visit(w, edges, mark) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        mark[v] = 2;
        None
    }
    let mut mark = vec![0u8; higher_than.len()];
    for v in 0..higher_than.len() {
        if mark[v] == 0 {
            if let Some(c) = visit(v, higher_than, &mut mark) {
                return Err(ModelError::InvalidPriority(format!("cycle through {:?}", interactions[c].name)));
            }
        }
    }
    Ok(())
}

/// Removes every interaction for which a declared higher one is also present.
pub fn priority_filter(system: &SystemModel, enabled: &[usize]) -> Vec<usize> {
    enabled
        .iter()
        .copied()
        .filter(|&i| !system.higher_than[i].iter().any(|h| enabled.contains(h)))
        .collect()
}

/// Interactions whose every participant transition is enabled, after priority filtering.
pub fn enabled_interactions(system: &SystemModel, state: &SystemState) -> Vec<usize> {
    let raw: Vec<usize> = (0..system.interactions.len()).filter(|&ix| system.interaction_enabled(ix, state)).collect();
    priority_filter(system, &raw)
}

/// Duration sources of the canonical energy automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimingKey {
    Activate,
    Process,
    /// CPU time spent preparing a packet (billed to CPU).
    SndPacket,
    Recv,
    /// Radio time per transmission (billed to Tx).
    TxSojourn,
    /// Radio time per received message (billed to Rx).
    RxReceive,
    /// Idle channel listening per duty cycle (billed to Rx).
    RxListen,
    /// Sleep per duty cycle (billed to LPM).
    LpmSleep,
    Tick,
}

impl TimingKey {
    pub const ALL: [TimingKey; 9] = [
        TimingKey::Activate,
        TimingKey::Process,
        TimingKey::SndPacket,
        TimingKey::Recv,
        TimingKey::TxSojourn,
        TimingKey::RxReceive,
        TimingKey::RxListen,
        TimingKey::LpmSleep,
        TimingKey::Tick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimingKey::Activate => "activate",
            TimingKey::Process => "process",
            TimingKey::SndPacket => "sndPacket",
            TimingKey::Recv => "recv",
            TimingKey::TxSojourn => "initDutyCycle.tx",
            TimingKey::RxReceive => "initDutyCycle.rx-receive",
            TimingKey::RxListen => "initDutyCycle.rx-listen",
            TimingKey::LpmSleep => "initDutyCycle.lpm-sleep",
            TimingKey::Tick => "tick",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Mode billed while this duration elapses.
    pub fn billed_mode(self) -> Option<OperatingMode> {
        match self {
            TimingKey::Activate => None,
            TimingKey::Process | TimingKey::LpmSleep | TimingKey::Tick => Some(OperatingMode::Lpm),
            TimingKey::SndPacket => Some(OperatingMode::Cpu),
            TimingKey::TxSojourn => Some(OperatingMode::Tx),
            TimingKey::Recv | TimingKey::RxReceive | TimingKey::RxListen => Some(OperatingMode::Rx),
        }
    }
}

impl fmt::Display for TimingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingEntry {
    pub duration: Distribution,
    pub retry: Option<RetryPolicy>,
}

impl TimingEntry {
    pub fn new(duration: Distribution) -> Self {
        Self { duration, retry: None }
    }

    /// Expected sojourn including retries.
    pub fn expected(&self) -> f64 {
        self.duration.mean().max(0.0) * self.retry.map_or(1.0, |r| r.expected_attempts())
    }
}

/// Duration distribution for every arc of the energy automaton.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeTimingModel {
    entries: BTreeMap<TimingKey, TimingEntry>,
}

impl ModeTimingModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: TimingKey, entry: TimingEntry) -> &mut Self {
        self.entries.insert(key, entry);
        self
    }

    pub fn remove(&mut self, key: TimingKey) -> Option<TimingEntry> {
        self.entries.remove(&key)
    }

    pub fn get(&self, key: TimingKey) -> Option<&TimingEntry> {
        self.entries.get(&key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (TimingKey, &TimingEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn expected(&self, key: TimingKey) -> f64 {
        self.entries.get(&key).map_or(0.0, TimingEntry::expected)
    }

    fn require(&self, key: TimingKey) -> Result<&TimingEntry, ModelError> {
        self.entries.get(&key).ok_or_else(|| ModelError::MissingDuration(key.name().to_string()))
    }

    pub fn has_duty_cycle(&self) -> bool {
        self.entries.contains_key(&TimingKey::LpmSleep) && self.entries.contains_key(&TimingKey::RxListen)
    }
}

/// Location indices of the canonical energy automaton.
pub mod loc {
    pub const OFF: usize = 0;
    pub const LPM: usize = 1;
    pub const CPU: usize = 2;
    pub const TX: usize = 3;
    pub const RX: usize = 4;
}

/// Variable names of the canonical energy automaton.
pub mod var {
    /// Packets waiting to be processed and sent.
    pub const PENDING_TX: &str = "pending_tx";
    /// 0 while idle-listening, 1 while receiving a message.
    pub const RX_REASON: &str = "rx_reason";
    /// 1 if received messages are queued for forwarding.
    pub const RELAY: &str = "relay";
    /// Reports delivered by the last tick.
    pub const INCOMING: &str = "incoming";
}

/// Builds the energy automaton of one device.
///
/// Locations Off, LPM, CPU, Tx, Rx. `activate` leaves Off; `process` moves to
/// CPU when a packet is pending; exported `sndPacket` carries the CPU time and
/// enters Tx; exported `recv` enters Rx from LPM, Tx or an idle listen;
/// `initDutyCycle` returns Tx and Rx to LPM and, when duty-cycle timing is
/// present, also wakes LPM into an idle Rx listen. Exported `tick` is a
/// self-loop on LPM and on idle Rx that takes `incoming` into `pending_tx`.
pub fn build_energy_automaton(
    name: &str,
    profile: &DeviceProfile,
    timing: &ModeTimingModel,
    relay: bool,
) -> Result<AtomicComponent, ModelError> {
    // the profile only prices time; every duration comes from `timing`
    let _ = profile;
    let activate = timing.require(TimingKey::Activate)?;
    let process = timing.require(TimingKey::Process)?;
    let snd = timing.require(TimingKey::SndPacket)?;
    let recv = timing.require(TimingKey::Recv)?;
    let tx = timing.require(TimingKey::TxSojourn)?;
    let rx_receive = timing.require(TimingKey::RxReceive)?;
    let tick = timing.require(TimingKey::Tick)?;
    let duty = match (timing.get(TimingKey::LpmSleep), timing.get(TimingKey::RxListen)) {
        (Some(s), Some(l)) => Some((s, l)),
        (None, None) => None,
        (Some(_), None) => return Err(ModelError::MissingDuration(TimingKey::RxListen.name().into())),
        (None, Some(_)) => return Err(ModelError::MissingDuration(TimingKey::LpmSleep.name().into())),
    };

    let mut b = AtomicComponent::builder(name);
    let off = b.location("Off", None);
    let lpm = b.location("LPM", Some(OperatingMode::Lpm));
    let cpu = b.location("CPU", Some(OperatingMode::Cpu));
    let txl = b.location("Tx", Some(OperatingMode::Tx));
    let rxl = b.location("Rx", Some(OperatingMode::Rx));
    debug_assert_eq!([off, lpm, cpu, txl, rxl], [loc::OFF, loc::LPM, loc::CPU, loc::TX, loc::RX]);
    b.initial(off);
    let pending = b.variable(var::PENDING_TX, 0.0);
    let reason = b.variable(var::RX_REASON, 0.0);
    let relay_v = b.variable(var::RELAY, if relay { 1.0 } else { 0.0 });
    let incoming = b.variable(var::INCOMING, 0.0);

    let start_receive = move |v: &mut [f64]| {
        v[reason] = 1.0;
        v[pending] += v[relay_v];
    };
    let take_reports = move |v: &mut [f64]| {
        v[pending] += v[incoming];
        v[incoming] = 0.0;
    };
    let listening = move |v: &[f64]| v[reason] == 0.0;

    b.transition(Transition::new("activate", off, lpm, activate.duration.clone()).retry(activate.retry));
    b.transition(
        Transition::new("process", lpm, cpu, process.duration.clone())
            .guard(move |v| v[pending] > 0.0)
            .rank(1),
    );
    b.transition(
        Transition::new("process", rxl, cpu, process.duration.clone())
            .guard(move |v| v[pending] > 0.0 && v[reason] == 0.0)
            .rank(1),
    );
    b.transition(
        Transition::new("sndPacket", cpu, txl, snd.duration.clone())
            .exported()
            .retry(snd.retry)
            .action(move |v| v[pending] = (v[pending] - 1.0).max(0.0)),
    );
    for src in [lpm, txl] {
        b.transition(Transition::new("recv", src, rxl, recv.duration.clone()).exported().action(start_receive));
    }
    b.transition(
        Transition::new("recv", rxl, rxl, recv.duration.clone()).exported().guard(listening).action(start_receive),
    );
    b.transition(Transition::new("initDutyCycle", txl, lpm, tx.duration.clone()).retry(tx.retry));
    b.transition(
        Transition::new("initDutyCycle", rxl, lpm, rx_receive.duration.clone())
            .retry(rx_receive.retry)
            .guard(move |v| v[reason] == 1.0)
            .action(move |v| v[reason] = 0.0),
    );
    if let Some((sleep, listen)) = duty {
        b.transition(
            Transition::new("initDutyCycle", lpm, rxl, sleep.duration.clone())
                .interruptible()
                .action(move |v| v[reason] = 0.0),
        );
        b.transition(
            Transition::new("initDutyCycle", rxl, lpm, listen.duration.clone())
                .guard(listening)
                .interruptible(),
        );
    }
    b.transition(Transition::new("tick", lpm, lpm, tick.duration.clone()).exported().action(take_reports));
    b.transition(
        Transition::new("tick", rxl, rxl, tick.duration.clone()).exported().guard(listening).action(take_reports),
    );
    b.build()
}
