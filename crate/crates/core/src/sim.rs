//! Discrete-event execution of a [`SystemModel`].
//!
//! Each component is either idle, waiting on an internal transition it has
//! started, or taking part in an interaction. Entering a location starts one
//! of the highest-ranked enabled internal transitions (seeded uniform choice)
//! with a sampled duration; the move is applied when that duration ends.
//! Interactions are urgent: they start as soon as every participant is free
//! (idle, or waiting on an interruptible transition) and end after the
//! largest participant duration. Mode time is billed to the location a
//! component occupies, so sojourns are charged to the source location.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::energy::{EnergyLedger, ModeInterval};
use crate::model::{OperatingMode, SystemModel, SystemState};
use crate::stochastics::{rng_from_seed, substream_seed, SimRng};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const WORK_START: f64 = 8.0 * 3600.0;
pub const WORK_END: f64 = 18.0 * 3600.0;
/// Events allowed at one timestamp before the run is declared Zeno.
const ZENO_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("deadlock at t={time:.6} s: no transition can advance time\n{snapshot}")]
    Deadlock { time: f64, snapshot: String },
    #[error("more than {ZENO_LIMIT} events at t={time:.6} s")]
    Zeno { time: f64 },
    #[error("replica count must be at least 1")]
    NoReplicas,
    #[error("powertrace period and rtimer rate must be positive")]
    BadPowertraceConfig,
}

/// Seconds of `[0, t)` that fall in working hours.
#[inline]
pub fn working_seconds_before(t: f64) -> f64 {
    let days = (t / SECONDS_PER_DAY).floor();
    let r = t - days * SECONDS_PER_DAY;
    days * (WORK_END - WORK_START) + (r - WORK_START).clamp(0.0, WORK_END - WORK_START)
}

/// Length of `[a, b)` inside working hours.
#[inline]
pub fn working_overlap(a: f64, b: f64) -> f64 {
    if b <= a {
        0.0
    } else {
        (working_seconds_before(b) - working_seconds_before(a)).max(0.0)
    }
}

pub fn is_working_time(t: f64) -> bool {
    let r = t.rem_euclid(SECONDS_PER_DAY);
    (WORK_START..WORK_END).contains(&r)
}

/// Observer of a run. Intervals are reported once closed, in time order per device.
pub trait TraceSink {
    fn activated(&mut self, _device: usize, _time: f64) {}
    fn interval(&mut self, device: usize, mode: OperatingMode, start: f64, end: f64);
    fn event(&mut self, _time: f64, _component: usize, _label: u32) {}
    fn peripheral(&mut self, device: usize, time: f64, event: &Arc<str>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub component: u32,
    pub label: u32,
}

#[derive(Debug, Clone)]
pub struct DeviceTrace {
    pub name: String,
    pub device_type: String,
    pub role: String,
    pub profile: Arc<crate::energy::DeviceProfile>,
    pub ledger: EnergyLedger,
}

/// Everything observed in one run.
#[derive(Debug, Clone)]
pub struct Trace {
    pub horizon: f64,
    pub seed: u64,
    pub devices: Vec<DeviceTrace>,
    pub events: Vec<EventRecord>,
    pub labels: Vec<Arc<str>>,
    pub component_names: Vec<String>,
}

impl Trace {
    pub fn device(&self, name: &str) -> Option<&DeviceTrace> {
        self.devices.iter().find(|d| d.name == name)
    }
}

struct TraceBuilder {
    ledgers: Vec<EnergyLedger>,
    events: Vec<EventRecord>,
    keep_events: bool,
}

impl TraceSink for TraceBuilder {
    fn activated(&mut self, device: usize, time: f64) {
        self.ledgers[device].window.0 = time;
    }

    fn interval(&mut self, device: usize, mode: OperatingMode, start: f64, end: f64) {
        self.ledgers[device].intervals.push(ModeInterval { mode, start, duration: end - start });
    }

    fn event(&mut self, time: f64, component: usize, label: u32) {
        if self.keep_events {
            self.events.push(EventRecord { time, component: component as u32, label });
        }
    }

    fn peripheral(&mut self, device: usize, time: f64, event: &Arc<str>) {
        self.ledgers[device].peripheral_events.push((time, event.clone()));
    }
}

/// Streaming per-device totals, enough to evaluate every requirement.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSummary {
    pub name: String,
    pub window: (f64, f64),
    pub mode_time: [f64; 4],
    pub visits: [u64; 4],
    pub working_mode_time: [f64; 4],
    pub peripheral_counts: Vec<(Arc<str>, u64)>,
    /// Peripheral events that occurred inside working hours.
    pub working_peripheral_counts: Vec<(Arc<str>, u64)>,
    pub activated: bool,
}

impl DeviceSummary {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            window: (0.0, 0.0),
            mode_time: [0.0; 4],
            visits: [0; 4],
            working_mode_time: [0.0; 4],
            peripheral_counts: Vec::new(),
            working_peripheral_counts: Vec::new(),
            activated: false,
        }
    }

    pub fn from_ledger(ledger: &EnergyLedger) -> Self {
        let mut s = Self::new(ledger.device.clone());
        s.window = ledger.window;
        s.activated = true;
        for i in &ledger.intervals {
            s.add_interval(i.mode, i.start, i.end());
        }
        for (t, e) in &ledger.peripheral_events {
            s.add_peripheral(*t, e);
        }
        s
    }

    #[inline]
    pub fn add_interval(&mut self, mode: OperatingMode, start: f64, end: f64) {
        let m = mode.index();
        self.mode_time[m] += end - start;
        self.visits[m] += 1;
        self.working_mode_time[m] += working_overlap(start, end);
    }

    #[inline]
    pub fn add_peripheral(&mut self, time: f64, event: &Arc<str>) {
        bump(&mut self.peripheral_counts, event);
        if is_working_time(time) {
            bump(&mut self.working_peripheral_counts, event);
        }
    }

    pub fn window_length(&self) -> f64 {
        self.window.1 - self.window.0
    }

    pub fn working_window_length(&self) -> f64 {
        working_overlap(self.window.0, self.window.1)
    }
}

fn bump(counts: &mut Vec<(Arc<str>, u64)>, event: &Arc<str>) {
    match counts.iter_mut().find(|(e, _)| e == event) {
        Some((_, n)) => *n += 1,
        None => counts.push((event.clone(), 1)),
    }
}

/// Summaries of every device of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub horizon: f64,
    pub devices: Vec<DeviceSummary>,
    pub events: u64,
}

struct SummarySink {
    devices: Vec<DeviceSummary>,
}

impl TraceSink for SummarySink {
    fn activated(&mut self, device: usize, time: f64) {
        self.devices[device].window.0 = time;
        self.devices[device].activated = true;
    }

    #[inline]
    fn interval(&mut self, device: usize, mode: OperatingMode, start: f64, end: f64) {
        self.devices[device].add_interval(mode, start, end);
    }

    fn peripheral(&mut self, device: usize, time: f64, event: &Arc<str>) {
        self.devices[device].add_peripheral(time, event);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activity {
    Idle,
    /// Waiting on internal transition `transition`, valid while `generation` matches.
    Waiting { transition: usize, end: f64, interruptible: bool },
    Interacting,
}

#[derive(Debug, Clone, Copy)]
struct Suspended {
    transition: usize,
    end: f64,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Internal { component: u32, transition: u32, generation: u32 },
    Interaction { index: u32, slot: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    device_key: u32,
    label_key: u32,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed so the BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.device_key.cmp(&self.device_key))
            .then_with(|| other.label_key.cmp(&self.label_key))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct ActiveInteraction {
    chosen: Vec<usize>,
}

struct Engine<'a, S: TraceSink> {
    sys: &'a SystemModel,
    state: SystemState,
    rngs: Vec<SimRng>,
    sched_rng: SimRng,
    activity: Vec<Activity>,
    generation: Vec<u32>,
    suspended: Vec<Option<Suspended>>,
    /// Start of the open mode interval of each device.
    open: Vec<Option<(OperatingMode, f64)>>,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    horizon: f64,
    active: Vec<Option<ActiveInteraction>>,
    free_slots: Vec<usize>,
    dirty: Vec<bool>,
    dirty_list: Vec<usize>,
    label_ids: Vec<Vec<u32>>,
    interaction_label: Vec<u32>,
    interaction_key: Vec<u32>,
    sink: &'a mut S,
    events: u64,
    scratch: Vec<usize>,
    scratch2: Vec<usize>,
    candidates: Vec<usize>,
}

/// Interned transition labels of a system, in first-seen order.
pub fn label_table(sys: &SystemModel) -> (Vec<Arc<str>>, Vec<Vec<u32>>) {
    let mut labels: Vec<Arc<str>> = Vec::new();
    let ids = sys
        .components()
        .iter()
        .map(|c| {
            c.transitions()
                .iter()
                .map(|t| match labels.iter().position(|l| **l == *t.label) {
                    Some(i) => i as u32,
                    None => {
                        labels.push(Arc::from(t.label.as_str()));
                        (labels.len() - 1) as u32
                    }
                })
                .collect()
        })
        .collect();
    (labels, ids)
}

impl<'a, S: TraceSink> Engine<'a, S> {
    fn new(sys: &'a SystemModel, horizon: f64, seed: u64, sink: &'a mut S) -> Self {
        let n = sys.components().len();
        let (labels, label_ids) = label_table(sys);
        // tie-break keys follow lexicographic label order
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
        let mut rank = vec![0u32; labels.len()];
        for (r, &l) in order.iter().enumerate() {
            rank[l] = r as u32;
        }
        let label_ids: Vec<Vec<u32>> =
            label_ids.into_iter().map(|v| v.into_iter().map(|l| rank[l as usize]).collect()).collect();
        let interaction_label = sys
            .interactions()
            .iter()
            .map(|i| {
                let p = &i.participants[0];
                let c = &sys.components()[p.component];
                let t = c.transitions().iter().position(|t| t.label == p.label).unwrap_or(0);
                label_ids[p.component].get(t).copied().unwrap_or(0)
            })
            .collect();
        let interaction_key = sys
            .interactions()
            .iter()
            .map(|i| i.participants.iter().map(|p| device_key(sys, p.component)).min().unwrap_or(0))
            .collect();
        Self {
            sys,
            state: sys.initial_state(),
            rngs: sys.component_rngs(seed),
            sched_rng: rng_from_seed(substream_seed(seed, 0)),
            activity: vec![Activity::Idle; n],
            generation: vec![0; n],
            suspended: vec![None; n],
            open: vec![None; sys.devices().len()],
            queue: BinaryHeap::with_capacity(4 * n + 16),
            seq: 0,
            now: 0.0,
            horizon,
            active: Vec::new(),
            free_slots: Vec::new(),
            dirty: vec![false; n],
            dirty_list: Vec::with_capacity(n),
            label_ids,
            interaction_label,
            interaction_key,
            sink,
            events: 0,
            scratch: Vec::new(),
            scratch2: Vec::new(),
            candidates: Vec::new(),
        }
    }

    fn push(&mut self, time: f64, device_key: u32, label_key: u32, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event { time, device_key, label_key, seq: self.seq, kind });
    }

    fn mark(&mut self, c: usize) {
        if !self.dirty[c] {
            self.dirty[c] = true;
            self.dirty_list.push(c);
        }
    }

    /// Records the move of component `c` into its (already updated) location.
    fn on_location_change(&mut self, c: usize, from: usize) {
        let Some(d) = self.sys.device_of_component(c) else { return };
        let comp = &self.sys.components()[c];
        let to = self.state.locations[c];
        let old = comp.mode(from);
        let new = comp.mode(to);
        if old == new {
            return;
        }
        if let Some((m, start)) = self.open[d].take() {
            if self.now > start {
                self.sink.interval(d, m, start, self.now);
            }
        } else if old.is_none() && new.is_some() {
            self.sink.activated(d, self.now);
        }
        self.open[d] = new.map(|m| (m, self.now));
    }

    fn record_transition(&mut self, c: usize, t: usize) {
        self.events += 1;
        let label = self.label_ids[c][t];
        self.sink.event(self.now, c, label);
        if let Some(ev) = &self.sys.components()[c].transitions()[t].peripheral_event {
            if let Some(d) = self.sys.owner(c) {
                self.sink.peripheral(d, self.now, ev);
            }
        }
    }

    /// Starts an internal transition for an idle component, if any is eligible.
    fn settle(&mut self, c: usize) {
        debug_assert!(matches!(self.activity[c], Activity::Idle));
        let comp = &self.sys.components()[c];
        let loc = self.state.locations[c];
        let mut buf = std::mem::take(&mut self.scratch);
        comp.eligible_internal(loc, &self.state.vars[c], &mut buf);
        if !buf.is_empty() {
            let t = SystemModel::pick(&buf, &mut self.rngs[c]);
            let tr = &comp.transitions()[t];
            let end = self.now + tr.sample_duration(&mut self.rngs[c]);
            self.start_waiting(c, t, end);
        }
        self.scratch = buf;
    }

    fn start_waiting(&mut self, c: usize, t: usize, end: f64) {
        let tr = &self.sys.components()[c].transitions()[t];
        self.generation[c] = self.generation[c].wrapping_add(1);
        self.activity[c] = Activity::Waiting { transition: t, end, interruptible: tr.interruptible };
        let key = device_key(self.sys, c);
        let label = self.label_ids[c][t];
        self.push(
            end,
            key,
            label,
            EventKind::Internal { component: c as u32, transition: t as u32, generation: self.generation[c] },
        );
    }

    /// Resumes a suspended wait when it is still valid, otherwise picks afresh.
    fn resume(&mut self, c: usize) {
        if let Some(s) = self.suspended[c].take() {
            let comp = &self.sys.components()[c];
            let loc = self.state.locations[c];
            let tr = &comp.transitions()[s.transition];
            if tr.source == loc && tr.is_enabled(&self.state.vars[c]) {
                let mut buf = std::mem::take(&mut self.scratch);
                comp.eligible_internal(loc, &self.state.vars[c], &mut buf);
                let outranked = buf.iter().any(|&o| comp.transitions()[o].rank > tr.rank);
                self.scratch = buf;
                if !outranked {
                    self.start_waiting(c, s.transition, s.end.max(self.now));
                    return;
                }
            }
        }
        self.settle(c);
    }

    fn available(&self, c: usize) -> bool {
        match self.activity[c] {
            Activity::Idle => true,
            Activity::Waiting { interruptible, .. } => interruptible,
            Activity::Interacting => false,
        }
    }

    fn fireable(&self, ix: usize) -> bool {
        self.sys.ports[ix].iter().enumerate().all(|(p, port)| {
            let c = port.component;
            self.available(c) && self.sys.port_enabled(ix, p, self.state.locations[c], &self.state.vars[c]).next().is_some()
        })
    }

    /// Starts every urgent interaction touching a changed component.
    fn fire_interactions(&mut self) {
        loop {
            let mut cands = std::mem::take(&mut self.candidates);
            cands.clear();
            for &c in &self.dirty_list {
                for &ix in &self.sys.interactions_of[c] {
                    if !cands.contains(&ix) && self.fireable(ix) {
                        cands.push(ix);
                    }
                }
            }
            if cands.is_empty() {
                self.candidates = cands;
                break;
            }
            let filtered: Vec<usize> = cands
                .iter()
                .copied()
                .filter(|&i| !self.sys.higher_than[i].iter().any(|&h| self.fireable(h)))
                .collect();
            self.candidates = cands;
            if filtered.is_empty() {
                break;
            }
            let ix = SystemModel::pick(&filtered, &mut self.sched_rng);
            self.start_interaction(ix);
        }
        for &c in &self.dirty_list {
            self.dirty[c] = false;
        }
        self.dirty_list.clear();
    }

    fn start_interaction(&mut self, ix: usize) {
        let mut buf = std::mem::take(&mut self.scratch2);
        let mut chosen = Vec::with_capacity(self.sys.ports[ix].len());
        let ok = self.sys.choose_port_transitions(ix, &self.state, &mut self.rngs, &mut buf, &mut chosen);
        self.scratch2 = buf;
        debug_assert!(ok, "fireable interaction without enabled ports");
        let mut elapsed: f64 = 0.0;
        for (port, &t) in self.sys.ports[ix].iter().zip(&chosen) {
            let c = port.component;
            let tr = &self.sys.components()[c].transitions()[t];
            elapsed = elapsed.max(tr.sample_duration(&mut self.rngs[c]));
            self.suspended[c] = match self.activity[c] {
                Activity::Waiting { transition, end, .. } if tr.is_self_loop() => Some(Suspended { transition, end }),
                _ => None,
            };
            self.generation[c] = self.generation[c].wrapping_add(1);
            self.activity[c] = Activity::Interacting;
        }
        let slot = match self.free_slots.pop() {
            Some(s) => {
                self.active[s] = Some(ActiveInteraction { chosen });
                s
            }
            None => {
                self.active.push(Some(ActiveInteraction { chosen }));
                self.active.len() - 1
            }
        };
        let time = self.now + elapsed;
        self.push(
            time,
            self.interaction_key[ix],
            self.interaction_label[ix],
            EventKind::Interaction { index: ix as u32, slot: slot as u32 },
        );
    }

    fn complete(&mut self, ev: Event) {
        match ev.kind {
            EventKind::Internal { component, transition, generation } => {
                let c = component as usize;
                let t = transition as usize;
                debug_assert_eq!(generation, self.generation[c]);
                let from = self.state.locations[c];
                self.sys.apply_transition(c, t, &mut self.state);
                self.activity[c] = Activity::Idle;
                self.record_transition(c, t);
                self.on_location_change(c, from);
                self.settle(c);
                self.mark(c);
            }
            EventKind::Interaction { index, slot } => {
                let act = self.active[slot as usize].take().expect("live interaction slot");
                self.free_slots.push(slot as usize);
                let ix = index as usize;
                let froms: Vec<usize> =
                    self.sys.ports[ix].iter().map(|p| self.state.locations[p.component]).collect();
                self.sys.apply_interaction(ix, &act.chosen, &mut self.state);
                for (k, port) in self.sys.ports[ix].iter().enumerate() {
                    let c = port.component;
                    self.activity[c] = Activity::Idle;
                    self.record_transition(c, act.chosen[k]);
                    self.on_location_change(c, froms[k]);
                }
                for port in &self.sys.ports[ix] {
                    self.resume(port.component);
                    self.mark(port.component);
                }
            }
        }
    }

    fn is_stale(&self, ev: &Event) -> bool {
        match ev.kind {
            EventKind::Internal { component, generation, .. } => self.generation[component as usize] != generation,
            EventKind::Interaction { .. } => false,
        }
    }

    fn snapshot(&self) -> String {
        let mut s = String::new();
        for (c, comp) in self.sys.components().iter().enumerate() {
            let loc = self.state.locations[c];
            let _ = write!(s, "  {} @ {}", comp.name, comp.location_name(loc));
            for (name, v) in comp.var_names().iter().zip(&self.state.vars[c]) {
                let _ = write!(s, " {name}={v}");
            }
            s.push('\n');
        }
        s
    }

    fn run(&mut self) -> Result<u64, SimError> {
        for c in 0..self.sys.components().len() {
            self.settle(c);
            self.mark(c);
        }
        self.fire_interactions();
        let mut same_time = 0u64;
        loop {
            let Some(ev) = self.queue.pop() else {
                if self.now < self.horizon {
                    return Err(SimError::Deadlock { time: self.now, snapshot: self.snapshot() });
                }
                break;
            };
            if self.is_stale(&ev) {
                continue;
            }
            if ev.time >= self.horizon {
                break;
            }
            if ev.time == self.now {
                same_time += 1;
                if same_time > ZENO_LIMIT {
                    return Err(SimError::Zeno { time: self.now });
                }
            } else {
                same_time = 0;
            }
            self.now = ev.time;
            self.complete(ev);
            self.fire_interactions();
        }
        self.now = self.horizon;
        for d in 0..self.open.len() {
            if let Some((m, start)) = self.open[d].take() {
                if self.horizon > start {
                    self.sink.interval(d, m, start, self.horizon);
                }
            }
        }
        Ok(self.events)
    }
}

#[inline]
fn device_key(sys: &SystemModel, c: usize) -> u32 {
    sys.owner(c).map_or(u32::MAX / 2 + c as u32, |d| d as u32)
}

fn check_horizon(horizon: f64) -> Result<(), SimError> {
    if horizon.is_finite() && horizon > 0.0 {
        Ok(())
    } else {
        Err(SimError::BadHorizon(horizon))
    }
}

/// Runs one replica, streaming observations into `sink`; returns the number of transitions taken.
pub fn run_with_sink<S: TraceSink>(sys: &SystemModel, horizon: f64, seed: u64, sink: &mut S) -> Result<u64, SimError> {
    check_horizon(horizon)?;
    Engine::new(sys, horizon, seed, sink).run()
}

fn empty_ledgers(sys: &SystemModel, horizon: f64) -> Vec<EnergyLedger> {
    sys.devices().iter().map(|d| EnergyLedger::new(d.name.clone(), (horizon, horizon))).collect()
}

fn finish_trace(sys: &SystemModel, horizon: f64, seed: u64, b: TraceBuilder) -> Trace {
    let (labels, _) = label_table(sys);
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
    let labels = sorted.into_iter().map(|i| labels[i].clone()).collect();
    Trace {
        horizon,
        seed,
        devices: sys
            .devices()
            .iter()
            .zip(b.ledgers)
            .map(|(d, ledger)| DeviceTrace {
                name: d.name.clone(),
                device_type: d.device_type.clone(),
                role: d.role.clone(),
                profile: d.profile.clone(),
                ledger,
            })
            .collect(),
        events: b.events,
        labels,
        component_names: sys.components().iter().map(|c| c.name.clone()).collect(),
    }
}

/// Runs one replica and keeps the full trace, including the event log.
pub fn run(sys: &SystemModel, horizon: f64, seed: u64) -> Result<Trace, SimError> {
    run_trace(sys, horizon, seed, true)
}

pub fn run_trace(sys: &SystemModel, horizon: f64, seed: u64, keep_events: bool) -> Result<Trace, SimError> {
    check_horizon(horizon)?;
    let mut b = TraceBuilder { ledgers: empty_ledgers(sys, horizon), events: Vec::new(), keep_events };
    for l in &mut b.ledgers {
        l.window.1 = horizon;
    }
    Engine::new(sys, horizon, seed, &mut b).run()?;
    Ok(finish_trace(sys, horizon, seed, b))
}

/// Runs one replica keeping only per-device totals.
pub fn run_summary(sys: &SystemModel, horizon: f64, seed: u64) -> Result<RunSummary, SimError> {
    check_horizon(horizon)?;
    let mut sink = SummarySink { devices: sys.devices().iter().map(|d| DeviceSummary::new(d.name.clone())).collect() };
    let events = Engine::new(sys, horizon, seed, &mut sink).run()?;
    for d in &mut sink.devices {
        if !d.activated {
            d.window.0 = horizon;
        }
        d.window.1 = horizon;
    }
    Ok(RunSummary { seed, horizon, devices: sink.devices, events })
}

/// Seed of replica `i` under `root_seed`.
pub fn replica_seed(root_seed: u64, i: u64) -> u64 {
    substream_seed(root_seed, i)
}

/// `n` independent traces; replica `i` uses [`replica_seed`]`(root_seed, i)`.
pub fn replicate(sys: &SystemModel, horizon: f64, n: usize, root_seed: u64) -> Result<Vec<Trace>, SimError> {
    if n == 0 {
        return Err(SimError::NoReplicas);
    }
    (0..n).into_par_iter().map(|i| run(sys, horizon, replica_seed(root_seed, i as u64))).collect()
}

/// Like [`replicate`] but keeping only summaries.
pub fn replicate_summaries(
    sys: &SystemModel,
    horizon: f64,
    n: usize,
    root_seed: u64,
) -> Result<Vec<RunSummary>, SimError> {
    if n == 0 {
        return Err(SimError::NoReplicas);
    }
    (0..n).into_par_iter().map(|i| run_summary(sys, horizon, replica_seed(root_seed, i as u64))).collect()
}

/// Reporting cycle of the tick log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowertraceConfig {
    pub period: f64,
    pub rtimer_hz: f64,
}

impl Default for PowertraceConfig {
    fn default() -> Self {
        Self { period: 1.0, rtimer_hz: 32_768.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowertraceRecord {
    /// Sample time in microseconds, to keep records exact.
    pub time_us: u64,
    pub device: usize,
    pub cpu: u64,
    pub lpm: u64,
    pub tx: u64,
    pub rx: u64,
}

impl PowertraceRecord {
    pub fn time(&self) -> f64 {
        self.time_us as f64 * 1e-6
    }

    pub fn ticks(&self, mode: OperatingMode) -> u64 {
        match mode {
            OperatingMode::Cpu => self.cpu,
            OperatingMode::Lpm => self.lpm,
            OperatingMode::Tx => self.tx,
            OperatingMode::Rx => self.rx,
        }
    }
}

/// Cumulative floor(mode time · rtimer_hz) per device, one record per period
/// boundary after activation and up to the ledger window end.
pub fn powertrace_log(trace: &Trace, cfg: PowertraceConfig) -> Result<Vec<PowertraceRecord>, SimError> {
    if !(cfg.period > 0.0 && cfg.rtimer_hz > 0.0) {
        return Err(SimError::BadPowertraceConfig);
    }
    let mut out = Vec::new();
    for (d, dev) in trace.devices.iter().enumerate() {
        let (lo, hi) = dev.ledger.window;
        if hi <= lo {
            continue;
        }
        let mut cum = [0.0f64; 4];
        let mut it = dev.ledger.intervals.iter().peekable();
        let mut k = 1u64;
        loop {
            let t = lo + k as f64 * cfg.period;
            if t > hi + 1e-9 * hi.abs().max(1.0) {
                break;
            }
            while let Some(i) = it.peek() {
                if i.end() <= t {
                    cum[i.mode.index()] += i.duration;
                    it.next();
                } else {
                    break;
                }
            }
            let mut now = cum;
            if let Some(i) = it.peek() {
                if i.start < t {
                    now[i.mode.index()] += t - i.start;
                }
            }
            let tick = |m: OperatingMode| (now[m.index()] * cfg.rtimer_hz + 1e-6).floor() as u64;
            out.push(PowertraceRecord {
                time_us: (t * 1e6).round() as u64,
                device: d,
                cpu: tick(OperatingMode::Cpu),
                lpm: tick(OperatingMode::Lpm),
                tx: tick(OperatingMode::Tx),
                rx: tick(OperatingMode::Rx),
            });
            k += 1;
        }
    }
    out.sort_by_key(|r| (r.time_us, r.device));
    Ok(out)
}

/// Runs replicas on a dedicated pool bounded to `jobs` threads.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        Some(j) if j > 0 => match rayon::ThreadPoolBuilder::new().num_threads(j).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}
