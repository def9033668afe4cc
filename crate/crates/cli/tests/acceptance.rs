//! Acceptance suite. Runs with its own `main` so every criterion prints one
//! status line even when stdout is captured for ordinary tests.
//!
//! `cargo test --test acceptance -- 3 5` runs criteria 3 and 5 only.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use iesim_core::energy::{
    duty_cycle_energy, duty_cycle_time, lifetime, mode_energy, total_energy, DeviceProfile, EnergyLedger, ModeInterval,
};
use iesim_core::model::{OperatingMode, TimingKey};
use iesim_core::scenario::{
    build_bms_topology, effect_model, CalibrationSet, EnergyConfig, FloorSpec, MessageShape, RdcProtocol, Resource,
    Scenario, ServiceProtocol, TopologySpec,
};
use iesim_core::sim::run;
use iesim_core::smc::{
    chernoff_samples, estimate, parse_requirements, sprt, verify_requirements, Report, SmcConfig, SmcError,
    VerdictKind, SHIPPED_REQUIREMENTS,
};
use iesim_core::stochastics::{draw_many, fit_normal, fit_poisson, rng_from_seed, substream_seed, Distribution};
use iesim_core::sweep::{spread, sweep};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Collects named checks; the criterion passes when all of them do.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: String) {
        if !ok {
            self.failed.push(what.clone());
        }
        self.notes.push(format!("{}{}", if ok { "" } else { "!" }, what));
    }

    fn outcome(self) -> Outcome {
        let pass = self.failed.is_empty();
        Outcome::new(pass, self.notes.join("; "))
    }
}

const MODES: [OperatingMode; 4] = OperatingMode::ALL;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// Criterion 1

/// Joules of one interval from the raw profile fields, looked up by mode name.
fn interval_joules(p: &DeviceProfile, i: &ModeInterval) -> f64 {
    let k = ["LPM", "CPU", "Tx", "Rx"].iter().position(|n| *n == i.mode.name()).unwrap();
    p.current[k] * p.voltage[k] * i.duration
}

fn random_ledger(rng: &mut impl Rng) -> (EnergyLedger, DeviceProfile) {
    let lpm = rng.random_range(1e-6..1e-3);
    let current = [lpm, rng.random_range(1e-3..0.01), rng.random_range(0.01..0.03), rng.random_range(0.01..0.03)];
    let volts = [0, 1, 2, 3].map(|_| if rng.random_bool(0.5) { Some(rng.random_range(1.8..3.6)) } else { None });
    let costs = [("a", rng.random_range(0.0..2.0)), ("b", rng.random_range(0.0..2.0))]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let profile = DeviceProfile::new("p", current, volts, rng.random_range(0.5..5.0), 3.0, costs).unwrap();

    let start = rng.random_range(0.0..1e5);
    let mut t = start;
    let mut l = EnergyLedger::new("d", (start, start));
    for _ in 0..rng.random_range(1..200) {
        // occasional gaps: the device may be in no mode
        if rng.random_bool(0.1) {
            t += rng.random_range(0.0..5.0);
        }
        let d = rng.random_range(1e-4..100.0);
        l.intervals.push(ModeInterval { mode: MODES[rng.random_range(0..4)], start: t, duration: d });
        t += d;
    }
    l.window.1 = t + rng.random_range(0.0..10.0);
    let names: [Arc<str>; 2] = [Arc::from("a"), Arc::from("b")];
    for _ in 0..rng.random_range(0..20) {
        l.peripheral_events.push((rng.random_range(start..l.window.1), names[rng.random_range(0..2)].clone()));
    }
    (l, profile)
}

fn criterion_1() -> Outcome {
    let mut rng = rng_from_seed(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (l, p) = random_ledger(&mut rng);
        let mut by_mode = [0.0f64; 4];
        let mut time = [0.0f64; 4];
        for i in &l.intervals {
            let k = MODES.iter().position(|m| *m == i.mode).unwrap();
            by_mode[k] += interval_joules(&p, i);
            time[k] += i.duration;
        }
        let per: f64 = l.peripheral_events.iter().map(|(_, e)| p.peripheral_costs[e.as_ref()]).sum();
        let total = by_mode.iter().sum::<f64>() + per;
        let window = l.window.1 - l.window.0;
        let lifetime_oracle = p.battery_capacity * p.vcc * 3600.0 / (total / window) / 3600.0;

        let mut errs = vec![rel_err(total_energy(&l, &p).unwrap(), total), rel_err(lifetime(&p, &l).unwrap(), lifetime_oracle)];
        for (k, &m) in MODES.iter().enumerate() {
            errs.push(rel_err(mode_energy(&l, &p, m), by_mode[k]));
            errs.push(rel_err(duty_cycle_energy(&l, &p, m).unwrap(), by_mode[k] / total));
            errs.push(rel_err(duty_cycle_time(&l, m).unwrap(), time[k] / window));
        }
        worst = errs.into_iter().filter(|e| e.is_finite()).fold(worst, f64::max);
    }
    Outcome::new(worst <= 1e-9, format!("1000 ledgers, worst relative error {worst:.2e} (tolerance 1e-9)"))
}

// Criterion 2

fn bernoulli(p: f64, seed: u64) -> impl FnMut(usize) -> Result<bool, SmcError> {
    let mut rng = rng_from_seed(seed);
    move |_| Ok(rng.random_bool(p))
}

fn criterion_2() -> Outcome {
    let mut c = Checks::default();
    let trials = 200u64;
    let base = SmcConfig::default();
    for (k, p) in [0.2f64, 0.5, 0.9].into_iter().enumerate() {
        // p above the region: H0 true. p below the region: H1 true.
        let above = (p - 0.15, p - 0.05);
        let below = (p + 0.05, (p + 0.15).min(0.99));
        for (side, (p1, p0), right) in [("H0", above, VerdictKind::AcceptH0), ("H1", below, VerdictKind::AcceptH1)] {
            let cfg = SmcConfig { theta: (p1 + p0) / 2.0, indifference: (p1, p0), ..base };
            let wrong = (0..trials)
                .filter(|&t| {
                    let seed = substream_seed(1000 + k as u64, t + if side == "H0" { 0 } else { 10_000 });
                    sprt(bernoulli(p, seed), &cfg).unwrap().kind != right
                })
                .count();
            let rate = wrong as f64 / trials as f64;
            let bound = if side == "H0" { base.beta } else { base.alpha } + 0.02;
            c.check(rate <= bound, format!("sprt p={p} {side} wrong {rate:.3}<={bound:.2}"));
        }
        let covered = (0..trials)
            .filter(|&t| (estimate(bernoulli(p, substream_seed(2000 + k as u64, t)), &base).unwrap().p_hat() - p).abs() < base.delta)
            .count();
        let cov = covered as f64 / trials as f64;
        c.check(cov >= 1.0 - base.alpha - 0.02, format!("coverage p={p} {cov:.3}"));
    }
    let n = chernoff_samples(0.05, 0.05);
    c.check(n == 738, format!("N={n}"));
    c.outcome()
}

// Criterion 3

const WEEK: f64 = 5.0 * 86_400.0;
const SEED: u64 = 7;
const SWEEP_REPLICAS: usize = 8;

fn p_of(report: &Report, id: &str) -> f64 {
    report.results.iter().find(|r| r.id == id).expect("shipped requirement").verdict.p_hat()
}

fn criterion_3() -> Outcome {
    let sc = Scenario::shipped();
    let reqs = parse_requirements(SHIPPED_REQUIREMENTS).unwrap();
    let mut c = Checks::default();
    let mut reports = Vec::new();
    for p in RdcProtocol::ALL {
        let cfg = EnergyConfig { rdc_protocol: p, ..sc.config };
        let sys = sc.with_config(cfg).build_system().unwrap();
        let report = verify_requirements(&sys, &reqs, &[], WEEK, SEED).unwrap();
        reports.push((p, report));
    }
    let get = |p: RdcProtocol| &reports.iter().find(|(q, _)| *q == p).unwrap().1;
    let (x, cm, l, n) = (get(RdcProtocol::XMac), get(RdcProtocol::ContikiMac), get(RdcProtocol::Lpp), get(RdcProtocol::NullRdc));
    let near = |v: f64, t: f64, tol: f64| (v - t).abs() <= tol + 1e-12;

    let phi1 = p_of(x, "phi1");
    c.check(near(phi1, 0.9, 0.1), format!("P(phi1)={phi1:.3}"));
    let phi2 = [p_of(l, "phi2"), p_of(x, "phi2"), p_of(cm, "phi2"), p_of(n, "phi2")];
    c.check(phi2[0] == 1.0, format!("phi2 LPP={:.3}", phi2[0]));
    c.check(near(phi2[1], 0.7, 0.15), format!("phi2 XMAC={:.3}", phi2[1]));
    c.check(near(phi2[2], 0.5, 0.15), format!("phi2 CMAC={:.3}", phi2[2]));
    c.check(phi2[3] == 0.0, format!("phi2 null={:.3}", phi2[3]));
    c.check(phi2.windows(2).all(|w| w[0] > w[1]), "phi2 strict order".into());
    let phi3 = [p_of(l, "phi3"), p_of(x, "phi3"), p_of(cm, "phi3"), p_of(n, "phi3")];
    c.check(phi3[0] == 1.0, format!("phi3 LPP={:.3}", phi3[0]));
    c.check(near(phi3[1], 0.8, 0.15), format!("phi3 XMAC={:.3}", phi3[1]));
    c.check(near(phi3[2], 0.6, 0.15), format!("phi3 CMAC={:.3}", phi3[2]));
    c.check(phi3[3] == 0.0, format!("phi3 null={:.3}", phi3[3]));

    for (param, target, tol) in [("rdc-protocol", 130.0, 0.2 * 130.0), ("interference", 148.0, 0.2 * 148.0)] {
        let s = spread(&sweep(&sc, param, SWEEP_REPLICAS, WEEK, SEED).unwrap());
        c.check(near(s, target, tol), format!("{param} spread {s:.1} h"));
    }
    let s = spread(&sweep(&sc, "retransmissions", SWEEP_REPLICAS, WEEK, SEED).unwrap());
    c.check(s <= 5.0, format!("retransmissions spread {s:.2} h"));
    c.outcome()
}

// Criterion 4

fn simulate_into(dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iesim"))
        .args(["simulate", "--horizon", "1d", "--seed", "42", "--out"])
        .arg(dir)
        .output()
        .expect("run iesim")
}

fn criterion_4() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (simulate_into(a.path()), simulate_into(b.path()));
    if !(ra.status.success() && rb.status.success()) {
        return Outcome::new(false, format!("simulate failed: {}", String::from_utf8_lossy(&ra.stderr)));
    }
    let mut c = Checks::default();
    for f in ["trace.csv", "powertrace.csv", "summary.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        c.check(!x.is_empty() && x == y, format!("{f} {} bytes identical", x.len()));
    }
    c.outcome()
}

// Criterion 5

fn criterion_5() -> Outcome {
    let mut c = Checks::default();
    let mut rng = rng_from_seed(5);
    let counts = draw_many(&Distribution::poisson(4.0, 1.0).unwrap(), 10_000, &mut rng);
    let lambda = fit_poisson(&counts).unwrap().parameters()[0];
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    c.check(rel_err(lambda, 4.0) <= 0.05, format!("lambda {lambda:.4}"));
    c.check(lambda.to_bits() == mean.to_bits(), "lambda equals sample mean".into());
    let xs = draw_many(&Distribution::normal(10.0, 2.0).unwrap(), 10_000, &mut rng);
    let p = fit_normal(&xs).unwrap().parameters();
    c.check(rel_err(p[0], 10.0) <= 0.05 && rel_err(p[1], 2.0) <= 0.05, format!("mu {:.4} sigma {:.4}", p[0], p[1]));
    c.outcome()
}

// Criterion 6

fn config_strategy() -> impl Strategy<Value = EnergyConfig> {
    (
        prop::sample::select(RdcProtocol::ALL.to_vec()),
        1u32..=16,
        0u32..=5,
        prop::sample::select(ServiceProtocol::ALL.to_vec()),
        16u32..=32,
        0.0f64..=1.0,
    )
        .prop_map(|(p, f, r, s, h, i)| EnergyConfig {
            rdc_protocol: p,
            rdc_frequency: 2 * f,
            retransmissions: r,
            service_protocol: s,
            header_size: 2 * h,
            interference: i,
        })
}

const TYPES: [&str; 4] = ["Z1", "Sky", "OpenMote", "Sensortag"];

fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<u32, String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map(|()| cases).map_err(|e| e.to_string())
}

fn criterion_6() -> Outcome {
    let calib: CalibrationSet = Scenario::shipped().calibration;
    let msg = MessageShape { resources: 7.0, resource_bytes: 6.0 };
    let timing = move |cfg: &EnergyConfig, ty: &str| effect_model(cfg, ty, &calib, msg);
    let ty = || prop::sample::select(TYPES.to_vec());
    let mut c = Checks::default();
    let mut total = 0u32;
    let mut record = |name: &str, r: Result<u32, String>| match r {
        Ok(n) => {
            total += n;
            c.check(true, format!("{name} x{n}"));
        }
        Err(e) => c.check(false, format!("{name}: {e}")),
    };

    // Mode exclusivity and tiling over simulated buildings of 1 to 4 floors.
    let floor = (ty(), ty(), prop::sample::subsequence(Resource::ALL.to_vec(), 1..=7))
        .prop_map(|(a, b, r)| FloorSpec { controller_type: a.into(), server_type: b.into(), resources: r });
    let building = (ty(), prop::collection::vec(floor, 1..=4), config_strategy(), any::<u64>(), 60.0f64..3600.0);
    record(
        "exclusivity+tiling",
        run_property(1000, building, |(bm, floors, cfg, seed, horizon)| {
            let sc = Scenario::shipped();
            let topo = build_bms_topology(&TopologySpec { bm_type: bm.into(), floors }, &TYPES).unwrap();
            let sys = iesim_core::scenario::build_system(&topo, &cfg, &sc.calibration, &sc.profiles, &sc.workload, &sc.fitted)
                .unwrap();
            let trace = run(&sys, horizon, seed).unwrap();
            let tol = 1e-9 * horizon;
            for d in &trace.devices {
                let iv = &d.ledger.intervals;
                prop_assert!(d.ledger.window == (0.0, horizon));
                prop_assert!(iv.first().is_some_and(|i| i.start == 0.0));
                prop_assert!(iv.last().is_some_and(|i| (i.end() - horizon).abs() <= tol));
                for w in iv.windows(2) {
                    // never two modes at once, never a gap
                    prop_assert!(w[1].start >= w[0].end() - tol, "overlap in {}", d.name);
                    prop_assert!(w[1].start <= w[0].end() + tol, "gap in {}", d.name);
                }
            }
            Ok(())
        }),
    );

    // Energy additivity over random partitions of random ledgers.
    record(
        "additivity",
        run_property(4000, (any::<u64>(), prop::collection::vec(0.0f64..1.0, 0..6)), |(seed, mut cuts)| {
            let (l, p) = random_ledger(&mut rng_from_seed(seed));
            let (lo, hi) = l.window;
            cuts.sort_by(f64::total_cmp);
            let mut b = vec![lo];
            b.extend(cuts.iter().map(|u| lo + u * (hi - lo)));
            b.push(hi);
            let whole = total_energy(&l, &p).unwrap();
            let parts: f64 = b.windows(2).map(|w| total_energy(&l.sub_window(w[0], w[1]), &p).unwrap()).sum();
            prop_assert!(rel_err(parts, whole) <= 1e-9);
            Ok(())
        }),
    );

    let tx = |t: &iesim_core::model::ModeTimingModel| t.expected(TimingKey::TxSojourn);
    record(
        "law d",
        run_property(1500, (config_strategy(), ty(), 0.0f64..=1.0), |(cfg, ty, di)| {
            if cfg.retransmissions < 5 {
                let more = EnergyConfig { retransmissions: cfg.retransmissions + 1, ..cfg };
                prop_assert!(tx(&timing(&more, ty)) >= tx(&timing(&cfg, ty)));
            }
            let noisier = EnergyConfig { interference: (cfg.interference + di).min(1.0), ..cfg };
            prop_assert!(tx(&timing(&noisier, ty)) >= tx(&timing(&cfg, ty)));
            Ok(())
        }),
    );
    record(
        "law e",
        run_property(1500, (config_strategy(), ty()), |(cfg, ty)| {
            if cfg.header_size < 64 {
                let (a, b) = (timing(&cfg, ty), timing(&EnergyConfig { header_size: cfg.header_size + 2, ..cfg }, ty));
                prop_assert!(tx(&b) > tx(&a));
                prop_assert!(b.expected(TimingKey::SndPacket) < a.expected(TimingKey::SndPacket));
            }
            Ok(())
        }),
    );
    record(
        "law f",
        run_property(1500, (config_strategy(), ty()), |(cfg, ty)| {
            let wakeups_per_s = |c: &EnergyConfig| {
                let t = timing(c, ty);
                1.0 / (t.expected(TimingKey::LpmSleep) + t.expected(TimingKey::RxListen))
            };
            if cfg.rdc_frequency < 32 {
                let faster = EnergyConfig { rdc_frequency: cfg.rdc_frequency + 2, ..cfg };
                prop_assert!(wakeups_per_s(&faster) >= wakeups_per_s(&cfg));
            }
            Ok(())
        }),
    );
    record(
        "law g",
        run_property(1500, (config_strategy(), ty()), |(cfg, ty)| {
            let radio = |s| {
                let t = timing(&EnergyConfig { service_protocol: s, ..cfg }, ty);
                t.expected(TimingKey::TxSojourn) + t.expected(TimingKey::RxReceive)
            };
            prop_assert!(radio(ServiceProtocol::Mqtt) >= radio(ServiceProtocol::CoAp));
            Ok(())
        }),
    );
    c.check(total >= 10_000, format!("{total} cases"));
    c.outcome()
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (n, name, _, _) in criteria() {
            println!("criterion-{n}-{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let wanted: Vec<&str> = args.iter().filter(|a| !a.starts_with('-')).map(String::as_str).collect();
    let selected = |n: u32| {
        wanted.is_empty() || wanted.iter().any(|w| *w == n.to_string() || *w == "acceptance" || *w == format!("criterion-{n}"))
    };

    let mut failures = 0;
    for (n, name, budget, f) in criteria() {
        if !selected(n) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let in_budget = took <= budget;
        let pass = out.pass && in_budget;
        failures += usize::from(!pass);
        println!(
            "criterion {n} ({name}): {} in {:.1}s (budget {}s): {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            out.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn criteria() -> [Criterion; 6] {
    [
        (1, "energy oracles", Duration::from_secs(5), criterion_1),
        (2, "smc soundness", Duration::from_secs(60), criterion_2),
        (3, "case study", Duration::from_secs(15 * 60), criterion_3),
        (4, "determinism", Duration::from_secs(120), criterion_4),
        (5, "fit round trip", Duration::from_secs(60), criterion_5),
        (6, "invariants", Duration::from_secs(60), criterion_6),
    ]
}
