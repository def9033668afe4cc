use std::collections::BTreeMap;
use std::sync::Arc;

use iesim_core::energy::{duty_cycle_time, lifetime, DeviceProfile, EnergyLedger, ModeInterval};
use iesim_core::export::{fit_trace, fits_to_timing, parse_trace_csv, trace_csv, CALIBRATED_MODES};
use iesim_core::model::{AtomicComponent, OperatingMode, SystemModel, Transition};
use iesim_core::scenario::{build_system, FittedTiming, Scenario, Workload};
use iesim_core::sim::{
    powertrace_log, replica_seed, replicate, replicate_summaries, run, run_summary, DeviceTrace, PowertraceConfig,
    SimError, Trace,
};
use iesim_core::smc::DeviceStats;
use iesim_core::stochastics::Distribution;
use proptest::prelude::*;

fn shipped() -> SystemModel {
    Scenario::shipped().build_system().unwrap()
}

fn lone(device_type: &str) -> SystemModel {
    let sc = Scenario::shipped();
    let mut topo = sc.topology.clone();
    let k = topo.devices.iter().position(|d| d.device_type == device_type).unwrap();
    topo.devices = vec![topo.devices[k].clone()];
    topo.links.clear();
    build_system(&topo, &sc.config, &sc.calibration, &sc.profiles, &Workload::none(), &FittedTiming::new()).unwrap()
}

#[test]
fn quiescent_device_mostly_sleeps() {
    for ty in ["Z1", "Sky", "OpenMote", "Sensortag"] {
        let trace = run(&lone(ty), 3600.0, 11).unwrap();
        let l = &trace.devices[0].ledger;
        assert!(duty_cycle_time(l, OperatingMode::Lpm).unwrap() > 0.99, "{ty}");
        assert_eq!(l.visits(OperatingMode::Cpu) + l.visits(OperatingMode::Tx), 0);
    }
}

#[test]
fn horizon_must_be_positive() {
    let sys = lone("Z1");
    assert!(matches!(run(&sys, 0.0, 1), Err(SimError::BadHorizon(_))));
    assert!(matches!(run(&sys, f64::NAN, 1), Err(SimError::BadHorizon(_))));
    assert!(matches!(replicate(&sys, 10.0, 0, 1), Err(SimError::NoReplicas)));
}

#[test]
fn stuck_system_reports_deadlock() {
    let mut b = AtomicComponent::builder("stuck");
    let a = b.location("A", None);
    let z = b.location("B", None);
    b.initial(a);
    b.transition(Transition::new("go", a, z, Distribution::dirac(1.0).unwrap()));
    let sys = SystemModel::new(vec![b.build().unwrap()], vec![], vec![], vec![], &[]).unwrap();
    match run(&sys, 10.0, 1) {
        Err(SimError::Deadlock { time, snapshot }) => {
            assert_eq!(time, 1.0);
            assert!(snapshot.contains("stuck"));
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn same_seed_same_csv() {
    let sys = shipped();
    let a = trace_csv(&run(&sys, 1800.0, 99).unwrap());
    let b = trace_csv(&run(&sys, 1800.0, 99).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, trace_csv(&run(&sys, 1800.0, 100).unwrap()));
}

#[test]
fn one_replica_is_the_derived_run() {
    let sys = shipped();
    let reps = replicate(&sys, 600.0, 1, 5).unwrap();
    assert_eq!(trace_csv(&reps[0]), trace_csv(&run(&sys, 600.0, replica_seed(5, 0)).unwrap()));
}

#[test]
fn parallel_mean_lifetime_matches_sequential() {
    let sys = shipped();
    let (h, n, root) = (1800.0, 100, 17);
    let mean = |runs: &[iesim_core::sim::RunSummary]| {
        let mut total = 0.0;
        for r in runs {
            for (d, dev) in sys.devices().iter().enumerate() {
                total += DeviceStats::from_summary(&r.devices[d], &dev.profile).unwrap().lifetime().unwrap();
            }
        }
        total / runs.len() as f64
    };
    let par = replicate_summaries(&sys, h, n, root).unwrap();
    let seq: Vec<_> = (0..n as u64).map(|i| run_summary(&sys, h, replica_seed(root, i)).unwrap()).collect();
    assert_eq!(par, seq);
    assert_eq!(mean(&par).to_bits(), mean(&seq).to_bits());
}

#[test]
fn summary_agrees_with_full_trace() {
    let sys = shipped();
    let trace = run(&sys, 7200.0, 3).unwrap();
    let summary = run_summary(&sys, 7200.0, 3).unwrap();
    for (d, dev) in trace.devices.iter().enumerate() {
        let a = lifetime(&dev.profile, &dev.ledger).unwrap();
        let b = DeviceStats::from_summary(&summary.devices[d], &dev.profile).unwrap().lifetime().unwrap();
        assert!((a - b).abs() <= 1e-9 * a, "{}: {a} vs {b}", dev.name);
    }
}

fn lpm_only_trace(seconds: f64) -> Trace {
    let profile = Arc::new(
        DeviceProfile::new("Z1", [5.1e-6, 0.008, 0.0174, 0.0188], [None; 4], 2.5, 3.0, BTreeMap::new()).unwrap(),
    );
    let mut ledger = EnergyLedger::new("d", (0.0, seconds));
    ledger.intervals.push(ModeInterval { mode: OperatingMode::Lpm, start: 0.0, duration: seconds });
    Trace {
        horizon: seconds,
        seed: 0,
        devices: vec![DeviceTrace {
            name: "d".into(),
            device_type: "Z1".into(),
            role: "server".into(),
            profile,
            ledger,
        }],
        events: vec![],
        labels: vec![],
        component_names: vec![],
    }
}

#[test]
fn ten_seconds_of_sleep_in_ticks() {
    let log = powertrace_log(&lpm_only_trace(10.0), PowertraceConfig::default()).unwrap();
    assert_eq!(log.len(), 10);
    let last = log.last().unwrap();
    assert_eq!((last.lpm, last.cpu, last.tx, last.rx), (327_680, 0, 0, 0));
    assert_eq!(last.time_us, 10_000_000);

    let mut empty = lpm_only_trace(10.0);
    empty.devices[0].ledger.window = (3.0, 3.0);
    assert!(powertrace_log(&empty, PowertraceConfig::default()).unwrap().is_empty());
    assert!(powertrace_log(&empty, PowertraceConfig { period: 0.0, rtimer_hz: 1.0 }).is_err());
}

#[test]
fn fitted_trace_reproduces_mode_shares() {
    let sc = Scenario::shipped();
    let sys = sc.build_system().unwrap();
    let horizon = 86_400.0;
    let original = run(&sys, horizon, 21).unwrap();
    let rows = parse_trace_csv(&trace_csv(&original)).unwrap();
    let type_of = |name: &str| sc.topology.devices[sc.topology.device(name).unwrap()].device_type.clone();
    let fits = fit_trace(&rows, type_of).unwrap();
    let calibrated = Scenario { fitted: fits_to_timing(&fits, &CALIBRATED_MODES), ..sc.clone() };
    let again = run(&calibrated.build_system().unwrap(), horizon, 22).unwrap();

    for (a, b) in original.devices.iter().zip(&again.devices) {
        for m in OperatingMode::ALL {
            let x = duty_cycle_time(&a.ledger, m).unwrap();
            let y = duty_cycle_time(&b.ledger, m).unwrap();
            // tiny shares are dominated by noise, compare them absolutely
            let ok = if x > 0.01 { (x - y).abs() <= 0.1 * x } else { (x - y).abs() <= 1e-3 };
            assert!(ok, "{} {m}: {x} vs {y}", a.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn ledgers_tile_the_horizon(seed in any::<u64>(), horizon in 1.0f64..7200.0) {
        let sys = shipped();
        let trace = run(&sys, horizon, seed).unwrap();
        prop_assert!(trace.events.windows(2).all(|w| w[0].time <= w[1].time));
        prop_assert!(trace.events.iter().all(|e| e.time <= horizon));
        for d in &trace.devices {
            let l = &d.ledger;
            prop_assert_eq!(l.window, (0.0, horizon));
            prop_assert!(l.is_well_formed());
            let first = l.intervals.first().unwrap();
            prop_assert_eq!(first.start, 0.0);
            // back to back: one mode at a time, no gaps
            for w in l.intervals.windows(2) {
                prop_assert!((w[1].start - w[0].end()).abs() <= 1e-9 * horizon.max(1.0));
            }
            prop_assert!((l.intervals.last().unwrap().end() - horizon).abs() <= 1e-9 * horizon.max(1.0));
            let covered: f64 = OperatingMode::ALL.iter().map(|&m| l.mode_time(m)).sum();
            prop_assert!((covered - horizon).abs() <= 1e-9 * horizon.max(1.0));
        }
    }

    #[test]
    fn powertrace_is_monotone_and_bounded(seed in any::<u64>(), period in 0.25f64..20.0) {
        let sys = shipped();
        let trace = run(&sys, 600.0, seed).unwrap();
        let cfg = PowertraceConfig { period, rtimer_hz: 32_768.0 };
        let log = powertrace_log(&trace, cfg).unwrap();
        for d in 0..trace.devices.len() {
            let recs: Vec<_> = log.iter().filter(|r| r.device == d).collect();
            let mut prev = [0u64; 4];
            for r in recs {
                let now = OperatingMode::ALL.map(|m| r.ticks(m));
                prop_assert!(now.iter().zip(prev).all(|(a, b)| *a >= b));
                let delta: u64 = now.iter().zip(prev).map(|(a, b)| a - b).sum();
                prop_assert!(delta as f64 <= period * cfg.rtimer_hz + 4.0);
                prev = now;
            }
        }
    }
}
