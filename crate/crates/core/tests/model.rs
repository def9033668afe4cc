use iesim_core::model::{
    build_energy_automaton, enabled_interactions, loc, priority_filter, AtomicComponent, Interaction, Move, Port,
    Priority, SystemModel, Transition,
};
use iesim_core::scenario::Scenario;
use iesim_core::stochastics::Distribution;
use proptest::prelude::*;

fn pair() -> SystemModel {
    let sc = Scenario::shipped();
    let timing = sc.timing("Z1");
    let profile = &sc.profiles["Z1"];
    let a = build_energy_automaton("sender", profile, &timing, false).unwrap();
    let b = build_energy_automaton("receiver", profile, &timing, false).unwrap();
    let link = Interaction::new(
        "sender->receiver",
        vec![Port { component: 0, label: "sndPacket".into() }, Port { component: 1, label: "recv".into() }],
    );
    SystemModel::new(vec![a, b], vec![link], vec![], vec![], &[]).unwrap()
}

#[test]
fn nothing_synchronises_while_off() {
    let sys = pair();
    let st = sys.initial_state();
    assert_eq!(st.locations, vec![loc::OFF, loc::OFF]);
    assert!(enabled_interactions(&sys, &st).is_empty());
    assert_eq!(sys.enabled_internal(&st).len(), 2);
}

#[test]
fn sender_in_cpu_meets_listening_receiver() {
    let sys = pair();
    let mut st = sys.initial_state();
    st.locations = vec![loc::CPU, loc::LPM];
    assert_eq!(enabled_interactions(&sys, &st), vec![0]);

    let mut rngs = sys.component_rngs(4);
    let elapsed = sys.fire(&mut st, Move::Interaction(0), &mut rngs).unwrap();
    assert!(elapsed >= 0.0);
    assert_eq!(st.locations, vec![loc::TX, loc::RX]);
    // the sender in Tx cannot send again
    assert!(enabled_interactions(&sys, &st).is_empty());
}

fn chain(n: usize) -> AtomicComponent {
    let mut b = AtomicComponent::builder("c");
    let a = b.location("A", None);
    b.initial(a);
    for k in 0..n {
        b.transition(Transition::new(format!("l{k}"), a, a, Distribution::dirac(1.0).unwrap()).exported());
    }
    b.build().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn priority_filter_only_removes_dominated(
        n in 1usize..8,
        edges in prop::collection::vec((0usize..8, 0usize..8), 0..12),
        mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        // orient every edge low -> high index so the priority graph is acyclic
        let mut prios: Vec<Priority> = edges
            .into_iter()
            .filter(|&(a, b)| a < n && b < n && a != b)
            .map(|(a, b)| Priority { higher: a.max(b), lower: a.min(b) })
            .collect();
        prios.dedup_by(|x, y| x.higher == y.higher && x.lower == y.lower);
        let interactions = (0..n)
            .map(|k| Interaction::new(format!("i{k}"), vec![Port { component: 0, label: format!("l{k}") }]))
            .collect();
        let sys = SystemModel::new(vec![chain(n)], interactions, prios.clone(), vec![], &[]).unwrap();
        let enabled: Vec<usize> = (0..n).filter(|&k| mask[k]).collect();
        let kept = priority_filter(&sys, &enabled);
        prop_assert!(kept.iter().all(|k| enabled.contains(k)));
        for k in &enabled {
            let dominated = prios.iter().any(|p| p.lower == *k && enabled.contains(&p.higher));
            prop_assert_eq!(kept.contains(k), !dominated);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn firing_is_deterministic_per_seed(seed in any::<u64>(), steps in 1usize..200) {
        let sys = Scenario::shipped().build_system().unwrap();
        let walk = |seed: u64| {
            let mut st = sys.initial_state();
            let mut rngs = sys.component_rngs(seed);
            let mut log = Vec::new();
            for k in 0..steps {
                let inter = enabled_interactions(&sys, &st);
                let internal = sys.enabled_internal(&st);
                let mv = match (inter.first(), internal.get(k % internal.len().max(1))) {
                    (Some(&i), _) if k % 2 == 0 || internal.is_empty() => Move::Interaction(i),
                    (_, Some(&(c, t))) => Move::Internal { component: c, transition: t },
                    (Some(&i), None) => Move::Interaction(i),
                    (None, None) => break,
                };
                let dt = sys.fire(&mut st, mv, &mut rngs).unwrap();
                // every component sits in exactly one declared location
                for (c, &l) in st.locations.iter().enumerate() {
                    assert!(l < sys.components()[c].locations().len());
                }
                log.push((mv, dt.to_bits()));
            }
            (log, st)
        };
        prop_assert_eq!(walk(seed), walk(seed));
    }
}
