use std::sync::Arc;

use manet_nc::coding::{encode, DecodeOutcome, Native, NodeState, PacketPool, SizeClass};
use manet_nc::engine::{run_broadcast, DtMode, EventLog, ForwardingPlan, LoadScenario, Scenario};
use manet_nc::metrics::gain_from_log;
use manet_nc::pruning::{coverage_sets, greedy_forward_set, PruningProtocol};
use manet_nc::topology::{
    find_connected_topology, generate_random_topology, is_connected, load_topology, NodeSet,
    Topology,
};
use manet_nc::PacketId;
use proptest::prelude::*;

fn protocol() -> impl Strategy<Value = PruningProtocol> {
    prop::sample::select(PruningProtocol::ALL.to_vec())
}

fn pruned() -> impl Strategy<Value = PruningProtocol> {
    prop::sample::select(PruningProtocol::PRUNED.to_vec())
}

fn load() -> impl Strategy<Value = LoadScenario> {
    prop::sample::select(vec![
        LoadScenario::Low,
        LoadScenario::High,
        LoadScenario::Mixed,
    ])
}

fn dt_mode() -> impl Strategy<Value = DtMode> {
    prop::sample::select(vec![DtMode::With, DtMode::Without])
}

fn connected(n: usize, seed: u64) -> Arc<Topology> {
    Arc::new(find_connected_topology(n, 100.0, 30.0, seed, 100_000).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbourhoods_are_closed_and_symmetric(n in 1usize..30, seed: u64, range in 5.0f64..60.0) {
        let t = generate_random_topology(n, 100.0, range, seed).unwrap();
        let pos = t.positions().unwrap();
        for a in 0..n {
            prop_assert!(t.one_hop(a).contains(&a));
            prop_assert!(!t.adjacent(a).contains(&a));
            prop_assert!(t.one_hop(a).is_subset(t.two_hop(a)));
            for b in 0..n {
                prop_assert_eq!(t.are_adjacent(a, b), t.are_adjacent(b, a));
                if a != b {
                    let d = ((pos[a].0 - pos[b].0).powi(2) + (pos[a].1 - pos[b].1).powi(2)).sqrt();
                    prop_assert_eq!(t.are_adjacent(a, b), d <= range);
                }
            }
            let two: NodeSet = t.one_hop(a).iter().flat_map(|&w| t.one_hop(w).iter().copied()).collect();
            prop_assert_eq!(&two, t.two_hop(a));
        }
    }

    #[test]
    fn edge_list_reloads_to_the_same_graph(n in 1usize..25, seed: u64) {
        let t = generate_random_topology(n, 100.0, 30.0, seed).unwrap();
        let back = load_topology(&t.to_edge_list()).unwrap();
        prop_assert_eq!(back.node_count(), n);
        prop_assert_eq!(back.edges().collect::<Vec<_>>(), t.edges().collect::<Vec<_>>());
    }

    #[test]
    fn greedy_covers_what_it_can(n in 2usize..25, seed: u64, p in pruned(), v_pick: usize, u_pick: usize) {
        let t = connected(n, seed);
        let v = v_pick % n;
        let nbrs: Vec<usize> = t.adjacent(v).iter().copied().collect();
        let u = (u_pick % (nbrs.len() + 1)).checked_sub(1).map(|i| nbrs[i]);
        let (cands, cov) = coverage_sets(p, &t, u, v).unwrap();
        let d = greedy_forward_set(&cands, &cov, |b| t.one_hop(b).clone());

        prop_assert!(d.forward_list.iter().all(|b| cands.contains(b)));
        let reached: NodeSet = d.forward_list.iter().flat_map(|&b| t.one_hop(b).iter().copied()).collect();
        for w in &cov {
            prop_assert_eq!(reached.contains(w), !d.uncovered.contains(w));
        }
        // every chosen forwarder covers something new when picked
        let mut seen = NodeSet::new();
        for b in &d.forward_list {
            let fresh: Vec<_> = t.one_hop(*b).iter().filter(|w| cov.contains(w) && !seen.contains(w)).collect();
            prop_assert!(!fresh.is_empty());
            seen.extend(t.one_hop(*b).iter().copied());
        }
    }

    #[test]
    fn pruned_coverage_never_exceeds_dp(n in 2usize..25, seed: u64, v_pick: usize, u_pick: usize) {
        let t = connected(n, seed);
        let v = v_pick % n;
        let nbrs: Vec<usize> = t.adjacent(v).iter().copied().collect();
        prop_assume!(!nbrs.is_empty());
        let u = Some(nbrs[u_pick % nbrs.len()]);
        let (_, dp) = coverage_sets(PruningProtocol::Dp, &t, u, v).unwrap();
        let (_, tdp) = coverage_sets(PruningProtocol::Tdp, &t, u, v).unwrap();
        let (_, pdp) = coverage_sets(PruningProtocol::Pdp, &t, u, v).unwrap();
        prop_assert!(tdp.is_subset(&dp));
        prop_assert!(pdp.is_subset(&dp));
    }

    #[test]
    fn xor_recovers_any_single_missing_native(
        payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..300), 2..7),
        missing_pick: usize,
    ) {
        let natives: Vec<Native> = payloads
            .into_iter()
            .enumerate()
            .map(|(i, payload)| Native {
                id: PacketId(i as u32),
                origin: 0,
                size_class: SizeClass::of(payload.len(), 100),
                delay_tolerance: 1.0,
                payload,
            })
            .collect();
        let pool: PacketPool = natives.iter().map(|n| (n.id, n.clone())).collect();
        let ids: Vec<PacketId> = natives.iter().map(|n| n.id).collect();
        let coded = encode(&pool, &ids, 100).unwrap();
        let longest = natives.iter().map(|n| n.payload.len()).max().unwrap();
        prop_assert_eq!(coded.payload.len(), longest);

        let missing = &natives[missing_pick % natives.len()];
        let mut rx = NodeState::new(1);
        for n in natives.iter().filter(|n| n.id != missing.id) {
            rx.store(n.clone());
        }
        match rx.decode(&coded, 0).unwrap() {
            DecodeOutcome::Decoded(got) => prop_assert_eq!(&got.payload, &missing.payload),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }

    #[test]
    fn possession_never_decreases(updates in prop::collection::vec((0usize..4, 0u32..4, 0.0f64..=1.0), 1..40)) {
        let mut s = NodeState::new(9);
        for (nbr, id, p) in updates {
            let before = s.possession(nbr, PacketId(id));
            s.set_possession(nbr, PacketId(id), p);
            prop_assert!(s.possession(nbr, PacketId(id)) >= before);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn broadcast_invariants(
        n in 2usize..30,
        seed in 0u64..10_000,
        p in protocol(),
        load in load(),
        dt in dt_mode(),
        source_pick: usize,
    ) {
        let t = connected(n, seed);
        let source = source_pick % n;
        let off = Scenario::new(t.clone(), p, false, source, load, dt, seed);
        let on = Scenario { coding_enabled: true, ..off.clone() };
        let (log_off, m_off) = run_broadcast(&off).unwrap();
        let (log_on, m_on) = run_broadcast(&on).unwrap();

        prop_assert!(m_off.delivery_complete && m_on.delivery_complete);
        prop_assert!(m_off.quiescent && m_on.quiescent);
        prop_assert!(m_on.sends() <= m_off.sends());
        prop_assert!(m_on.gain_overall >= 1.0);
        prop_assert_eq!(m_off.coded_sends(), 0);

        // without coding every planned node sends each packet once
        let plan = ForwardingPlan::probe(&t, p, source).unwrap();
        prop_assert_eq!(m_off.sends(), off.workload.len() * (plan.forwarders().len() + 1));

        for (sc, log, m) in [(&off, &log_off, &m_off), (&on, &log_on, &m_on)] {
            let replayed = gain_from_log(&EventLog::parse(&log.to_text()).unwrap(), &sc.workload, sc.small_threshold).unwrap();
            prop_assert!(replayed.matches(m));
        }

        let (again, _) = run_broadcast(&on).unwrap();
        prop_assert_eq!(again.to_text(), log_on.to_text());
    }

    #[test]
    fn pruning_never_sends_more_than_flooding(n in 2usize..30, seed in 0u64..10_000, p in pruned()) {
        let t = connected(n, seed);
        let flood = Scenario::new(t.clone(), PruningProtocol::Flood, false, 0, LoadScenario::Low, DtMode::With, seed);
        let pruned = Scenario { protocol: p, ..flood.clone() };
        prop_assert!(run_broadcast(&pruned).unwrap().1.sends() <= run_broadcast(&flood).unwrap().1.sends());
    }
}

#[test]
fn disconnected_graph_goes_quiet_without_delivering() {
    let t = Arc::new(Topology::from_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap());
    assert!(!is_connected(&t));
    for p in PruningProtocol::ALL {
        let sc = Scenario::new(t.clone(), p, true, 0, LoadScenario::Mixed, DtMode::With, 1);
        let (_, m) = run_broadcast(&sc).unwrap();
        assert!(m.quiescent);
        assert!(!m.delivery_complete);
    }
}

#[test]
fn forwarding_plan_reaches_everyone() {
    for seed in 0..20 {
        let t = connected(30, seed);
        for p in PruningProtocol::ALL {
            let plan = ForwardingPlan::probe(&t, p, 0).unwrap();
            let mut covered: NodeSet = t.one_hop(0).clone();
            for &v in plan.entries.keys() {
                covered.extend(t.one_hop(v).iter().copied());
            }
            assert_eq!(covered.len(), 30, "seed {seed} {p}");
            for (v, e) in &plan.entries {
                if let Some(parent) = e.parent {
                    assert!(t.are_adjacent(parent, *v));
                    assert!(plan.entries.contains_key(&parent));
                }
            }
        }
    }
}
