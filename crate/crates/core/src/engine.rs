//! Tick-driven broadcast simulator.
//!
//! Time advances in synchronous ticks. Within a tick:
//!
//! 1. transmissions made during the previous tick reach every 1-hop neighbour,
//! 2. timers due at this tick fire,
//! 3. every node, in ascending id order, gets one transmit opportunity.
//!
//! There is no loss and no collision. When nothing is in flight the clock
//! jumps straight to the next timer expiry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coding::{
    self, all_nbrs_have, needing_probability, obtain_code_set, update_nbr_recv_table,
    DecodeOutcome, Header, Native, NodeState, Packet, PacketKind, SizeClass,
    DEFAULT_GUESS_THRESHOLD, DEFAULT_SMALL_THRESHOLD,
};
use crate::metrics::{ClassCounts, RunMetrics};
use crate::pruning::{select_forwarders_from, ForwardDecision, PruningProtocol, SenderInfo};
use crate::topology::{NodeSet, Topology};
use crate::{Error, NodeId, PacketId, Result};

pub const DEFAULT_PACKETS: usize = 9;
pub const DEFAULT_TIMEOUT_TICKS: u64 = 3;
pub const DEFAULT_TICK_CAP: u64 = 100_000;

// rng streams derived from the possession seed
const STREAM_POSSESSION: u64 = 1;
const STREAM_PAYLOAD: u64 = 2;
const STREAM_WORKLOAD: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LoadScenario {
    /// Every packet small.
    Low,
    /// Every packet large.
    High,
    /// Alternating small and large, starting small.
    Mixed,
}

impl LoadScenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::High => "high",
            Self::Mixed => "mixed",
        }
    }
}

impl fmt::Display for LoadScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoadScenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "low" => Ok(Self::Low),
            "high" => Ok(Self::High),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown load `{other}`")),
        }
    }
}

/// Delay-tolerance regime of a workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DtMode {
    /// Per-packet tolerance drawn uniformly from `[0, 1)`, bounded wait.
    With,
    /// Every packet fully tolerant; buffered packets wait until the network
    /// goes idle.
    Without,
}

impl DtMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::With => "with",
            Self::Without => "without",
        }
    }
}

impl fmt::Display for DtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DtMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "with" => Ok(Self::With),
            "without" => Ok(Self::Without),
            other => Err(format!("unknown delay-tolerance mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Coding is attempted only if the needing-neighbour probability exceeds this.
    pub prob_gate: f64,
    /// Coding is attempted only if the packet's delay tolerance exceeds this.
    pub dt_gate: f64,
    /// Possession probability at which a neighbour is assumed to hold a packet.
    pub guess: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            prob_gate: 0.4,
            dt_gate: 0.8,
            guess: DEFAULT_GUESS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timeout {
    Ticks(u64),
    /// Release buffered packets only once the network has gone quiet.
    UntilIdle,
}

impl DtMode {
    pub fn timeout(self, ticks: u64) -> Timeout {
        match self {
            Self::With => Timeout::Ticks(ticks),
            Self::Without => Timeout::UntilIdle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadItem {
    pub origin: NodeId,
    pub length: usize,
    pub delay_tolerance: f64,
}

/// `count` packets originated at `source`, sized per `load` and with delay
/// tolerances per `dt_mode`, drawn from `seed`.
pub fn standard_workload(
    source: NodeId,
    count: usize,
    load: LoadScenario,
    dt_mode: DtMode,
    seed: u64,
    small_threshold: usize,
) -> Vec<WorkloadItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_WORKLOAD);
    let small_lo = 16.min(small_threshold.saturating_sub(1)).max(1);
    let large_hi = (small_threshold * 4).max(small_threshold + 1);
    (0..count)
        .map(|i| {
            let small = match load {
                LoadScenario::Low => true,
                LoadScenario::High => false,
                LoadScenario::Mixed => i % 2 == 0,
            };
            let length = if small && small_threshold > 1 {
                rng.gen_range(small_lo..small_threshold)
            } else {
                rng.gen_range(small_threshold.max(1)..=large_hi)
            };
            let delay_tolerance = match dt_mode {
                DtMode::With => rng.gen_range(0.0..1.0),
                DtMode::Without => 1.0,
            };
            WorkloadItem {
                origin: source,
                length,
                delay_tolerance,
            }
        })
        .collect()
}

/// How the initial possession probabilities are assigned.
///
/// A node holds a native before the broadcast starts (from earlier
/// overhearing) exactly when its probability reaches the guess threshold, so
/// a guess is never wrong.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorPossession {
    /// Uniform draws from the scenario's possession seed.
    Seeded,
    /// Fixed values keyed by `(node, workload index)`, `default` elsewhere.
    Explicit {
        default: f64,
        overrides: BTreeMap<(NodeId, usize), f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Arc<Topology>,
    pub protocol: PruningProtocol,
    pub coding_enabled: bool,
    pub workload: Vec<WorkloadItem>,
    pub thresholds: Thresholds,
    pub timeout: Timeout,
    pub possession_seed: u64,
    pub prior: PriorPossession,
    pub label: LoadScenario,
    pub small_threshold: usize,
    pub tick_cap: u64,
}

impl Scenario {
    /// Single-source scenario with the default 9-packet workload.
    pub fn new(
        topology: Arc<Topology>,
        protocol: PruningProtocol,
        coding_enabled: bool,
        source: NodeId,
        load: LoadScenario,
        dt_mode: DtMode,
        seed: u64,
    ) -> Self {
        Self {
            topology,
            protocol,
            coding_enabled,
            workload: standard_workload(
                source,
                DEFAULT_PACKETS,
                load,
                dt_mode,
                seed,
                DEFAULT_SMALL_THRESHOLD,
            ),
            thresholds: Thresholds::default(),
            timeout: dt_mode.timeout(DEFAULT_TIMEOUT_TICKS),
            possession_seed: seed,
            prior: PriorPossession::Seeded,
            label: load,
            small_threshold: DEFAULT_SMALL_THRESHOLD,
            tick_cap: DEFAULT_TICK_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.workload.is_empty() {
            return bad("workload is empty".into());
        }
        for (i, w) in self.workload.iter().enumerate() {
            if w.origin >= self.topology.node_count() {
                return bad(format!(
                    "packet {i} originates at unknown node {}",
                    w.origin
                ));
            }
            if w.length == 0 {
                return bad(format!("packet {i} has zero length"));
            }
            if !(0.0..=1.0).contains(&w.delay_tolerance) {
                return bad(format!("packet {i} delay tolerance outside [0,1]"));
            }
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("prob_gate", t.prob_gate),
            ("dt_gate", t.dt_gate),
            ("guess", t.guess),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0,1]"));
            }
        }
        if self.timeout == Timeout::Ticks(0) {
            return bad("timeout must be at least one tick".into());
        }
        if self.small_threshold == 0 {
            return bad("small threshold must be positive".into());
        }
        Ok(())
    }

    /// Distinct originating nodes.
    pub fn sources(&self) -> BTreeSet<NodeId> {
        self.workload.iter().map(|w| w.origin).collect()
    }

    /// Natives of the workload with their payloads, ids `0..len`.
    pub fn natives(&self) -> Vec<Native> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.possession_seed);
        rng.set_stream(STREAM_PAYLOAD);
        self.workload
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut payload = vec![0u8; w.length];
                rng.fill(payload.as_mut_slice());
                Native {
                    id: PacketId(i as u32),
                    origin: w.origin,
                    size_class: SizeClass::of(w.length, self.small_threshold),
                    delay_tolerance: w.delay_tolerance,
                    payload,
                }
            })
            .collect()
    }

    /// Initial possession probability of each `(node, workload index)` pair.
    /// Origins hold their own packets with probability 1.
    pub fn prior_table(&self) -> Vec<Vec<f64>> {
        let n = self.topology.node_count();
        let p = self.workload.len();
        let mut table = vec![vec![0.0; p]; n];
        match &self.prior {
            PriorPossession::Seeded => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.possession_seed);
                rng.set_stream(STREAM_POSSESSION);
                for row in table.iter_mut() {
                    for slot in row.iter_mut() {
                        *slot = rng.gen_range(0.0..1.0);
                    }
                }
            }
            PriorPossession::Explicit { default, overrides } => {
                for (v, row) in table.iter_mut().enumerate() {
                    for (i, slot) in row.iter_mut().enumerate() {
                        *slot = overrides.get(&(v, i)).copied().unwrap_or(*default);
                    }
                }
            }
        }
        for (i, w) in self.workload.iter().enumerate() {
            table[w.origin][i] = 1.0;
        }
        table
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    SendNative,
    SendCoded,
    Receive,
    Decode,
    Defer,
    Timeout,
    DropRedundant,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SendNative => "SEND_NATIVE",
            Self::SendCoded => "SEND_CODED",
            Self::Receive => "RECEIVE",
            Self::Decode => "DECODE",
            Self::Defer => "DEFER",
            Self::Timeout => "TIMEOUT",
            Self::DropRedundant => "DROP_REDUNDANT",
        }
    }

    pub fn is_send(self) -> bool {
        matches!(self, Self::SendNative | Self::SendCoded)
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "SEND_NATIVE" => Self::SendNative,
            "SEND_CODED" => Self::SendCoded,
            "RECEIVE" => Self::Receive,
            "DECODE" => Self::Decode,
            "DEFER" => Self::Defer,
            "TIMEOUT" => Self::Timeout,
            "DROP_REDUNDANT" => Self::DropRedundant,
            other => return Err(format!("unknown event kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub tick: u64,
    pub actor: NodeId,
    pub kind: EventKind,
    pub packets: Vec<PacketId>,
    /// One forward list per carried native, for sends and receptions.
    pub forward_lists: Vec<Vec<NodeId>>,
}

/// Ordered record of a run. Serialises one event per line as
/// `tick actor KIND ids fwd`, where `ids` is a comma list and `fwd` is one
/// bracketed comma list per carried native (`-` when not applicable).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let ids = join(e.packets.iter());
            let fwd = if e.forward_lists.is_empty() {
                "-".to_string()
            } else {
                e.forward_lists
                    .iter()
                    .map(|l| format!("[{}]", join(l.iter())))
                    .collect()
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                e.tick,
                e.actor,
                e.kind.as_str(),
                ids,
                fwd
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::MalformedLog {
                line: idx + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [tick, actor, kind, ids, fwd] = fields[..] else {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            };
            let tick = tick
                .parse()
                .map_err(|_| bad(format!("bad tick `{tick}`")))?;
            let actor = actor
                .parse()
                .map_err(|_| bad(format!("bad actor `{actor}`")))?;
            let kind = kind.parse().map_err(bad)?;
            let packets = ids
                .split(',')
                .map(|s| {
                    s.parse()
                        .map(PacketId)
                        .map_err(|_| bad(format!("bad id `{s}`")))
                })
                .collect::<Result<_>>()?;
            let forward_lists = if fwd == "-" {
                Vec::new()
            } else {
                let inner = fwd
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| bad(format!("bad forward lists `{fwd}`")))?;
                inner
                    .split("][")
                    .map(|list| {
                        if list.is_empty() {
                            return Ok(Vec::new());
                        }
                        list.split(',')
                            .map(|s| s.parse().map_err(|_| bad(format!("bad node `{s}`"))))
                            .collect()
                    })
                    .collect::<Result<_>>()?
            };
            events.push(Event {
                tick,
                actor,
                kind,
                packets,
                forward_lists,
            });
        }
        Ok(Self { events })
    }

    pub fn sends(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind.is_send())
    }
}

fn join<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, item) in items.enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{item}");
    }
    s
}

/// Forwarding duties for one origin's broadcast: which nodes rebroadcast and
/// the forward list each of them attaches.
///
/// A plan is recorded from a single-packet, coding-free probe broadcast in
/// which every node acts on its first reception, using the sender of that
/// reception as `u`. Coded runs follow the plan so that buffering and
/// merging change when packets move but never who has to forward them.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardingPlan {
    pub origin: NodeId,
    pub entries: BTreeMap<NodeId, PlanEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    /// Sender whose copy designated this node; `None` for the origin.
    pub parent: Option<NodeId>,
    pub decision: ForwardDecision,
}

impl ForwardingPlan {
    pub fn probe(t: &Arc<Topology>, protocol: PruningProtocol, origin: NodeId) -> Result<Self> {
        t.check_node(origin)?;
        let mut sc = Scenario::new(
            t.clone(),
            protocol,
            false,
            origin,
            LoadScenario::Low,
            DtMode::With,
            0,
        );
        sc.workload.truncate(1);
        let mut sim = Simulator::new(&sc, None);
        sim.run()?;
        Ok(Self {
            origin,
            entries: sim.probe_entries,
        })
    }

    /// Rebroadcasting nodes, origin excluded.
    pub fn forwarders(&self) -> BTreeSet<NodeId> {
        self.entries
            .keys()
            .copied()
            .filter(|&v| v != self.origin)
            .collect()
    }

    pub fn forward_list(&self, v: NodeId) -> Option<&[NodeId]> {
        self.entries
            .get(&v)
            .map(|e| e.decision.forward_list.as_slice())
    }

    pub fn uncovered(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.decision.uncovered.len())
            .sum()
    }
}

/// Runs one broadcast scenario to quiescence (or the tick cap).
pub fn run_broadcast(sc: &Scenario) -> Result<(EventLog, RunMetrics)> {
    let mut sim = Simulator::planned(sc)?;
    sim.run()?;
    Ok(sim.finish())
}

/// Distinct non-source nodes that transmit during a single-packet,
/// coding-free broadcast from `source`.
pub fn forwarder_set(
    t: Arc<Topology>,
    protocol: PruningProtocol,
    source: NodeId,
) -> Result<BTreeSet<NodeId>> {
    Ok(ForwardingPlan::probe(&t, protocol, source)?.forwarders())
}

/// Per-node packet pools at the end of a run.
pub fn final_pools(sc: &Scenario) -> Result<Vec<BTreeSet<PacketId>>> {
    let mut sim = Simulator::planned(sc)?;
    sim.run()?;
    Ok(sim
        .states
        .iter()
        .map(|s| s.pool().keys().copied().collect())
        .collect())
}

struct Simulator<'a> {
    sc: &'a Scenario,
    topo: &'a Topology,
    /// `None` while recording a probe.
    plans: Option<BTreeMap<NodeId, ForwardingPlan>>,
    probe_entries: BTreeMap<NodeId, PlanEntry>,
    states: Vec<NodeState>,
    heard: Vec<BTreeSet<PacketId>>,
    /// Natives each node has already taken on for rebroadcast.
    duties: Vec<BTreeSet<PacketId>>,
    in_flight: Vec<(NodeId, Packet)>,
    tick: u64,
    release_idle: bool,
    log: EventLog,
    big: ClassCounts,
    small: ClassCounts,
    forwarders: BTreeSet<NodeId>,
    sources: BTreeSet<NodeId>,
    uncovered: usize,
    quiescent: bool,
    workload_ids: Vec<PacketId>,
}

impl<'a> Simulator<'a> {
    fn planned(sc: &'a Scenario) -> Result<Self> {
        sc.validate()?;
        let plans = sc
            .sources()
            .into_iter()
            .map(|o| ForwardingPlan::probe(&sc.topology, sc.protocol, o).map(|p| (o, p)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self::new(sc, Some(plans)))
    }

    fn new(sc: &'a Scenario, plans: Option<BTreeMap<NodeId, ForwardingPlan>>) -> Self {
        let topo = sc.topology.as_ref();
        let n = topo.node_count();
        let natives = sc.natives();
        let prior = sc.prior_table();
        let mut states: Vec<NodeState> = (0..n).map(NodeState::new).collect();

        for (v, state) in states.iter_mut().enumerate() {
            for &w in topo.adjacent(v) {
                for native in &natives {
                    state.set_possession(w, native.id, prior[w][native.id.0 as usize]);
                }
            }
            for native in &natives {
                if native.origin != v && prior[v][native.id.0 as usize] >= sc.thresholds.guess {
                    state.store(native.clone());
                }
            }
        }

        let uncovered = plans
            .as_ref()
            .map_or(0, |ps| ps.values().map(ForwardingPlan::uncovered).sum());
        let mut sim = Self {
            sc,
            topo,
            plans,
            probe_entries: BTreeMap::new(),
            states,
            heard: vec![BTreeSet::new(); n],
            duties: vec![BTreeSet::new(); n],
            in_flight: Vec::new(),
            tick: 0,
            release_idle: false,
            log: EventLog::default(),
            big: ClassCounts::default(),
            small: ClassCounts::default(),
            forwarders: BTreeSet::new(),
            sources: sc.sources(),
            uncovered,
            quiescent: false,
            workload_ids: natives.iter().map(|n| n.id).collect(),
        };

        for native in natives {
            let origin = native.origin;
            sim.heard[origin].insert(native.id);
            sim.duties[origin].insert(native.id);
            let forward_list = match &sim.plans {
                Some(plans) => plans[&origin]
                    .forward_list(origin)
                    .expect("origin is in its own plan")
                    .to_vec(),
                None => {
                    let decision = select_forwarders_from(sc.protocol, topo, None, origin)
                        .expect("origins are validated");
                    sim.uncovered += decision.uncovered.len();
                    let list = decision.forward_list.clone();
                    sim.probe_entries.insert(
                        origin,
                        PlanEntry {
                            parent: None,
                            decision,
                        },
                    );
                    list
                }
            };
            sim.states[origin].enqueue(native, forward_list);
        }
        sim
    }

    fn emit(
        &mut self,
        actor: NodeId,
        kind: EventKind,
        packets: Vec<PacketId>,
        forward_lists: Vec<Vec<NodeId>>,
    ) {
        self.log.events.push(Event {
            tick: self.tick,
            actor,
            kind,
            packets,
            forward_lists,
        });
    }

    fn run(&mut self) -> Result<()> {
        loop {
            if self.tick > self.sc.tick_cap {
                return Ok(());
            }
            for (sender, packet) in std::mem::take(&mut self.in_flight) {
                let topo = self.topo;
                for &r in topo.adjacent(sender) {
                    self.on_receive(r, &packet, sender)?;
                }
            }
            self.fire_timers();
            for v in 0..self.states.len() {
                self.on_transmit_opportunity(v)?;
            }

            if !self.in_flight.is_empty() {
                self.tick += 1;
                continue;
            }
            if self.states.iter().all(|s| s.queue_len() == 0) {
                self.quiescent = true;
                return Ok(());
            }
            // Nothing in the air: state can only change when a timer fires.
            let mut next: Option<u64> = None;
            let mut idle_waiters = false;
            for s in &self.states {
                for (_, expiry) in s.pending_timers() {
                    match expiry {
                        Some(e) => next = Some(next.map_or(e, |n| n.min(e))),
                        None => idle_waiters = true,
                    }
                }
            }
            if idle_waiters {
                self.release_idle = true;
                self.tick += 1;
            } else if let Some(e) = next {
                self.tick = e.max(self.tick + 1);
            } else {
                // queued packets with no timer cannot make progress
                return Ok(());
            }
        }
    }

    fn fire_timers(&mut self) {
        let release_idle = std::mem::take(&mut self.release_idle);
        for v in 0..self.states.len() {
            let due: Vec<PacketId> = self.states[v]
                .pending_timers()
                .filter(|&(_, e)| match e {
                    Some(e) => e <= self.tick,
                    None => release_idle,
                })
                .map(|(id, _)| id)
                .collect();
            for id in due {
                self.on_timeout(v, id);
            }
        }
    }

    /// Marks a buffered packet as done waiting; the next transmit opportunity
    /// sends it natively unless a partner has turned up.
    fn on_timeout(&mut self, v: NodeId, id: PacketId) {
        if self.states[v].expire(id) {
            self.emit(v, EventKind::Timeout, vec![id], Vec::new());
        }
    }

    fn on_receive(&mut self, r: NodeId, packet: &Packet, sender: NodeId) -> Result<()> {
        self.emit(
            r,
            EventKind::Receive,
            packet.ids(),
            packet
                .headers
                .iter()
                .map(|h| h.forward_list.clone())
                .collect(),
        );
        update_nbr_recv_table(&mut self.states[r], packet, sender);

        let outcome = match packet.kind {
            PacketKind::Native => {
                let h = &packet.headers[0];
                let stored = self.states[r].store(Native {
                    id: h.id,
                    origin: h.origin,
                    size_class: h.size_class,
                    delay_tolerance: h.delay_tolerance,
                    payload: packet.payload.clone(),
                });
                if stored {
                    DecodeOutcome::Decoded(self.states[r].pool()[&h.id].clone())
                } else {
                    DecodeOutcome::Redundant
                }
            }
            PacketKind::Coded => {
                let outcome = self.states[r].decode(packet, sender)?;
                match &outcome {
                    DecodeOutcome::Decoded(n) => {
                        self.emit(r, EventKind::Decode, vec![n.id], Vec::new())
                    }
                    DecodeOutcome::Deferred => {
                        self.emit(r, EventKind::Defer, packet.ids(), Vec::new())
                    }
                    DecodeOutcome::Redundant => {}
                }
                outcome
            }
        };

        let mut any_new = false;
        for h in &packet.headers {
            if self.states[r].holds(h.id) {
                any_new |= self.on_copy(r, h, sender, packet.sender_two_hop.as_ref())?;
            }
        }
        if !any_new && outcome == DecodeOutcome::Redundant {
            self.emit(r, EventKind::DropRedundant, packet.ids(), Vec::new());
        }
        if matches!(outcome, DecodeOutcome::Decoded(_)) {
            for late in self.states[r].retry_deferred() {
                self.emit(r, EventKind::Decode, vec![late.native.id], Vec::new());
                let h = late
                    .carrier
                    .header(late.native.id)
                    .expect("decoded from carrier")
                    .clone();
                self.on_copy(r, &h, late.sender, late.carrier.sender_two_hop.as_ref())?;
            }
        }
        Ok(())
    }

    /// `r` holds native `h.id` and has just heard a copy of it from `sender`.
    /// Takes on the rebroadcast when designated. Returns whether this was the
    /// first copy `r` heard.
    fn on_copy(
        &mut self,
        r: NodeId,
        h: &Header,
        sender: NodeId,
        sender_two_hop: Option<&NodeSet>,
    ) -> Result<bool> {
        let first = self.heard[r].insert(h.id);
        if self.duties[r].contains(&h.id) || !h.forward_list.contains(&r) {
            return Ok(first);
        }
        let forward_list = match &self.plans {
            Some(plans) => match plans.get(&h.origin).and_then(|p| p.forward_list(r)) {
                Some(list) => list.to_vec(),
                None => return Ok(first),
            },
            None => {
                // recording a plan: act on the first copy only
                if !first {
                    return Ok(first);
                }
                let info = SenderInfo {
                    id: sender,
                    two_hop: sender_two_hop,
                };
                let decision = select_forwarders_from(self.sc.protocol, self.topo, Some(info), r)?;
                self.uncovered += decision.uncovered.len();
                let list = decision.forward_list.clone();
                self.probe_entries.insert(
                    r,
                    PlanEntry {
                        parent: Some(sender),
                        decision,
                    },
                );
                list
            }
        };
        self.duties[r].insert(h.id);
        let native = self.states[r].pool()[&h.id].clone();
        self.states[r].enqueue(native, forward_list);
        Ok(first)
    }

    fn on_transmit_opportunity(&mut self, v: NodeId) -> Result<()> {
        let topo = self.topo;
        let neighbors = topo.adjacent(v);
        let th = self.sc.thresholds;
        let pending = self.states[v].queue_len();
        for _ in 0..pending {
            let head = self.states[v]
                .head()
                .expect("examined at most queue_len times")
                .clone();
            if self.sc.coding_enabled {
                let state = &self.states[v];
                if head.forward_list.is_empty() && all_nbrs_have(state, head.id, neighbors) {
                    self.states[v].dequeue(&[head.id]);
                    self.emit(v, EventKind::DropRedundant, vec![head.id], Vec::new());
                    continue;
                }
                let prob = needing_probability(state, head.id, neighbors, th.guess);
                let tolerance = state.pool()[&head.id].delay_tolerance;
                if prob > th.prob_gate && tolerance > th.dt_gate {
                    let code_set = obtain_code_set(state, neighbors, th.guess)?;
                    if code_set.members.len() > 1 {
                        return self.send(v, &code_set.members);
                    }
                    if !state.is_expired(head.id) {
                        if !state.has_timer(head.id) {
                            let expiry = match self.sc.timeout {
                                Timeout::Ticks(t) => Some(self.tick + t),
                                Timeout::UntilIdle => None,
                            };
                            self.states[v].arm_timer(head.id, expiry);
                            self.emit(v, EventKind::Defer, vec![head.id], Vec::new());
                        }
                        self.states[v].rotate();
                        continue;
                    }
                }
            }
            return self.send(v, &[head.id]);
        }
        Ok(())
    }

    fn send(&mut self, v: NodeId, members: &[PacketId]) -> Result<()> {
        let queued = self.states[v].dequeue(members);
        let state = &self.states[v];
        let mut packet = coding::encode(state.pool(), members, self.sc.small_threshold)?;
        for (h, q) in packet.headers.iter_mut().zip(&queued) {
            h.forward_list = q.forward_list.clone();
        }
        if self.sc.protocol.needs_two_hop_piggyback() {
            packet.sender_two_hop = Some(self.topo.two_hop(v).clone());
        }
        if self.sc.coding_enabled {
            packet.reception_report = state.pool().keys().copied().collect();
        }

        let class = match packet.size_class {
            SizeClass::Large => &mut self.big,
            SizeClass::Small => &mut self.small,
        };
        let kind = match packet.kind {
            PacketKind::Native => {
                class.native_sends += 1;
                EventKind::SendNative
            }
            PacketKind::Coded => {
                class.coded_sends += 1;
                class.coded_natives += members.len();
                EventKind::SendCoded
            }
        };
        if !self.sources.contains(&v) {
            self.forwarders.insert(v);
        }
        self.emit(
            v,
            kind,
            packet.ids(),
            packet
                .headers
                .iter()
                .map(|h| h.forward_list.clone())
                .collect(),
        );
        self.in_flight.push((v, packet));
        Ok(())
    }

    fn finish(self) -> (EventLog, RunMetrics) {
        let delivered = self
            .states
            .iter()
            .all(|s| self.workload_ids.iter().all(|&id| s.holds(id)));
        let metrics = RunMetrics::from_counts(
            self.big,
            self.small,
            self.forwarders.len(),
            delivered,
            self.quiescent,
            self.tick,
            self.uncovered,
        );
        (self.log, metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Arc<Topology> {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Arc::new(Topology::from_edges(n, &edges).unwrap())
    }

    fn one_packet(t: Arc<Topology>, protocol: PruningProtocol, coding: bool, dt: f64) -> Scenario {
        let mut sc = Scenario::new(t, protocol, coding, 0, LoadScenario::Low, DtMode::With, 5);
        sc.workload = vec![WorkloadItem {
            origin: 0,
            length: 40,
            delay_tolerance: dt,
        }];
        sc.prior = PriorPossession::Explicit {
            default: 0.5,
            overrides: BTreeMap::new(),
        };
        sc
    }

    fn count(log: &EventLog, kind: EventKind) -> usize {
        log.events.iter().filter(|e| e.kind == kind).count()
    }

    #[test]
    fn two_node_flood_rebroadcasts_once() {
        let sc = one_packet(path(2), PruningProtocol::Flood, false, 0.0);
        let (log, m) = run_broadcast(&sc).unwrap();
        assert_eq!(log.sends().count(), 2);
        assert_eq!(count(&log, EventKind::Receive), 2);
        assert_eq!(count(&log, EventKind::DropRedundant), 1);
        assert!(m.delivery_complete && m.quiescent);
    }

    #[test]
    fn disconnected_topology_quiesces_undelivered() {
        let t = Arc::new(Topology::from_edges(4, &[(0, 1), (2, 3)]).unwrap());
        for p in PruningProtocol::ALL {
            let sc = Scenario::new(t.clone(), p, true, 0, LoadScenario::Low, DtMode::With, 1);
            let (_, m) = run_broadcast(&sc).unwrap();
            assert!(m.quiescent);
            assert!(!m.delivery_complete);
        }
    }

    #[test]
    fn non_tolerant_packet_goes_out_at_once() {
        let sc = one_packet(path(2), PruningProtocol::Dp, true, 0.0);
        let (log, _) = run_broadcast(&sc).unwrap();
        assert_eq!(log.events[0].kind, EventKind::SendNative);
        assert_eq!(log.events[0].tick, 0);
    }

    #[test]
    fn tolerant_packet_waits_for_timeout_then_goes_native() {
        let sc = one_packet(path(2), PruningProtocol::Dp, true, 1.0);
        let (log, m) = run_broadcast(&sc).unwrap();
        let kinds: Vec<_> = log.events.iter().map(|e| (e.tick, e.kind)).collect();
        assert_eq!(
            kinds[..3],
            [
                (0, EventKind::Defer),
                (DEFAULT_TIMEOUT_TICKS, EventKind::Timeout),
                (DEFAULT_TIMEOUT_TICKS, EventKind::SendNative)
            ]
        );
        assert!(m.delivery_complete);
    }

    #[test]
    fn until_idle_wait_releases_when_network_is_quiet() {
        let mut sc = one_packet(path(3), PruningProtocol::Flood, true, 1.0);
        sc.timeout = Timeout::UntilIdle;
        let (log, m) = run_broadcast(&sc).unwrap();
        assert!(m.quiescent && m.delivery_complete);
        assert!(count(&log, EventKind::Timeout) >= 1);
    }

    #[test]
    fn pruned_receiver_outside_forward_list_stays_silent() {
        // star centred on 0: every leaf is 1 hop from the source
        let star = Arc::new(Topology::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap());
        let sc = one_packet(star, PruningProtocol::Dp, false, 0.0);
        let (log, m) = run_broadcast(&sc).unwrap();
        assert_eq!(log.sends().count(), 1);
        assert_eq!(m.forwarder_count, 0);
        assert!(m.delivery_complete);
    }

    #[test]
    fn designated_relay_forwards_exactly_once() {
        let mut sc = one_packet(path(4), PruningProtocol::Dp, false, 0.0);
        sc.workload.push(sc.workload[0].clone());
        let (log, m) = run_broadcast(&sc).unwrap();
        let mut per_node = BTreeMap::new();
        for e in log.sends() {
            for id in &e.packets {
                *per_node.entry((e.actor, *id)).or_insert(0) += 1;
            }
        }
        assert!(per_node.values().all(|&c| c == 1));
        assert_eq!(m.forwarder_count, 2);
        assert!(m.delivery_complete);
    }

    #[test]
    fn tick_cap_reports_non_quiescent() {
        let mut sc = one_packet(path(6), PruningProtocol::Flood, false, 0.0);
        sc.tick_cap = 1;
        let (_, m) = run_broadcast(&sc).unwrap();
        assert!(!m.quiescent);
        assert!(!m.delivery_complete);
    }

    #[test]
    fn rejects_invalid_scenarios() {
        let mut sc = one_packet(path(2), PruningProtocol::Dp, true, 0.0);
        sc.thresholds.prob_gate = 1.5;
        assert!(run_broadcast(&sc).is_err());
        let mut sc = one_packet(path(2), PruningProtocol::Dp, true, 0.0);
        sc.workload.clear();
        assert!(run_broadcast(&sc).is_err());
        let mut sc = one_packet(path(2), PruningProtocol::Dp, true, 0.0);
        sc.workload[0].origin = 7;
        assert!(run_broadcast(&sc).is_err());
    }

    #[test]
    fn log_text_round_trips() {
        let t =
            Arc::new(crate::topology::find_connected_topology(15, 60.0, 25.0, 4, 1000).unwrap());
        let sc = Scenario::new(
            t,
            PruningProtocol::Tdp,
            true,
            0,
            LoadScenario::Mixed,
            DtMode::With,
            4,
        );
        let (log, _) = run_broadcast(&sc).unwrap();
        assert_eq!(EventLog::parse(&log.to_text()).unwrap(), log);
        assert!(EventLog::parse("0 1 SEND_NATIVE 3").is_err());
        assert!(EventLog::parse("0 1 SHOUT 3 -").is_err());
    }

    #[test]
    fn standard_workload_shapes() {
        let low = standard_workload(0, 9, LoadScenario::Low, DtMode::With, 1, 100);
        assert!(low.iter().all(|w| w.length < 100));
        let high = standard_workload(0, 9, LoadScenario::High, DtMode::Without, 1, 100);
        assert!(high
            .iter()
            .all(|w| w.length >= 100 && w.delay_tolerance == 1.0));
        let mixed = standard_workload(0, 4, LoadScenario::Mixed, DtMode::With, 1, 100);
        let classes: Vec<bool> = mixed.iter().map(|w| w.length < 100).collect();
        assert_eq!(classes, vec![true, false, true, false]);
    }
}
