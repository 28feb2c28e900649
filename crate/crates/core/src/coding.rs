//! Opportunistic XOR coding state kept by each node.
//!
//! Every node owns a [`NodeState`]: a FIFO output queue split into small and
//! large virtual queues, a pool of every native it holds, and a table of how
//! likely each neighbour is to already hold each packet. A node transmits an
//! XOR of several queued natives when every neighbour that is missing any of
//! them is missing at most one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::topology::NodeSet;
use crate::{Error, NodeId, PacketId, Result};

pub const DEFAULT_SMALL_THRESHOLD: usize = 100;
pub const DEFAULT_GUESS_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    /// `Small` iff `length < small_threshold`.
    pub fn of(length: usize, small_threshold: usize) -> Self {
        if length < small_threshold {
            Self::Small
        } else {
            Self::Large
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Small => "small",
            Self::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    Native,
    Coded,
}

/// A native packet as held in a packet pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Native {
    pub id: PacketId,
    pub origin: NodeId,
    pub size_class: SizeClass,
    pub delay_tolerance: f64,
    pub payload: Vec<u8>,
}

impl Native {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// Per-native metadata carried on the wire. Coded packets carry one header per
/// constituent so a receiver can restore the exact native length and learn
/// its forwarding duty for each constituent.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub id: PacketId,
    pub origin: NodeId,
    pub length: usize,
    pub size_class: SizeClass,
    pub delay_tolerance: f64,
    pub forward_list: Vec<NodeId>,
}

impl Header {
    pub fn of(native: &Native, forward_list: Vec<NodeId>) -> Self {
        Self {
            id: native.id,
            origin: native.origin,
            length: native.len(),
            size_class: native.size_class,
            delay_tolerance: native.delay_tolerance,
            forward_list,
        }
    }
}

/// A broadcast transmission unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub kind: PacketKind,
    pub size_class: SizeClass,
    pub headers: Vec<Header>,
    pub payload: Vec<u8>,
    /// Sender's `N(N(sender))`, attached under TDP.
    pub sender_two_hop: Option<NodeSet>,
    /// Packet ids the sender holds at transmission time.
    pub reception_report: BTreeSet<PacketId>,
}

impl Packet {
    pub fn native(native: &Native, forward_list: Vec<NodeId>) -> Self {
        Self {
            kind: PacketKind::Native,
            size_class: native.size_class,
            headers: vec![Header::of(native, forward_list)],
            payload: native.payload.clone(),
            sender_two_hop: None,
            reception_report: BTreeSet::new(),
        }
    }

    /// Ids of the natives carried, in encoding order.
    pub fn ids(&self) -> Vec<PacketId> {
        self.headers.iter().map(|h| h.id).collect()
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn header(&self, id: PacketId) -> Option<&Header> {
        self.headers.iter().find(|h| h.id == id)
    }
}

pub type PacketPool = BTreeMap<PacketId, Native>;

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedPacket {
    pub id: PacketId,
    pub size_class: SizeClass,
    pub forward_list: Vec<NodeId>,
}

/// Natives chosen for one transmission and their XOR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSet {
    pub members: Vec<PacketId>,
    pub encoded: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodeOutcome {
    Decoded(Native),
    /// Every constituent was already in the pool.
    Redundant,
    /// Two or more constituents missing; the packet was parked for retry.
    Deferred,
}

/// Something the node learned by decoding a parked coded packet.
#[derive(Debug, Clone, PartialEq)]
pub struct LateDecode {
    pub native: Native,
    pub carrier: Packet,
    pub sender: NodeId,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node: NodeId,
    output_queue: VecDeque<QueuedPacket>,
    pool: PacketPool,
    possession: BTreeMap<NodeId, BTreeMap<PacketId, f64>>,
    timers: BTreeMap<PacketId, Option<u64>>,
    expired: BTreeSet<PacketId>,
    deferred: Vec<(Packet, NodeId)>,
}

impl NodeState {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            output_queue: VecDeque::new(),
            pool: PacketPool::new(),
            possession: BTreeMap::new(),
            timers: BTreeMap::new(),
            expired: BTreeSet::new(),
            deferred: Vec::new(),
        }
    }

    pub fn pool(&self) -> &PacketPool {
        &self.pool
    }

    pub fn holds(&self, id: PacketId) -> bool {
        self.pool.contains_key(&id)
    }

    /// Adds a native to the pool. Returns false if it was already there.
    pub fn store(&mut self, native: Native) -> bool {
        if self.pool.contains_key(&native.id) {
            return false;
        }
        self.pool.insert(native.id, native);
        true
    }

    pub fn output_queue(&self) -> impl Iterator<Item = &QueuedPacket> {
        self.output_queue.iter()
    }

    pub fn queue_len(&self) -> usize {
        self.output_queue.len()
    }

    pub fn is_queued(&self, id: PacketId) -> bool {
        self.output_queue.iter().any(|q| q.id == id)
    }

    pub fn head(&self) -> Option<&QueuedPacket> {
        self.output_queue.front()
    }

    pub fn virtual_small(&self) -> impl Iterator<Item = &QueuedPacket> {
        self.output_queue
            .iter()
            .filter(|q| q.size_class == SizeClass::Small)
    }

    pub fn virtual_large(&self) -> impl Iterator<Item = &QueuedPacket> {
        self.output_queue
            .iter()
            .filter(|q| q.size_class == SizeClass::Large)
    }

    /// Appends `native` to the output queue (and pool). A packet already
    /// queued is left where it is.
    pub fn enqueue(&mut self, native: Native, forward_list: Vec<NodeId>) {
        if self.is_queued(native.id) {
            return;
        }
        self.output_queue.push_back(QueuedPacket {
            id: native.id,
            size_class: native.size_class,
            forward_list,
        });
        self.store(native);
    }

    /// Moves the head to the tail.
    pub fn rotate(&mut self) {
        if let Some(head) = self.output_queue.pop_front() {
            self.output_queue.push_back(head);
        }
    }

    /// Removes the given ids from the queue, returning the removed entries in
    /// the order given. Any timer on them is cancelled.
    pub fn dequeue(&mut self, ids: &[PacketId]) -> Vec<QueuedPacket> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if let Some(pos) = self.output_queue.iter().position(|q| q.id == *id) {
                out.push(self.output_queue.remove(pos).unwrap());
            }
            self.timers.remove(id);
            self.expired.remove(id);
        }
        out
    }

    pub fn possession(&self, neighbor: NodeId, id: PacketId) -> f64 {
        self.possession
            .get(&neighbor)
            .and_then(|m| m.get(&id))
            .copied()
            .unwrap_or(0.0)
    }

    /// Records a possession estimate. Never lowers an existing value.
    pub fn set_possession(&mut self, neighbor: NodeId, id: PacketId, prob: f64) {
        let slot = self
            .possession
            .entry(neighbor)
            .or_default()
            .entry(id)
            .or_insert(prob);
        if prob > *slot {
            *slot = prob;
        }
    }

    pub fn confirm(&mut self, neighbor: NodeId, id: PacketId) {
        self.set_possession(neighbor, id, 1.0);
    }

    pub fn is_confirmed(&self, neighbor: NodeId, id: PacketId) -> bool {
        self.possession(neighbor, id) >= 1.0
    }

    /// Confirmed or guessed possession.
    pub fn believes_has(&self, neighbor: NodeId, id: PacketId, guess_threshold: f64) -> bool {
        let p = self.possession(neighbor, id);
        p >= 1.0 || guess_possession(p, guess_threshold)
    }

    pub fn timer(&self, id: PacketId) -> Option<Option<u64>> {
        self.timers.get(&id).copied()
    }

    pub fn has_timer(&self, id: PacketId) -> bool {
        self.timers.contains_key(&id)
    }

    /// Arms a timer expiring at `expiry`, or at the next network-idle point
    /// when `None`.
    pub fn arm_timer(&mut self, id: PacketId, expiry: Option<u64>) {
        self.timers.insert(id, expiry);
    }

    pub fn pending_timers(&self) -> impl Iterator<Item = (PacketId, Option<u64>)> + '_ {
        self.timers.iter().map(|(&id, &e)| (id, e))
    }

    /// Marks a buffered packet's wait as over. Returns false (no-op) when the
    /// packet has no live timer, e.g. it was already transmitted.
    pub fn expire(&mut self, id: PacketId) -> bool {
        if self.timers.remove(&id).is_some() {
            self.expired.insert(id);
            true
        } else {
            false
        }
    }

    pub fn is_expired(&self, id: PacketId) -> bool {
        self.expired.contains(&id)
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    /// Decodes a coded packet against the pool.
    pub fn decode(&mut self, coded: &Packet, sender: NodeId) -> Result<DecodeOutcome> {
        let missing: Vec<&Header> = coded
            .headers
            .iter()
            .filter(|h| !self.pool.contains_key(&h.id))
            .collect();
        match missing.len() {
            0 => Ok(DecodeOutcome::Redundant),
            1 => {
                let target = missing[0].clone();
                let native = recover(&self.pool, coded, &target)?;
                self.store(native.clone());
                Ok(DecodeOutcome::Decoded(native))
            }
            _ => {
                self.deferred.push((coded.clone(), sender));
                Ok(DecodeOutcome::Deferred)
            }
        }
    }

    /// Retries parked coded packets until no further progress, returning
    /// every native recovered along the way.
    pub fn retry_deferred(&mut self) -> Vec<LateDecode> {
        let mut recovered = Vec::new();
        loop {
            let mut progressed = false;
            let parked = std::mem::take(&mut self.deferred);
            for (coded, sender) in parked {
                let missing: Vec<&Header> = coded
                    .headers
                    .iter()
                    .filter(|h| !self.pool.contains_key(&h.id))
                    .collect();
                match missing.len() {
                    0 => progressed = true,
                    1 => {
                        let target = missing[0].clone();
                        let native = recover(&self.pool, &coded, &target)
                            .expect("all other constituents are pooled");
                        self.store(native.clone());
                        recovered.push(LateDecode {
                            native,
                            carrier: coded,
                            sender,
                        });
                        progressed = true;
                    }
                    _ => self.deferred.push((coded, sender)),
                }
            }
            if !progressed {
                return recovered;
            }
        }
    }
}

fn recover(pool: &PacketPool, coded: &Packet, target: &Header) -> Result<Native> {
    let mut payload = coded.payload.clone();
    for h in coded.headers.iter().filter(|h| h.id != target.id) {
        let known = pool.get(&h.id).ok_or(Error::MissingPacket(h.id))?;
        xor_into(&mut payload, &known.payload);
    }
    payload.truncate(target.length);
    Ok(Native {
        id: target.id,
        origin: target.origin,
        size_class: target.size_class,
        delay_tolerance: target.delay_tolerance,
        payload,
    })
}

/// `acc ^= other`, zero-extending `acc` if `other` is longer.
pub fn xor_into(acc: &mut Vec<u8>, other: &[u8]) {
    if acc.len() < other.len() {
        acc.resize(other.len(), 0);
    }
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= b;
    }
}

/// Records what an overheard transmission reveals: the sender holds every
/// constituent it sent and everything in its reception report.
pub fn update_nbr_recv_table(s: &mut NodeState, observed: &Packet, sender: NodeId) {
    for h in &observed.headers {
        s.confirm(sender, h.id);
    }
    for &id in &observed.reception_report {
        s.confirm(sender, id);
    }
}

/// True iff every neighbour is confirmed (probability exactly 1) to hold `id`.
pub fn all_nbrs_have(s: &NodeState, id: PacketId, neighbors: &NodeSet) -> bool {
    neighbors.iter().all(|&v| s.is_confirmed(v, id))
}

pub fn guess_possession(prob: f64, guess_threshold: f64) -> bool {
    prob >= guess_threshold
}

/// A receiver can decode iff it is missing at most one constituent.
pub fn can_decode(known: &BTreeSet<PacketId>, coded_ids: &BTreeSet<PacketId>) -> bool {
    coded_ids.difference(known).nth(1).is_none()
}

/// Lowest possession probability of `id` among neighbours not believed to
/// hold it; 1 when every neighbour is believed to hold it.
pub fn needing_probability(
    s: &NodeState,
    id: PacketId,
    neighbors: &NodeSet,
    guess_threshold: f64,
) -> f64 {
    neighbors
        .iter()
        .filter(|&&v| !s.believes_has(v, id, guess_threshold))
        .map(|&v| s.possession(v, id))
        .fold(1.0, f64::min)
}

/// Picks the head of the output queue plus every later packet that keeps the
/// combination decodable by all neighbours still missing something. Partners
/// from the head's own virtual queue are tried before the other one.
pub fn obtain_code_set(
    s: &NodeState,
    neighbors: &NodeSet,
    guess_threshold: f64,
) -> Result<CodeSet> {
    let head = s.head().ok_or(Error::EmptyCodeSet)?;
    let known: BTreeMap<NodeId, BTreeSet<PacketId>> = neighbors
        .iter()
        .map(|&v| {
            let ids = s
                .output_queue()
                .map(|q| q.id)
                .filter(|&id| s.believes_has(v, id, guess_threshold))
                .collect();
            (v, ids)
        })
        .collect();

    let same = s
        .output_queue()
        .skip(1)
        .filter(|q| q.size_class == head.size_class);
    let other = s
        .output_queue()
        .skip(1)
        .filter(|q| q.size_class != head.size_class);

    let mut members = vec![head.id];
    let mut member_set: BTreeSet<PacketId> = members.iter().copied().collect();
    for r in same.chain(other) {
        let mut trial = member_set.clone();
        trial.insert(r.id);
        let decodable = known
            .values()
            .filter(|k| !trial.is_subset(k))
            .all(|k| can_decode(k, &trial));
        if decodable {
            members.push(r.id);
            member_set = trial;
        }
    }

    let mut encoded = Vec::new();
    for id in &members {
        xor_into(&mut encoded, &s.pool[id].payload);
    }
    Ok(CodeSet { members, encoded })
}

/// XORs the pooled natives `members` (zero-padded to the longest) into one
/// packet. A single member yields that native unchanged. Forward lists are
/// left empty for the caller to fill.
pub fn encode(pool: &PacketPool, members: &[PacketId], small_threshold: usize) -> Result<Packet> {
    let first = members.first().ok_or(Error::EmptyCodeSet)?;
    if members.len() == 1 {
        let native = pool.get(first).ok_or(Error::MissingPacket(*first))?;
        return Ok(Packet::native(native, Vec::new()));
    }
    let mut payload = Vec::new();
    let mut headers = Vec::with_capacity(members.len());
    for id in members {
        let native = pool.get(id).ok_or(Error::MissingPacket(*id))?;
        xor_into(&mut payload, &native.payload);
        headers.push(Header::of(native, Vec::new()));
    }
    Ok(Packet {
        kind: PacketKind::Coded,
        size_class: SizeClass::of(payload.len(), small_threshold),
        headers,
        payload,
        sender_two_hop: None,
        reception_report: BTreeSet::new(),
    })
}
