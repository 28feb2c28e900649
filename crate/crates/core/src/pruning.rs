//! Forward-node selection.
//!
//! A relay `v` that received a packet from sender `u` picks forwarders from a
//! candidate set `B` so that their closed neighbourhoods cover the coverage set
//! `U`. With closed neighbourhoods `N(·)`:
//!
//! | case        | `B`            | `U`                                           |
//! |-------------|----------------|-----------------------------------------------|
//! | source      | `N(v) ∖ {v}`   | `N(N(v)) ∖ N(v)`                              |
//! | DP relay    | `N(v) ∖ N(u)`  | `N(N(v)) ∖ N(u) ∖ N(v)`                       |
//! | TDP relay   | `N(v) ∖ N(u)`  | `N(N(v)) ∖ N(N(u))`                           |
//! | PDP relay   | `N(v) ∖ N(u)`  | `N(N(v)) ∖ N(u) ∖ N(v) ∖ N(N(u) ∩ N(v))`      |
//!
//! Flooding skips the cover entirely and designates every neighbour.

use std::fmt;
use std::str::FromStr;

use crate::topology::{NodeSet, Topology};
use crate::{Error, NodeId, Result};

/// Largest candidate set accepted by [`brute_force_min_forward_set`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PruningProtocol {
    Flood,
    Dp,
    Tdp,
    Pdp,
}

impl PruningProtocol {
    pub const ALL: [PruningProtocol; 4] = [Self::Flood, Self::Dp, Self::Tdp, Self::Pdp];
    pub const PRUNED: [PruningProtocol; 3] = [Self::Dp, Self::Tdp, Self::Pdp];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Flood => "flood",
            Self::Dp => "dp",
            Self::Tdp => "tdp",
            Self::Pdp => "pdp",
        }
    }

    /// TDP relays need the sender's full 2-hop set, carried in the packet.
    pub fn needs_two_hop_piggyback(self) -> bool {
        self == Self::Tdp
    }
}

impl fmt::Display for PruningProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PruningProtocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flood" => Ok(Self::Flood),
            "dp" => Ok(Self::Dp),
            "tdp" => Ok(Self::Tdp),
            "pdp" => Ok(Self::Pdp),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ForwardDecision {
    pub candidate_set: NodeSet,
    pub coverage_set: NodeSet,
    /// Selection order.
    pub forward_list: Vec<NodeId>,
    /// Members of `coverage_set` that no candidate reaches.
    pub uncovered: NodeSet,
}

/// What a relay knows about the node it heard the packet from.
#[derive(Debug, Clone, Copy)]
pub struct SenderInfo<'a> {
    pub id: NodeId,
    /// `N(N(u))` as piggybacked on the packet; only consulted by TDP.
    pub two_hop: Option<&'a NodeSet>,
}

/// Candidate and coverage sets for `v`, relaying a packet heard from `u`
/// (`None` when `v` originates the broadcast).
pub fn coverage_sets(
    protocol: PruningProtocol,
    t: &Topology,
    u: Option<NodeId>,
    v: NodeId,
) -> Result<(NodeSet, NodeSet)> {
    let sender = u.map(|id| SenderInfo { id, two_hop: None });
    coverage_sets_from(protocol, t, sender, v)
}

/// As [`coverage_sets`], but TDP takes `N(N(u))` from the sender info when
/// present instead of reading it off the topology.
pub fn coverage_sets_from(
    protocol: PruningProtocol,
    t: &Topology,
    sender: Option<SenderInfo<'_>>,
    v: NodeId,
) -> Result<(NodeSet, NodeSet)> {
    if protocol == PruningProtocol::Flood {
        return Err(Error::NoCoverageForFlood);
    }
    t.check_node(v)?;
    let n_v = t.one_hop(v);
    let nn_v = t.two_hop(v);

    let Some(sender) = sender else {
        let candidates = n_v.iter().copied().filter(|&w| w != v).collect();
        let coverage = nn_v.difference(n_v).copied().collect();
        return Ok((candidates, coverage));
    };

    let u = sender.id;
    t.check_node(u)?;
    if !t.are_adjacent(u, v) {
        return Err(Error::NotAdjacent {
            sender: u,
            relay: v,
        });
    }
    let n_u = t.one_hop(u);
    let candidates: NodeSet = n_v.difference(n_u).copied().collect();

    let coverage: NodeSet = match protocol {
        PruningProtocol::Dp => nn_v
            .iter()
            .copied()
            .filter(|w| !n_u.contains(w) && !n_v.contains(w))
            .collect(),
        PruningProtocol::Tdp => {
            let nn_u = sender.two_hop.unwrap_or_else(|| t.two_hop(u));
            nn_v.difference(nn_u).copied().collect()
        }
        PruningProtocol::Pdp => {
            let shared_reach: NodeSet = n_u
                .intersection(n_v)
                .flat_map(|&w| t.one_hop(w).iter().copied())
                .collect();
            nn_v.iter()
                .copied()
                .filter(|w| !n_u.contains(w) && !n_v.contains(w) && !shared_reach.contains(w))
                .collect()
        }
        PruningProtocol::Flood => unreachable!(),
    };
    Ok((candidates, coverage))
}

/// Greedy set cover: repeatedly takes the candidate covering the most still
/// uncovered nodes of `coverage`, smallest id on ties.
pub fn greedy_forward_set(
    candidates: &NodeSet,
    coverage: &NodeSet,
    one_hop: impl Fn(NodeId) -> NodeSet,
) -> ForwardDecision {
    let reach: Vec<(NodeId, NodeSet)> = candidates
        .iter()
        .map(|&b| (b, one_hop(b).intersection(coverage).copied().collect()))
        .collect();
    let coverable: NodeSet = reach.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    let uncovered: NodeSet = coverage.difference(&coverable).copied().collect();

    let mut remaining = coverable;
    let mut forward_list = Vec::new();
    while !remaining.is_empty() {
        let mut best: Option<(NodeId, usize)> = None;
        for (b, r) in &reach {
            let gain = r.intersection(&remaining).count();
            // strict `>` keeps the smallest id among equal gains
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((*b, gain));
            }
        }
        let (chosen, _) = best.expect("coverable nodes always have a candidate");
        let covered = &reach.iter().find(|(b, _)| *b == chosen).unwrap().1;
        remaining.retain(|w| !covered.contains(w));
        forward_list.push(chosen);
    }

    ForwardDecision {
        candidate_set: candidates.clone(),
        coverage_set: coverage.clone(),
        forward_list,
        uncovered,
    }
}

/// Exhaustive minimum cover of the coverable part of `coverage`. Among
/// minimum covers the lexicographically smallest sorted id list wins.
pub fn brute_force_min_forward_set(
    candidates: &NodeSet,
    coverage: &NodeSet,
    one_hop: impl Fn(NodeId) -> NodeSet,
) -> Result<ForwardDecision> {
    if candidates.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManyCandidates {
            limit: BRUTE_FORCE_LIMIT,
            got: candidates.len(),
        });
    }
    let ids: Vec<NodeId> = candidates.iter().copied().collect();
    let reach: Vec<NodeSet> = ids
        .iter()
        .map(|&b| one_hop(b).intersection(coverage).copied().collect())
        .collect();
    let coverable: NodeSet = reach.iter().flat_map(|r| r.iter().copied()).collect();
    let uncovered = coverage.difference(&coverable).copied().collect();

    let mut best: Option<Vec<NodeId>> = None;
    'sizes: for size in 0..=ids.len() {
        // Index combinations in lexicographic order, so the first hit is the
        // lexicographically smallest among this size.
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let mut covered = NodeSet::new();
            for &i in &combo {
                covered.extend(reach[i].iter().copied());
            }
            if covered.len() == coverable.len() {
                best = Some(combo.iter().map(|&i| ids[i]).collect());
                break 'sizes;
            }
            if !next_combination(&mut combo, ids.len()) {
                break;
            }
        }
    }

    Ok(ForwardDecision {
        candidate_set: candidates.clone(),
        coverage_set: coverage.clone(),
        forward_list: best.unwrap_or_default(),
        uncovered,
    })
}

fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Forward decision of `v` for a packet heard from `u` (`None` at the source).
pub fn select_forwarders(
    protocol: PruningProtocol,
    t: &Topology,
    u: Option<NodeId>,
    v: NodeId,
) -> Result<ForwardDecision> {
    select_forwarders_from(protocol, t, u.map(|id| SenderInfo { id, two_hop: None }), v)
}

pub fn select_forwarders_from(
    protocol: PruningProtocol,
    t: &Topology,
    sender: Option<SenderInfo<'_>>,
    v: NodeId,
) -> Result<ForwardDecision> {
    if protocol == PruningProtocol::Flood {
        t.check_node(v)?;
        if let Some(s) = sender {
            t.check_node(s.id)?;
            if !t.are_adjacent(s.id, v) {
                return Err(Error::NotAdjacent {
                    sender: s.id,
                    relay: v,
                });
            }
        }
        let candidate_set: NodeSet = t.adjacent(v).clone();
        return Ok(ForwardDecision {
            forward_list: candidate_set.iter().copied().collect(),
            candidate_set,
            coverage_set: NodeSet::new(),
            uncovered: NodeSet::new(),
        });
    }
    let (candidates, coverage) = coverage_sets_from(protocol, t, sender, v)?;
    Ok(greedy_forward_set(&candidates, &coverage, |b| {
        t.one_hop(b).clone()
    }))
}
