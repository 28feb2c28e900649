//! Static network topologies and neighbourhood queries.
//!
//! Neighbourhoods are closed: `N(v)` contains `v` itself, and the 2-hop set
//! `N(N(v))` is the union of `N(w)` over every `w ∈ N(v)`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, NodeId, Result};

pub type NodeSet = BTreeSet<NodeId>;

/// Undirected, irreflexive graph with optional planar node positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    positions: Option<Vec<(f64, f64)>>,
    radio_range: Option<f64>,
    adjacency: Vec<NodeSet>,
    one_hop: Vec<NodeSet>,
    two_hop: Vec<NodeSet>,
}

/// Closed 1-hop and 2-hop neighbourhoods of a single node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborView {
    pub owner: NodeId,
    pub one_hop: NodeSet,
    pub two_hop: NodeSet,
}

impl Topology {
    /// Builds a topology from an explicit edge list. Duplicate edges (in either
    /// orientation) collapse; self-loops are rejected.
    pub fn from_edges(node_count: usize, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidParameter(
                "node count must be positive".into(),
            ));
        }
        let mut adjacency = vec![NodeSet::new(); node_count];
        for &(a, b) in edges {
            for node in [a, b] {
                if node >= node_count {
                    return Err(Error::UnknownNode { node, node_count });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            adjacency[a].insert(b);
            adjacency[b].insert(a);
        }
        Ok(Self::from_adjacency(adjacency, None, None))
    }

    /// Unit-disk graph: an edge joins every pair at euclidean distance `<= radio_range`.
    pub fn from_positions(positions: Vec<(f64, f64)>, radio_range: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidParameter(
                "node count must be positive".into(),
            ));
        }
        if radio_range.is_nan() || radio_range <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "radio range must be positive, got {radio_range}"
            )));
        }
        let adjacency = unit_disk_adjacency(&positions, radio_range);
        Ok(Self::from_adjacency(
            adjacency,
            Some(positions),
            Some(radio_range),
        ))
    }

    fn from_adjacency(
        adjacency: Vec<NodeSet>,
        positions: Option<Vec<(f64, f64)>>,
        radio_range: Option<f64>,
    ) -> Self {
        let one_hop: Vec<NodeSet> = adjacency
            .iter()
            .enumerate()
            .map(|(v, adj)| {
                let mut closed = adj.clone();
                closed.insert(v);
                closed
            })
            .collect();
        let two_hop = one_hop
            .iter()
            .map(|n1| {
                n1.iter()
                    .flat_map(|&w| one_hop[w].iter().copied())
                    .collect()
            })
            .collect();
        Self {
            positions,
            radio_range,
            adjacency,
            one_hop,
            two_hop,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn positions(&self) -> Option<&[(f64, f64)]> {
        self.positions.as_deref()
    }

    pub fn radio_range(&self) -> Option<f64> {
        self.radio_range
    }

    /// Open neighbourhood (excludes `v`).
    pub fn adjacent(&self, v: NodeId) -> &NodeSet {
        &self.adjacency[v]
    }

    pub fn are_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency.get(a).is_some_and(|adj| adj.contains(&b))
    }

    /// Closed neighbourhood `N(v)`. Panics on an unknown id; use
    /// [`neighbor_view`] for checked access.
    pub fn one_hop(&self, v: NodeId) -> &NodeSet {
        &self.one_hop[v]
    }

    /// `N(N(v))`.
    pub fn two_hop(&self, v: NodeId) -> &NodeSet {
        &self.two_hop[v]
    }

    pub fn check_node(&self, node: NodeId) -> Result<()> {
        if node < self.node_count() {
            Ok(())
        } else {
            Err(Error::UnknownNode {
                node,
                node_count: self.node_count(),
            })
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, adj)| adj.range(a + 1..).map(move |&b| (a, b)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(NodeSet::len).sum::<usize>() / 2
    }

    /// Serialises to the edge-list text format accepted by [`load_topology`].
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {}", self.node_count());
        if let Some(range) = self.radio_range {
            let _ = writeln!(out, "range {range}");
        }
        if let Some(positions) = &self.positions {
            for (v, (x, y)) in positions.iter().enumerate() {
                let _ = writeln!(out, "pos {v} {x} {y}");
            }
        }
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }
}

fn unit_disk_adjacency(positions: &[(f64, f64)], radio_range: f64) -> Vec<NodeSet> {
    let n = positions.len();
    let mut adjacency = vec![NodeSet::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            let (dx, dy) = (
                positions[a].0 - positions[b].0,
                positions[a].1 - positions[b].1,
            );
            if (dx * dx + dy * dy).sqrt() <= radio_range {
                adjacency[a].insert(b);
                adjacency[b].insert(a);
            }
        }
    }
    adjacency
}

/// Places `n` nodes uniformly in `[0, area]²` and connects pairs within `radio_range`.
pub fn generate_random_topology(
    n: usize,
    area: f64,
    radio_range: f64,
    seed: u64,
) -> Result<Topology> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "node count must be positive".into(),
        ));
    }
    if area.is_nan() || area <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "area must be positive, got {area}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n)
        .map(|_| (rng.gen_range(0.0..=area), rng.gen_range(0.0..=area)))
        .collect();
    Topology::from_positions(positions, radio_range)
}

/// Seed actually used for the `attempt`-th draw in [`find_connected_topology`].
pub fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    seed.wrapping_add(u64::from(attempt).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Redraws [`generate_random_topology`] with derived seeds until the result is
/// connected. Attempt 0 uses `seed` unchanged.
pub fn find_connected_topology(
    n: usize,
    area: f64,
    radio_range: f64,
    seed: u64,
    max_attempts: u32,
) -> Result<Topology> {
    for attempt in 0..max_attempts {
        let t = generate_random_topology(n, area, radio_range, attempt_seed(seed, attempt))?;
        if is_connected(&t) {
            return Ok(t);
        }
    }
    Err(Error::NoConnectedTopology(max_attempts))
}

/// Parses the edge-list format: an optional leading `nodes <n>` line, `a b`
/// edge lines, optional `pos <v> <x> <y>` and `range <r>` lines. `#` starts a
/// comment. Without a `nodes` line the count is one past the largest id seen.
pub fn load_topology(text: &str) -> Result<Topology> {
    let mut declared: Option<usize> = None;
    let mut range: Option<f64> = None;
    let mut edges = Vec::new();
    let mut positions: Vec<(NodeId, f64, f64, usize)> = Vec::new();
    let mut seen_content = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        match fields[0] {
            "nodes" => {
                if seen_content {
                    return Err(err("`nodes` must be the first directive".into()));
                }
                if fields.len() != 2 {
                    return Err(err("expected `nodes <n>`".into()));
                }
                let n = parse_field::<usize>(fields[1], line_no)?;
                if n == 0 {
                    return Err(err("node count must be positive".into()));
                }
                declared = Some(n);
            }
            "range" => {
                if fields.len() != 2 {
                    return Err(err("expected `range <r>`".into()));
                }
                let r = parse_field::<f64>(fields[1], line_no)?;
                if r.is_nan() || r <= 0.0 {
                    return Err(err("radio range must be positive".into()));
                }
                range = Some(r);
            }
            "pos" => {
                if fields.len() != 4 {
                    return Err(err("expected `pos <v> <x> <y>`".into()));
                }
                positions.push((
                    parse_field(fields[1], line_no)?,
                    parse_field(fields[2], line_no)?,
                    parse_field(fields[3], line_no)?,
                    line_no,
                ));
            }
            _ => {
                if fields.len() != 2 {
                    return Err(err(format!("expected an `a b` edge, got `{line}`")));
                }
                let a: NodeId = parse_field(fields[0], line_no)?;
                let b: NodeId = parse_field(fields[1], line_no)?;
                if a == b {
                    return Err(err(format!("self-loop on node {a}")));
                }
                edges.push((a, b, line_no));
            }
        }
        seen_content = true;
    }

    let max_id = edges
        .iter()
        .flat_map(|&(a, b, _)| [a, b])
        .chain(positions.iter().map(|p| p.0))
        .max();
    let node_count = match (declared, max_id) {
        (Some(n), _) => n,
        (None, Some(m)) => m + 1,
        (None, None) => {
            return Err(Error::Parse {
                line: 1,
                message: "empty document without a `nodes` line".into(),
            })
        }
    };
    for &(a, b, line) in &edges {
        if a.max(b) >= node_count {
            return Err(Error::Parse {
                line,
                message: format!("node id {} out of range 0..{node_count}", a.max(b)),
            });
        }
    }

    let coords = if positions.is_empty() {
        None
    } else {
        let mut coords = vec![None; node_count];
        for &(v, x, y, line) in &positions {
            if v >= node_count {
                return Err(Error::Parse {
                    line,
                    message: format!("node id {v} out of range 0..{node_count}"),
                });
            }
            coords[v] = Some((x, y));
        }
        // Partial position data carries no geometric meaning.
        coords.into_iter().collect::<Option<Vec<_>>>()
    };

    let mut adjacency = vec![NodeSet::new(); node_count];
    for (a, b, _) in edges {
        adjacency[a].insert(b);
        adjacency[b].insert(a);
    }
    let range = coords.as_ref().and(range);
    Ok(Topology::from_adjacency(adjacency, coords, range))
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{field}`"),
    })
}

/// Checked neighbourhood lookup.
pub fn neighbor_view(t: &Topology, v: NodeId) -> Result<NeighborView> {
    t.check_node(v)?;
    Ok(NeighborView {
        owner: v,
        one_hop: t.one_hop(v).clone(),
        two_hop: t.two_hop(v).clone(),
    })
}

/// True iff a breadth-first traversal from node 0 reaches every node.
pub fn is_connected(t: &Topology) -> bool {
    let n = t.node_count();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(v) = queue.pop_front() {
        for &w in t.adjacent(v) {
            if !seen[w] {
                seen[w] = true;
                reached += 1;
                queue.push_back(w);
            }
        }
    }
    reached == n
}

/// Recomputes unit-disk adjacency from stored positions and compares it with
/// the stored edges. `None` when the topology carries no geometry.
pub fn unit_disk_consistent(t: &Topology) -> Option<bool> {
    let positions = t.positions()?;
    let range = t.radio_range()?;
    Some(unit_disk_adjacency(positions, range) == t.adjacency)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Topology {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Topology::from_edges(n, &edges).unwrap()
    }

    fn complete(n: usize) -> Topology {
        let edges: Vec<_> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        Topology::from_edges(n, &edges).unwrap()
    }

    fn set(ids: &[NodeId]) -> NodeSet {
        ids.iter().copied().collect()
    }

    #[test]
    fn single_node_has_no_edges() {
        let t = generate_random_topology(1, 50.0, 10.0, 7).unwrap();
        assert_eq!(t.node_count(), 1);
        assert_eq!(t.edge_count(), 0);
    }

    #[test]
    fn range_dominating_area_gives_an_edge() {
        let t = generate_random_topology(2, 10.0, 20.0, 1).unwrap();
        assert!(t.are_adjacent(0, 1));
        assert_eq!(t.edge_count(), 1);
    }

    #[test]
    fn rejects_bad_generator_parameters() {
        assert!(generate_random_topology(0, 10.0, 1.0, 0).is_err());
        assert!(generate_random_topology(3, 0.0, 1.0, 0).is_err());
        assert!(generate_random_topology(3, 10.0, -1.0, 0).is_err());
        assert!(generate_random_topology(3, f64::NAN, 1.0, 0).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_random_topology(30, 100.0, 25.0, 99).unwrap();
        let b = generate_random_topology(30, 100.0, 25.0, 99).unwrap();
        let c = generate_random_topology(30, 100.0, 25.0, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(unit_disk_consistent(&a), Some(true));
    }

    #[test]
    fn loads_path_without_header() {
        let t = load_topology("0 1\n1 2").unwrap();
        assert_eq!(t, path(3));
    }

    #[test]
    fn loads_isolated_nodes() {
        let t = load_topology("nodes 3\n").unwrap();
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.edge_count(), 0);
    }

    #[test]
    fn load_rejects_self_loop_with_line_number() {
        match load_topology("nodes 2\n0 1\n0 0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_collapses_duplicate_edges_and_skips_comments() {
        let t = load_topology("# demo\nnodes 3\n0 1 # first\n1 0\n1 2\n").unwrap();
        assert_eq!(t.edge_count(), 2);
        assert!(load_topology("nodes 2\n0 5").is_err());
        assert!(load_topology("nodes 2\n0 x").is_err());
        assert!(load_topology("0 1\nnodes 2").is_err());
    }

    #[test]
    fn edge_list_round_trips_with_positions() {
        let t = generate_random_topology(12, 60.0, 25.0, 3).unwrap();
        let back = load_topology(&t.to_edge_list()).unwrap();
        assert_eq!(
            back.edges().collect::<Vec<_>>(),
            t.edges().collect::<Vec<_>>()
        );
        assert_eq!(back.positions(), t.positions());
        assert_eq!(unit_disk_consistent(&back), Some(true));
    }

    #[test]
    fn complete_graph_views() {
        let v = neighbor_view(&complete(4), 0).unwrap();
        assert_eq!(v.one_hop, set(&[0, 1, 2, 3]));
        assert_eq!(v.two_hop, set(&[0, 1, 2, 3]));
    }

    #[test]
    fn path_views() {
        let v = neighbor_view(&path(5), 2).unwrap();
        assert_eq!(v.one_hop, set(&[1, 2, 3]));
        assert_eq!(v.two_hop, set(&[0, 1, 2, 3, 4]));
    }

    #[test]
    fn isolated_view_and_unknown_node() {
        let t = Topology::from_edges(3, &[(0, 1)]).unwrap();
        let v = neighbor_view(&t, 2).unwrap();
        assert_eq!(v.one_hop, set(&[2]));
        assert_eq!(v.two_hop, set(&[2]));
        assert!(matches!(
            neighbor_view(&t, 3),
            Err(Error::UnknownNode { .. })
        ));
    }

    #[test]
    fn connectivity() {
        assert!(is_connected(&path(6)));
        assert!(!is_connected(
            &Topology::from_edges(4, &[(0, 1), (2, 3)]).unwrap()
        ));
        assert!(is_connected(&complete(40)));
    }

    #[test]
    fn connected_search_finds_a_graph() {
        let t = find_connected_topology(40, 100.0, 25.0, 1, 1000).unwrap();
        assert!(is_connected(&t));
    }
}
