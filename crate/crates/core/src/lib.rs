//! Deterministic broadcast simulation for static ad-hoc wireless networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`topology`]: unit-disk topologies and closed 1-hop / 2-hop neighbourhoods.
//! - [`pruning`]: forward-node selection for flooding, dominant pruning (DP),
//!   total dominant pruning (TDP) and partial dominant pruning (PDP).
//! - [`coding`]: opportunistic XOR coding state kept by every node.
//! - [`engine`]: the tick-driven broadcast simulator that ties the two together.
//! - [`metrics`]: transmission counts, coding gain and run aggregation.
//! - [`cli`]: batch configuration and report emission for the `manet-nc` binary.

pub mod cli;
pub mod coding;
pub mod engine;
pub mod metrics;
pub mod pruning;
pub mod topology;

mod error;

pub use error::{Error, Result};

/// Dense node identifier, `0..node_count`.
pub type NodeId = usize;

/// Globally unique identifier of a native packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PacketId(pub u32);

impl std::fmt::Display for PacketId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
