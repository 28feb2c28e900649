use thiserror::Error;

use crate::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology parameter: {0}")]
    InvalidParameter(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),

    #[error("unknown node id {node} (topology has {node_count} nodes)")]
    UnknownNode { node: NodeId, node_count: usize },

    #[error("node {sender} is not a neighbour of node {relay}")]
    NotAdjacent { sender: NodeId, relay: NodeId },

    #[error("flooding has no coverage sets")]
    NoCoverageForFlood,

    #[error("exhaustive search limited to {limit} candidates, got {got}")]
    TooManyCandidates { limit: usize, got: usize },

    #[error("cannot encode an empty code set")]
    EmptyCodeSet,

    #[error("packet {0} is not in the packet pool")]
    MissingPacket(crate::PacketId),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("malformed event log, line {line}: {message}")]
    MalformedLog { line: usize, message: String },

    #[error("no connected topology found after {0} attempts")]
    NoConnectedTopology(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
