//! Control messages exchanged by switches. Every delivery costs one hop on
//! one link; the ledger and the trace count them uniformly.

use std::fmt;

use crate::fabric::Wavelength;
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// How far a prune travels before giving up on matching state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PruneScope {
    /// Release only along a chain of matching hops; silently discarded on a
    /// miss. Used for tearing down a known partial branch.
    Chain,
    /// Travel toward the source looking for the detaching branch; the source
    /// escalates a miss into a sweep.
    Full,
    /// Downward sweep from the source through the tree, hunting the switch
    /// that feeds the departing member.
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageBody {
    /// Branch request traveling toward `target` (the session source or a
    /// recruiting splitter), reserving switch state as it goes. `avoid`
    /// pins the detour around a switch that already refused the joiner.
    Join {
        joiner: NodeId,
        target: NodeId,
        avoid: Option<NodeId>,
        lambda: Wavelength,
    },
    /// Recruits splitter `splitter` to grow a branch toward `joiner`, after
    /// `conflict` could not extend the tree itself.
    Redirect {
        joiner: NodeId,
        splitter: NodeId,
        source: NodeId,
        conflict: NodeId,
    },
    /// Tells `member` that `branch_node` is on the tree and ready: drop any
    /// partial branch and join again aiming at `branch_node`, steering
    /// around `conflict`.
    Rejoin {
        member: NodeId,
        branch_node: NodeId,
        conflict: NodeId,
    },
    /// Hop-limited search toward the source for any splitter willing to
    /// take over, launched by `conflict` when it has no splitter directory.
    Probe {
        joiner: NodeId,
        conflict: NodeId,
        ttl: u32,
    },
    /// Network-wide splitter search, flooded with a hop limit and a
    /// transmission budget after the probe came back empty.
    Flood {
        joiner: NodeId,
        conflict: NodeId,
        flood_id: u32,
        ttl: u32,
    },
    /// A splitter's answer to a flood, unicast back to the conflict switch.
    FloodAck {
        splitter: NodeId,
        conflict: NodeId,
        joiner: NodeId,
        flood_id: u32,
    },
    /// Asks the switch feeding `detach` to stop; `member` is the leaving
    /// member the release is on behalf of.
    Prune {
        detach: NodeId,
        member: NodeId,
        scope: PruneScope,
    },
    /// Confirms to the source that a sweep found and released the branch.
    PruneAck { member: NodeId },
}

impl MessageBody {
    /// Token used in trace lines.
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::Join { .. } => "join",
            MessageBody::Redirect { .. } => "redirect",
            MessageBody::Rejoin { .. } => "rejoin",
            MessageBody::Probe { .. } => "probe",
            MessageBody::Flood { .. } => "flood",
            MessageBody::FloodAck { .. } => "floodack",
            MessageBody::Prune { .. } => "prune",
            MessageBody::PruneAck { .. } => "pruneack",
        }
    }

    /// Delivery order of distinct kinds arriving at one switch on the same
    /// tick. Releases settle before requests so a teardown and a fresh
    /// branch through the same switch never interleave wrongly; the rest
    /// follows the request/answer chains.
    pub fn rank(&self) -> u8 {
        match self {
            MessageBody::Prune { .. } => 0,
            MessageBody::PruneAck { .. } => 1,
            MessageBody::Join { .. } => 2,
            MessageBody::Redirect { .. } => 3,
            MessageBody::Rejoin { .. } => 4,
            MessageBody::Probe { .. } => 5,
            MessageBody::Flood { .. } => 6,
            MessageBody::FloodAck { .. } => 7,
        }
    }

    pub fn ttl(&self) -> Option<u32> {
        match self {
            MessageBody::Probe { ttl, .. } | MessageBody::Flood { ttl, .. } => Some(*ttl),
            _ => None,
        }
    }

    /// Tie rank among same-kind messages at one switch on one tick; floods'
    /// answers resolve by the answering splitter's id.
    pub fn tie_rank(&self) -> u32 {
        match self {
            MessageBody::FloodAck { splitter, .. } => splitter.0,
            _ => 0,
        }
    }
}

/// A message in flight, annotated with the hops it has traveled so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub session: SessionId,
    pub body: MessageBody,
    pub hops: u32,
}
