//! Per-switch crossconnect state.
//!
//! A switch forwards a signal arriving on one (feed, wavelength) pair to a
//! set of output ports. Plain switches forward to at most one output;
//! splitter switches may drive several, paying the split in optical power:
//! each of m outputs carries 1/m of the input. Exact rationals keep the
//! accounting lossless however deep the tree gets.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use thiserror::Error;

use crate::topology::NodeDescriptor;

/// Wavelength plane index, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Wavelength(pub u16);

/// Where a forwarded signal enters the switch: a link port, or the local
/// transmitter of the node that originates the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeedPort {
    Local,
    Link(u16),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("port {0} out of range (switch has {1} ports)")]
    PortOutOfRange(u16, u16),
    #[error("branch to port {0} already reserved on this feed")]
    DuplicateBranch(u16),
    #[error("output port {0} already driven on this wavelength by another feed")]
    OutputBusy(u16),
    #[error("plain switch cannot drive a second output")]
    SplitterUnavailable,
    #[error("fanout limit {0} reached")]
    FanoutExceeded(u16),
    #[error("no such branch to release")]
    UnknownBranch,
}

/// Reserved forwarding state of one switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricState {
    port_count: u16,
    is_splitter: bool,
    max_fanout: u16,
    branches: BTreeMap<(FeedPort, Wavelength), BTreeSet<u16>>,
}

impl FabricState {
    pub fn new(desc: &NodeDescriptor) -> FabricState {
        FabricState {
            port_count: desc.port_count,
            is_splitter: desc.is_splitter,
            max_fanout: desc.max_fanout,
            branches: BTreeMap::new(),
        }
    }

    /// Whether one more output could be added to this feed right now.
    pub fn can_add_branch(&self, feed: FeedPort, lambda: Wavelength) -> bool {
        let current = self
            .branches
            .get(&(feed, lambda))
            .map_or(0, |outs| outs.len());
        if current == 0 {
            true
        } else {
            self.is_splitter && current < self.max_fanout as usize
        }
    }

    /// Reserve forwarding from `feed` to `out` on `lambda`.
    pub fn reserve_branch(
        &mut self,
        feed: FeedPort,
        lambda: Wavelength,
        out: u16,
    ) -> Result<(), FabricError> {
        if out >= self.port_count {
            return Err(FabricError::PortOutOfRange(out, self.port_count));
        }
        if let FeedPort::Link(p) = feed {
            if p >= self.port_count {
                return Err(FabricError::PortOutOfRange(p, self.port_count));
            }
        }
        for ((other_feed, other_lambda), outs) in &self.branches {
            if *other_lambda == lambda && outs.contains(&out) {
                return if *other_feed == feed {
                    Err(FabricError::DuplicateBranch(out))
                } else {
                    Err(FabricError::OutputBusy(out))
                };
            }
        }
        let outs = self.branches.entry((feed, lambda)).or_default();
        if !outs.is_empty() {
            if !self.is_splitter {
                return Err(FabricError::SplitterUnavailable);
            }
            if outs.len() >= self.max_fanout as usize {
                return Err(FabricError::FanoutExceeded(self.max_fanout));
            }
        }
        outs.insert(out);
        Ok(())
    }

    pub fn release_branch(
        &mut self,
        feed: FeedPort,
        lambda: Wavelength,
        out: u16,
    ) -> Result<(), FabricError> {
        let outs = self
            .branches
            .get_mut(&(feed, lambda))
            .ok_or(FabricError::UnknownBranch)?;
        if !outs.remove(&out) {
            return Err(FabricError::UnknownBranch);
        }
        if outs.is_empty() {
            self.branches.remove(&(feed, lambda));
        }
        Ok(())
    }

    pub fn outputs(&self, feed: FeedPort, lambda: Wavelength) -> Option<&BTreeSet<u16>> {
        self.branches.get(&(feed, lambda))
    }

    pub fn is_idle(&self) -> bool {
        self.branches.is_empty()
    }

    /// Whether any feed already drives `out` on `lambda`.
    pub fn output_in_use(&self, lambda: Wavelength, out: u16) -> bool {
        self.branches
            .iter()
            .any(|((_, l), outs)| *l == lambda && outs.contains(&out))
    }

    pub fn iter(
        &self,
    ) -> impl Iterator<Item = (&(FeedPort, Wavelength), &BTreeSet<u16>)> {
        self.branches.iter()
    }

    /// Fraction of the feed's input power present on each output of this
    /// feed: 1/m for an m-way split, before any amplification.
    pub fn per_output_power(&self, feed: FeedPort, lambda: Wavelength) -> Option<BigRational> {
        let outs = self.branches.get(&(feed, lambda))?;
        Some(BigRational::new(
            BigInt::from(1),
            BigInt::from(outs.len() as u64),
        ))
    }
}

/// Component counts of a splitter-capable switch built from wavelength
/// planes: light entering on any of P input ports is demultiplexed, each
/// wavelength plane splits every input P ways, gates select which copies
/// survive, switching elements steer them to output ports, and the results
/// are multiplexed back onto P output fibers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SadGeometry {
    pub ports: u16,
    pub planes: u16,
    pub splitters_per_plane: u32,
    pub gates_per_plane: u32,
    pub switching_elements_per_plane: u32,
    pub demultiplexers: u32,
    pub multiplexers: u32,
}

impl SadGeometry {
    pub fn total_splitters(&self) -> u64 {
        self.splitters_per_plane as u64 * self.planes as u64
    }
    pub fn total_gates(&self) -> u64 {
        self.gates_per_plane as u64 * self.planes as u64
    }
    pub fn total_switching_elements(&self) -> u64 {
        self.switching_elements_per_plane as u64 * self.planes as u64
    }
}

/// Closed-form component counts for a P-port, W-wavelength switch: per plane
/// P splitters, P^2 gates and P^2 switching elements; P demultiplexers and P
/// multiplexers shared across the W planes.
pub fn sad_geometry(ports: u16, wavelengths: u16) -> SadGeometry {
    let p = ports as u32;
    SadGeometry {
        ports,
        planes: wavelengths,
        splitters_per_plane: p,
        gates_per_plane: p * p,
        switching_elements_per_plane: p * p,
        demultiplexers: p,
        multiplexers: p,
    }
}
