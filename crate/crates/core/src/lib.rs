//! Construction and maintenance of multicast light-trees in wavelength-routed
//! optical networks where only a subset of switches can split light.
//!
//! The crate has three layers:
//!
//! * [`topology`] / [`generate`] / [`topofile`] — immutable network graphs,
//!   deterministic generators, and a plain-text interchange format.
//! * [`fabric`] / [`tree`] — per-switch crossconnect state and the light-tree
//!   abstraction built on top of it, including exact power accounting.
//! * [`protocol`] / [`engine`] — the join/prune signaling state machines and
//!   the discrete-event loop that drives them one hop per tick.
//!
//! [`eval`] sits on top and runs paired experiments: the same membership
//! scenario replayed against switches that advertise splitter locations and
//! switches that must discover them, plus an exhaustive small-instance tree
//! builder used as a cost floor.
//!
//! Everything is deterministic: a scenario seed fixes the topology, the
//! ordering of every queue is total, and reruns produce byte-identical traces.

pub mod engine;
pub mod eval;
pub mod fabric;
pub mod generate;
pub mod message;
pub mod protocol;
pub mod snapshot;
pub mod topofile;
pub mod topology;
pub mod tree;

pub use engine::{EpisodeOutcome, FailReason, ProtocolConfig, Regime, Sim};
pub use eval::{compare_regimes, run_scenario, sweep, Scenario, SweepConfig};
pub use fabric::{FabricState, FeedPort, SadGeometry, Wavelength};
pub use message::SessionId;
pub use topology::{NodeDescriptor, NodeId, Topology};
pub use tree::LightTree;
