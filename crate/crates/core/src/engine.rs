//! Deterministic discrete-event loop.
//!
//! Time advances in ticks; delivering a message over one link takes exactly
//! one tick. Within a tick, deliveries are ordered by (destination, message
//! kind, answer tie-break, submission order) — releases before requests, so
//! a teardown and a fresh branch crossing the same switch settle in a safe
//! order — and engine bookkeeping (commit notifications, escalations,
//! deadlines) runs after all deliveries of that tick.
//!
//! Membership changes run as serialized *episodes*: one join or leave at a
//! time, driven to quiescence. Node state is snapshotted when an episode
//! starts; a failing episode rolls everything back, leaving only its ledger
//! entries and trace lines as evidence it was attempted.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::BigRational;

use crate::fabric::Wavelength;
use crate::message::{Message, MessageBody, SessionId};
use crate::protocol::{Action, Attempt, Ctx, NodeState, Seat};
use crate::topology::{NodeId, Topology};
use crate::tree::LightTree;

pub use crate::protocol::{FailReason, Regime};

/// Tunables for one simulator instance. `None` picks the topology-derived
/// default listed on each field.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub regime: Regime,
    /// Probe hop budget; default max(1, ceil(diameter / 2)).
    pub probe_ttl: Option<u32>,
    /// Flood hop budget; default diameter.
    pub flood_ttl: Option<u32>,
    /// Cap on total flood transmissions per episode; default 2 * link count.
    pub flood_cap: Option<u32>,
    /// Ticks the source waits for a sweep confirmation; default 4 * diameter.
    pub prune_ack_timeout: Option<u64>,
    /// Reject a join whose delivered power would drop below this.
    pub power_floor: Option<BigRational>,
    /// Per-switch amplification; absent switches have unit gain.
    pub gains: BTreeMap<NodeId, BigRational>,
    /// Hard per-episode tick budget (loop guard).
    pub max_ticks: u64,
}

impl ProtocolConfig {
    pub fn new(regime: Regime) -> ProtocolConfig {
        ProtocolConfig {
            regime,
            probe_ttl: None,
            flood_ttl: None,
            flood_cap: None,
            prune_ack_timeout: None,
            power_floor: None,
            gains: BTreeMap::new(),
            max_ticks: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub source: NodeId,
    /// Chosen when the first branch is requested; cleared if the tree empties.
    pub lambda: Option<Wavelength>,
    pub members: BTreeSet<NodeId>,
}

/// A session as carried by a saved snapshot: membership plus the exact tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoredSession {
    pub source: NodeId,
    pub lambda: Option<Wavelength>,
    pub members: BTreeSet<NodeId>,
    pub edges: BTreeSet<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutcomeKind {
    Attached,
    Pruned {
        /// True when the source gave up waiting and released locally.
        forced: bool,
    },
    Rejected {
        why: &'static str,
    },
    Failed(FailReason),
}

impl OutcomeKind {
    pub fn is_success(&self) -> bool {
        matches!(self, OutcomeKind::Attached | OutcomeKind::Pruned { .. })
    }
}

/// Signaling spent by one episode, by message kind and in total.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cost {
    pub per_kind: BTreeMap<&'static str, u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictRecord {
    pub node: NodeId,
    pub joiner: NodeId,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeOutcome {
    pub session: SessionId,
    pub member: NodeId,
    pub kind: OutcomeKind,
    pub cost: Cost,
    pub conflicts: Vec<ConflictRecord>,
    pub ticks: u64,
}

// Queue key: (tick, class, destination, kind rank, tie rank, submission).
// class 0 = deliveries, class 1 = engine bookkeeping after them.
type EventKey = (u64, u8, u32, u8, u32, u64);

#[derive(Debug, Clone)]
enum Event {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    CommitNotify {
        node: NodeId,
        session: SessionId,
    },
    ProbeEscalation {
        conflict: NodeId,
        joiner: NodeId,
        session: SessionId,
    },
    FloodDeadline {
        conflict: NodeId,
        joiner: NodeId,
    },
    PruneDeadline {
        member: NodeId,
        session: SessionId,
    },
}

struct EpisodeScratch {
    session: SessionId,
    member: NodeId,
    is_join: bool,
    start_tick: u64,
    start_ledger: BTreeMap<&'static str, u64>,
    resolved: bool,
    forced_release: bool,
    failed: Option<FailReason>,
    conflicts: Vec<(NodeId, NodeId, Attempt)>,
    rollback_nodes: Vec<NodeState>,
    rollback_sessions: BTreeMap<SessionId, SessionState>,
    flood_deadlines: BTreeMap<(NodeId, NodeId), EventKey>,
    sweep_deadline: Option<EventKey>,
}

pub struct Sim {
    topo: Topology,
    regime: Regime,
    probe_ttl: u32,
    flood_ttl: u32,
    flood_cap: u32,
    prune_timeout: u64,
    power_floor: Option<BigRational>,
    gains: BTreeMap<NodeId, BigRational>,
    max_ticks: u64,
    nodes: Vec<NodeState>,
    sessions: BTreeMap<SessionId, SessionState>,
    next_session: u32,
    tick: u64,
    seq: u64,
    queue: BTreeMap<EventKey, Event>,
    ledger: BTreeMap<&'static str, u64>,
    trace: Vec<String>,
    flood_budget: u32,
    episode: Option<EpisodeScratch>,
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim")
            .field("nodes", &self.nodes.len())
            .field("sessions", &self.sessions)
            .field("tick", &self.tick)
            .field("delivered", &self.ledger_total())
            .finish_non_exhaustive()
    }
}

impl Sim {
    pub fn new(topo: Topology, cfg: ProtocolConfig) -> Sim {
        let diam = topo.diameter().max(1);
        let nodes = topo.node_ids().map(|n| NodeState::new(n, &topo)).collect();
        Sim {
            regime: cfg.regime,
            probe_ttl: cfg.probe_ttl.unwrap_or(diam.div_ceil(2)).max(1),
            flood_ttl: cfg.flood_ttl.unwrap_or(diam).max(1),
            flood_cap: cfg.flood_cap.unwrap_or(2 * topo.link_count() as u32).max(1),
            prune_timeout: cfg.prune_ack_timeout.unwrap_or(4 * diam as u64).max(4),
            power_floor: cfg.power_floor,
            gains: cfg.gains,
            max_ticks: cfg.max_ticks,
            nodes,
            sessions: BTreeMap::new(),
            next_session: 0,
            tick: 0,
            seq: 0,
            queue: BTreeMap::new(),
            ledger: BTreeMap::new(),
            trace: Vec::new(),
            flood_budget: 0,
            episode: None,
            topo,
        }
    }

    pub fn topo(&self) -> &Topology {
        &self.topo
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn probe_ttl(&self) -> u32 {
        self.probe_ttl
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    pub fn ledger(&self) -> &BTreeMap<&'static str, u64> {
        &self.ledger
    }

    pub fn ledger_total(&self) -> u64 {
        self.ledger.values().sum()
    }

    pub fn sessions(&self) -> &BTreeMap<SessionId, SessionState> {
        &self.sessions
    }

    pub fn node(&self, n: NodeId) -> &NodeState {
        &self.nodes[n.index()]
    }

    /// Rebuilds a simulator around previously saved session trees: switch
    /// seats and fabric reservations are derived from the edges, then the
    /// whole arrangement is cross-validated.
    pub fn restore(
        topo: Topology,
        cfg: ProtocolConfig,
        sessions: BTreeMap<SessionId, RestoredSession>,
    ) -> Result<Sim, String> {
        let mut sim = Sim::new(topo, cfg);
        for (sid, rs) in sessions {
            sim.next_session = sim.next_session.max(sid.0 + 1);
            if rs.edges.is_empty() && !rs.members.is_empty() {
                return Err(format!("{sid}: members without a tree"));
            }
            let lambda = match (rs.lambda, rs.edges.is_empty()) {
                (lam, true) => {
                    if lam.is_some() {
                        return Err(format!("{sid}: wavelength held by an empty tree"));
                    }
                    None
                }
                (None, false) => {
                    return Err(format!("{sid}: tree without a wavelength"));
                }
                (Some(l), false) => {
                    if l.0 >= sim.topo.wavelengths() {
                        return Err(format!("{sid}: wavelength {} out of range", l.0));
                    }
                    Some(l)
                }
            };
            let mut tree = LightTree::new(rs.source, lambda.unwrap_or(Wavelength(0)));
            tree.edges = rs.edges;
            tree.members = rs.members;
            tree.validate(&sim.topo).map_err(|e| format!("{sid}: {e}"))?;
            if let Some(lambda) = lambda {
                for v in tree.nodes() {
                    let feed = match tree.parent(v) {
                        None => crate::fabric::FeedPort::Local,
                        Some(p) => crate::fabric::FeedPort::Link(
                            sim.topo.port_toward(v, p).expect("tree edge is a link"),
                        ),
                    };
                    let node = &mut sim.nodes[v.index()];
                    let children: BTreeSet<NodeId> = tree.children(v).collect();
                    for &c in &children {
                        let out = sim.topo.port_toward(v, c).expect("tree edge is a link");
                        node.fabric
                            .reserve_branch(feed, lambda, out)
                            .map_err(|e| format!("{sid} at {}: {e}", sim.topo.name(v)))?;
                    }
                    node.seats.insert(
                        sid,
                        Seat {
                            upstream: tree.parent(v),
                            downstream: children,
                            is_member: tree.members.contains(&v),
                            committed: true,
                            attached: tree.members.contains(&v),
                            pending_redirect: BTreeMap::new(),
                        },
                    );
                }
            }
            sim.sessions.insert(
                sid,
                SessionState {
                    source: tree.source,
                    lambda,
                    members: tree.members,
                },
            );
        }
        sim.validate_consistency()?;
        Ok(sim)
    }

    pub fn add_session(&mut self, source: NodeId) -> SessionId {
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id,
            SessionState {
                source,
                lambda: None,
                members: BTreeSet::new(),
            },
        );
        id
    }

    /// The session's current delivery tree, rebuilt from committed switch
    /// seats. Pending chains (mid-episode plumbing) are not part of it.
    pub fn tree(&self, session: SessionId) -> LightTree {
        let st = &self.sessions[&session];
        let mut tree = LightTree::new(st.source, st.lambda.unwrap_or(Wavelength(0)));
        tree.members = st.members.clone();
        for node in &self.nodes {
            if let Some(seat) = node.seats.get(&session) {
                if seat.committed {
                    for &d in &seat.downstream {
                        tree.edges.insert((node.id, d));
                    }
                }
            }
        }
        tree
    }

    /// Power delivered to `member` on its session tree.
    pub fn member_power(&self, session: SessionId, member: NodeId) -> Option<BigRational> {
        self.tree(session).leaf_power(&self.gains, member)
    }

    /// Cross-checks every session tree against topology and switch fabric,
    /// and verifies no switch holds fabric state outside some session tree.
    pub fn validate_consistency(&self) -> Result<(), String> {
        let mut fabric_map = BTreeMap::new();
        for node in &self.nodes {
            fabric_map.insert(node.id, node.fabric.clone());
        }
        let mut expected: BTreeSet<(NodeId, crate::fabric::FeedPort, Wavelength, u16)> =
            BTreeSet::new();
        for (&sid, st) in &self.sessions {
            let tree = self.tree(sid);
            tree.validate_with_fabric(&self.topo, &fabric_map)
                .map_err(|e| format!("{sid}: {e}"))?;
            let Some(lambda) = st.lambda else { continue };
            for v in tree.nodes() {
                let feed = if v == tree.source {
                    crate::fabric::FeedPort::Local
                } else {
                    let p = tree.parent(v).expect("rooted tree");
                    crate::fabric::FeedPort::Link(self.topo.port_toward(v, p).unwrap())
                };
                for c in tree.children(v) {
                    expected.insert((v, feed, lambda, self.topo.port_toward(v, c).unwrap()));
                }
            }
        }
        for node in &self.nodes {
            for (&(feed, lambda), outs) in node.fabric.iter() {
                for &out in outs {
                    if !expected.contains(&(node.id, feed, lambda, out)) {
                        return Err(format!(
                            "stray reservation at {}: {:?} lambda {} port {}",
                            self.topo.name(node.id),
                            feed,
                            lambda.0,
                            out
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    // --- episodes ---------------------------------------------------------

    pub fn run_join(&mut self, session: SessionId, member: NodeId) -> EpisodeOutcome {
        let st = self.sessions.get(&session).expect("unknown session");
        let source = st.source;
        if member == source {
            return self.rejected(session, member, "the source cannot join its own session");
        }
        if st.members.contains(&member) {
            return self.rejected(session, member, "already a member");
        }

        self.begin_episode(session, member, true);

        // Pin the session wavelength on first use: first fit over the
        // member's shortest path toward the source.
        if self.sessions[&session].lambda.is_none() {
            match self.first_fit(source, member) {
                Some(w) => self.sessions.get_mut(&session).unwrap().lambda = Some(w),
                None => {
                    self.fail_now(FailReason::WavelengthBusy);
                    return self.finish_episode();
                }
            }
        }

        let ctx = Ctx {
            topo: &self.topo,
            regime: self.regime,
            probe_ttl: self.probe_ttl,
            flood_ttl: self.flood_ttl,
            session,
            source,
            lambda: self.sessions[&session].lambda.unwrap(),
        };
        match self.nodes[member.index()].initiate_join(&ctx) {
            Err(_already) => {
                // The session already flows through this switch.
                self.sessions.get_mut(&session).unwrap().members.insert(member);
                self.episode.as_mut().unwrap().resolved = true;
                self.check_power_floor(session, member);
                self.finish_episode()
            }
            Ok(actions) => {
                self.process_actions(member, 0, actions);
                self.drive();
                self.finish_episode()
            }
        }
    }

    pub fn run_prune(&mut self, session: SessionId, member: NodeId) -> EpisodeOutcome {
        let st = self.sessions.get(&session).expect("unknown session");
        if !st.members.contains(&member) {
            return self.rejected(session, member, "not a member");
        }
        let source = st.source;

        self.begin_episode(session, member, false);
        self.sessions.get_mut(&session).unwrap().members.remove(&member);

        let ctx = Ctx {
            topo: &self.topo,
            regime: self.regime,
            probe_ttl: self.probe_ttl,
            flood_ttl: self.flood_ttl,
            session,
            source,
            lambda: self.sessions[&session].lambda.expect("member implies tree"),
        };
        let actions = self.nodes[member.index()].initiate_prune(&ctx);
        self.process_actions(member, 0, actions);
        self.drive();
        self.finish_episode()
    }

    fn rejected(&self, session: SessionId, member: NodeId, why: &'static str) -> EpisodeOutcome {
        EpisodeOutcome {
            session,
            member,
            kind: OutcomeKind::Rejected { why },
            cost: Cost::default(),
            conflicts: Vec::new(),
            ticks: 0,
        }
    }

    fn begin_episode(&mut self, session: SessionId, member: NodeId, is_join: bool) {
        assert!(self.episode.is_none(), "episodes are serialized");
        assert!(self.queue.is_empty());
        for node in &mut self.nodes {
            node.books.clear();
        }
        self.flood_budget = self.flood_cap;
        self.episode = Some(EpisodeScratch {
            session,
            member,
            is_join,
            start_tick: self.tick,
            start_ledger: self.ledger.clone(),
            resolved: false,
            forced_release: false,
            failed: None,
            conflicts: Vec::new(),
            rollback_nodes: self.nodes.clone(),
            rollback_sessions: self.sessions.clone(),
            flood_deadlines: BTreeMap::new(),
            sweep_deadline: None,
        });
    }

    fn fail_now(&mut self, reason: FailReason) {
        let ep = self.episode.as_mut().expect("episode open");
        if ep.failed.is_none() {
            ep.failed = Some(reason);
        }
    }

    fn drive(&mut self) {
        let start = self.episode.as_ref().unwrap().start_tick;
        loop {
            if self.episode.as_ref().unwrap().failed.is_some() {
                break;
            }
            let Some((&key, _)) = self.queue.iter().next() else {
                break;
            };
            if key.0 - start > self.max_ticks {
                self.fail_now(FailReason::NonQuiescent);
                break;
            }
            let event = self.queue.remove(&key).unwrap();
            self.tick = key.0;
            self.dispatch(event);
        }
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Deliver { from, to, msg } => {
                let kind = msg.body.kind();
                *self.ledger.entry(kind).or_insert(0) += 1;
                let ttl = msg
                    .body
                    .ttl()
                    .map_or_else(|| "-".to_string(), |t| t.to_string());
                // One line per delivered hop: when, what, over which link,
                // for which session, remaining hop budget, causal depth.
                let dest = to;
                self.trace.push(format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    self.tick,
                    kind,
                    self.topo.name(from),
                    self.topo.name(dest),
                    msg.session,
                    ttl,
                    msg.hops
                ));
                let st = &self.sessions[&msg.session];
                let (source, lambda) = (st.source, st.lambda.unwrap_or(Wavelength(0)));
                let ctx = Ctx {
                    topo: &self.topo,
                    regime: self.regime,
                    probe_ttl: self.probe_ttl,
                    flood_ttl: self.flood_ttl,
                    session: msg.session,
                    source,
                    lambda,
                };
                let actions = self.nodes[dest.index()].handle(&ctx, from, &msg);
                self.process_actions(dest, msg.hops, actions);
            }
            Event::CommitNotify { node, session } => {
                let st = &self.sessions[&session];
                let (source, lambda) = (st.source, st.lambda.unwrap_or(Wavelength(0)));
                let ctx = Ctx {
                    topo: &self.topo,
                    regime: self.regime,
                    probe_ttl: self.probe_ttl,
                    flood_ttl: self.flood_ttl,
                    session,
                    source,
                    lambda,
                };
                let actions = self.nodes[node.index()].on_commit_notify(&ctx);
                self.process_actions(node, 0, actions);
            }
            Event::ProbeEscalation {
                conflict,
                joiner,
                session,
            } => {
                if self.episode.as_ref().unwrap().resolved {
                    return;
                }
                let st = &self.sessions[&session];
                let (source, lambda) = (st.source, st.lambda.unwrap_or(Wavelength(0)));
                let ctx = Ctx {
                    topo: &self.topo,
                    regime: self.regime,
                    probe_ttl: self.probe_ttl,
                    flood_ttl: self.flood_ttl,
                    session,
                    source,
                    lambda,
                };
                let actions = self.nodes[conflict.index()].on_probe_escalation(&ctx, joiner);
                self.process_actions(conflict, 0, actions);
            }
            Event::FloodDeadline { conflict, joiner } => {
                let ep = self.episode.as_ref().unwrap();
                if ep.resolved {
                    return;
                }
                let answered = self.nodes[conflict.index()]
                    .books
                    .get(&ep.session)
                    .is_some_and(|b| b.answered.contains(&joiner));
                if !answered {
                    self.fail_now(FailReason::NoSplitterReachable);
                }
            }
            Event::PruneDeadline { member, session } => {
                // Robustness stop-loss: release the source's own branch in
                // the member's direction and stop waiting. Touches only the
                // source so the damage of a lost confirmation is bounded.
                let source = self.sessions[&session].source;
                let lambda = self.sessions[&session].lambda.expect("tree exists");
                let child = self.topo.next_hop(source, member);
                let node = &mut self.nodes[source.index()];
                if let Some(seat) = node.seats.get_mut(&session) {
                    if seat.downstream.contains(&child) {
                        let feed = seat.feed(&self.topo, source);
                        let out = self.topo.port_toward(source, child).unwrap();
                        node.fabric.release_branch(feed, lambda, out).unwrap();
                        node.seats
                            .get_mut(&session)
                            .unwrap()
                            .downstream
                            .remove(&child);
                    }
                }
                let ep = self.episode.as_mut().unwrap();
                ep.forced_release = true;
                ep.resolved = true;
            }
        }
    }

    fn process_actions(&mut self, origin: NodeId, base_hops: u32, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send { to, body } => {
                    self.schedule_delivery(origin, to, body, base_hops);
                }
                Action::Route { target, body } => {
                    let to = self.topo.next_hop(origin, target);
                    self.schedule_delivery(origin, to, body, base_hops);
                }
                Action::Absorbed { joiner, via } => {
                    self.commit_chain(origin, via, joiner);
                }
                Action::ProbeExpired { conflict, joiner } => {
                    let session = self.episode.as_ref().unwrap().session;
                    let key = (self.tick + 1, 1u8, conflict.0, 1u8, 0u32, self.bump_seq());
                    self.queue.insert(
                        key,
                        Event::ProbeEscalation {
                            conflict,
                            joiner,
                            session,
                        },
                    );
                }
                Action::FloodLaunched { joiner } => {
                    let at = self.tick + 2 * self.flood_ttl as u64 + 2;
                    let key = (at, 1u8, origin.0, 2u8, 0u32, self.bump_seq());
                    self.queue.insert(
                        key,
                        Event::FloodDeadline {
                            conflict: origin,
                            joiner,
                        },
                    );
                    self.episode
                        .as_mut()
                        .unwrap()
                        .flood_deadlines
                        .insert((origin, joiner), key);
                }
                Action::FloodAnswered { joiner } => {
                    if let Some(key) = self
                        .episode
                        .as_mut()
                        .unwrap()
                        .flood_deadlines
                        .remove(&(origin, joiner))
                    {
                        self.queue.remove(&key);
                    }
                }
                Action::SweepLaunched { member } => {
                    let session = self.episode.as_ref().unwrap().session;
                    let at = self.tick + self.prune_timeout;
                    let key = (at, 1u8, origin.0, 3u8, 0u32, self.bump_seq());
                    self.queue.insert(key, Event::PruneDeadline { member, session });
                    self.episode.as_mut().unwrap().sweep_deadline = Some(key);
                }
                Action::SweepReleased { .. } => {
                    let ep = self.episode.as_mut().unwrap();
                    ep.resolved = true;
                    if let Some(key) = ep.sweep_deadline.take() {
                        self.queue.remove(&key);
                    }
                }
                Action::ConflictNoted {
                    node,
                    joiner,
                    attempt,
                } => {
                    self.episode
                        .as_mut()
                        .unwrap()
                        .conflicts
                        .push((node, joiner, attempt));
                }
                Action::Fail { reason } => {
                    self.fail_now(reason);
                }
            }
        }
    }

    fn schedule_delivery(&mut self, from: NodeId, to: NodeId, body: MessageBody, base_hops: u32) {
        debug_assert!(self.topo.link_between(from, to).is_some());
        if matches!(body, MessageBody::Flood { .. }) {
            if self.flood_budget == 0 {
                return; // transmission budget exhausted: copy dropped
            }
            self.flood_budget -= 1;
        }
        let session = self.episode.as_ref().unwrap().session;
        let key = (
            self.tick + 1,
            0u8,
            to.0,
            body.rank(),
            body.tie_rank(),
            self.bump_seq(),
        );
        self.queue.insert(
            key,
            Event::Deliver {
                from,
                to,
                msg: Message {
                    session,
                    body,
                    hops: base_hops + 1,
                },
            },
        );
    }

    fn bump_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// A branch request was absorbed: everything from the absorbing switch
    /// back to the chain's head is now carrying light. Mark those seats
    /// committed and wake any parked recruitment answers.
    fn commit_chain(&mut self, _absorber: NodeId, via: NodeId, joiner: NodeId) {
        let (session, member, is_join) = {
            let ep = self.episode.as_ref().unwrap();
            (ep.session, ep.member, ep.is_join)
        };
        let mut cur = via;
        loop {
            let (next, notify) = {
                let seat = self.nodes[cur.index()]
                    .seats
                    .get_mut(&session)
                    .expect("chain switches are seated");
                let notify = !seat.committed && !seat.pending_redirect.is_empty();
                seat.committed = true;
                if cur == joiner {
                    (None, notify)
                } else {
                    debug_assert_eq!(seat.downstream.len(), 1, "pending chains are linear");
                    (seat.downstream.iter().next().copied(), notify)
                }
            };
            if notify {
                let key = (self.tick + 1, 1u8, cur.0, 0u8, 0u32, self.bump_seq());
                self.queue
                    .insert(key, Event::CommitNotify { node: cur, session });
            }
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        if is_join && joiner == member {
            let seat = self.nodes[member.index()]
                .seats
                .get_mut(&session)
                .expect("member is seated");
            seat.is_member = true;
            seat.attached = true;
            self.sessions.get_mut(&session).unwrap().members.insert(member);
            self.episode.as_mut().unwrap().resolved = true;
            self.check_power_floor(session, member);
        }
    }

    fn check_power_floor(&mut self, session: SessionId, member: NodeId) {
        let Some(floor) = self.power_floor.clone() else {
            return;
        };
        let power = self
            .member_power(session, member)
            .expect("attached member is on the tree");
        if power < floor {
            self.fail_now(FailReason::PowerBelowThreshold);
        }
    }

    /// First wavelength free along the route the opening branch request
    /// will take (member toward source; light flows the reverse). Later
    /// branches must reuse it; the session is single-wavelength end to end.
    fn first_fit(&self, source: NodeId, member: NodeId) -> Option<Wavelength> {
        let path = self.topo.shortest_path(member, source);
        (0..self.topo.wavelengths()).map(Wavelength).find(|&w| {
            path.windows(2).all(|hop| {
                // hop[1] is upstream here: its output toward hop[0] carries.
                let port = self.topo.port_toward(hop[1], hop[0]).unwrap();
                !self.nodes[hop[1].index()].fabric.output_in_use(w, port)
            })
        })
    }

    fn finish_episode(&mut self) -> EpisodeOutcome {
        let ep = self.episode.take().expect("episode open");
        let mut failed = ep.failed;
        if ep.is_join && failed.is_none() && !ep.resolved {
            // Quiescent but the member never attached: the resolution
            // machinery ran out of moves.
            failed = Some(FailReason::ResolutionStalled);
        }

        self.queue.clear();

        let cost = {
            let mut per_kind = BTreeMap::new();
            let mut total = 0;
            for (&kind, &count) in &self.ledger {
                let delta = count - ep.start_ledger.get(kind).copied().unwrap_or(0);
                if delta > 0 {
                    per_kind.insert(kind, delta);
                }
                total += delta;
            }
            Cost { per_kind, total }
        };

        let kind = if let Some(reason) = failed {
            self.nodes = ep.rollback_nodes;
            self.sessions = ep.rollback_sessions;
            OutcomeKind::Failed(reason)
        } else if ep.is_join {
            OutcomeKind::Attached
        } else {
            // Tree emptied entirely: retire the source seat and free the
            // wavelength for a future incarnation of the session.
            let st = self.sessions.get_mut(&ep.session).unwrap();
            if st.members.is_empty() {
                let src = self.nodes[st.source.index()]
                    .seats
                    .get(&ep.session)
                    .map_or(false, |s| s.downstream.is_empty());
                if src {
                    self.nodes[st.source.index()].seats.remove(&ep.session);
                    st.lambda = None;
                }
            }
            OutcomeKind::Pruned {
                forced: ep.forced_release,
            }
        };

        // Group the flat attempt list by conflict site, preserving order.
        let mut conflicts: Vec<ConflictRecord> = Vec::new();
        for (node, joiner, attempt) in ep.conflicts {
            match conflicts
                .iter_mut()
                .find(|c| c.node == node && c.joiner == joiner)
            {
                Some(rec) => rec.attempts.push(attempt),
                None => conflicts.push(ConflictRecord {
                    node,
                    joiner,
                    attempts: vec![attempt],
                }),
            }
        }

        EpisodeOutcome {
            session: ep.session,
            member: ep.member,
            kind,
            cost,
            conflicts,
            ticks: self.tick.saturating_sub(ep.start_tick),
        }
    }
}
