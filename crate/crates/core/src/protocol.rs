//! Per-switch signaling logic.
//!
//! Every switch runs the same state machine. A branch request travels hop by
//! hop toward its target and reserves switch state as it goes, so when it is
//! absorbed by a switch already carrying the session, the whole chain lights
//! up at once. A switch that cannot take the branch — a plain switch already
//! forwarding, or a splitter out of fanout headroom — starts conflict
//! resolution, whose shape depends on what the switch knows:
//!
//! * With a splitter directory ([`Regime::Knowledge`]) it recruits the
//!   nearest splitter it has not tried yet.
//! * Without one ([`Regime::NoKnowledge`]) it sends a hop-limited probe
//!   toward the source; if the probe dies unanswered it floods the network,
//!   and the first splitter to answer is recruited. A switch that has
//!   already flooded for a joiner and conflicts again gives up.
//!
//! Handlers are synchronous: they mutate only their own switch and return
//! [`Action`]s for the event loop to carry out. All collections are ordered,
//! so identical inputs replay identically.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fabric::{FabricError, FabricState, FeedPort, Wavelength};
use crate::message::{Message, MessageBody, PruneScope, SessionId};
use crate::topology::{NodeId, Topology};

/// What a conflicted switch knows about splitter placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Switches hold a directory of all splitters ranked by distance.
    Knowledge,
    /// Switches know nothing beyond their own links; they probe, then flood.
    NoKnowledge,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "knowledge" => Some(Regime::Knowledge),
            "no-knowledge" => Some(Regime::NoKnowledge),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Knowledge => "knowledge",
            Regime::NoKnowledge => "no-knowledge",
        }
    }
}

/// Why an episode was abandoned. State changes made during a failed episode
/// are rolled back by the event loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FailReason {
    #[error("no splitter could be recruited")]
    NoSplitterReachable,
    #[error("conflict resolution stalled")]
    ResolutionStalled,
    #[error("wavelength unavailable along the path")]
    WavelengthBusy,
    #[error("delivered power would fall below the configured floor")]
    PowerBelowThreshold,
    #[error("episode exceeded the tick budget without settling")]
    NonQuiescent,
}

/// One step of conflict resolution, recorded for later cost attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attempt {
    /// Directory lookup picked this splitter.
    Database { chosen: NodeId },
    ProbeSent,
    /// No probe possible: the conflict sits on the source itself.
    ProbeSkipped,
    ProbeLanded { absorber: NodeId },
    ProbeExpired,
    FloodLaunched,
    FloodWinner { winner: NodeId },
    Stalled,
}

/// Instructions handed back to the event loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Deliver `body` to the adjacent switch `to` next tick.
    Send { to: NodeId, body: MessageBody },
    /// Deliver `body` one hop along the shortest path toward `target`.
    Route { target: NodeId, body: MessageBody },
    /// A branch request ended here; `via` is the neighbor it arrived from,
    /// i.e. the head of the freshly connected chain.
    Absorbed { joiner: NodeId, via: NodeId },
    /// A probe died at this switch; the conflict switch must escalate.
    ProbeExpired { conflict: NodeId, joiner: NodeId },
    /// Flood fan-out begins; the loop arms a give-up deadline.
    FloodLaunched { joiner: NodeId },
    /// A flood answer was accepted; the deadline can be dropped.
    FloodAnswered { joiner: NodeId },
    /// The source began a downward sweep for a leaving member.
    SweepLaunched { member: NodeId },
    /// The sweep's release was confirmed back at the source.
    SweepReleased { member: NodeId },
    /// Classification breadcrumb: what the conflicted switch tried.
    ConflictNoted {
        node: NodeId,
        joiner: NodeId,
        attempt: Attempt,
    },
    Fail { reason: FailReason },
}

/// Read-only context a handler sees: the graph, resolved knobs, and the
/// session the message belongs to.
pub struct Ctx<'a> {
    pub topo: &'a Topology,
    pub regime: Regime,
    /// Hop budget of a probe (total link traversals allowed).
    pub probe_ttl: u32,
    /// Hop budget of each flood copy.
    pub flood_ttl: u32,
    pub session: SessionId,
    pub source: NodeId,
    pub lambda: Wavelength,
}

/// Per-session state a switch holds while it is on (or joining) a tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seat {
    /// Switch the signal comes from; `None` marks the session source.
    pub upstream: Option<NodeId>,
    /// Switches this one forwards the session to.
    pub downstream: BTreeSet<NodeId>,
    pub is_member: bool,
    /// Whether the chain through this switch is anchored to the tree. A
    /// pending seat is reserved plumbing whose head is still negotiating.
    pub committed: bool,
    /// Member only: the signal has actually arrived.
    pub attached: bool,
    /// Joiners to notify (with their conflict switch) once this switch
    /// commits and can grow branches.
    pub pending_redirect: BTreeMap<NodeId, NodeId>,
}

impl Seat {
    fn pending(upstream: NodeId) -> Seat {
        Seat {
            upstream: Some(upstream),
            downstream: BTreeSet::new(),
            is_member: false,
            committed: false,
            attached: false,
            pending_redirect: BTreeMap::new(),
        }
    }

    pub fn feed(&self, topo: &Topology, me: NodeId) -> FeedPort {
        match self.upstream {
            None => FeedPort::Local,
            Some(up) => FeedPort::Link(
                topo.port_toward(me, up)
                    .expect("upstream is always a neighbor"),
            ),
        }
    }
}

/// Episode-scoped conflict bookkeeping of one switch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictBook {
    /// Splitters already recruited per joiner; never re-picked.
    pub tried: BTreeMap<NodeId, BTreeSet<NodeId>>,
    pub probed: BTreeSet<NodeId>,
    pub flooded: BTreeSet<NodeId>,
    /// Joiners whose flood answer has been consumed; later answers drop.
    pub answered: BTreeSet<NodeId>,
    pub seen_floods: BTreeSet<u32>,
}

/// The complete mutable state of one switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeState {
    pub id: NodeId,
    pub fabric: FabricState,
    pub seats: BTreeMap<SessionId, Seat>,
    pub books: BTreeMap<SessionId, ConflictBook>,
}

impl NodeState {
    pub fn new(id: NodeId, topo: &Topology) -> NodeState {
        NodeState {
            id,
            fabric: FabricState::new(topo.descriptor(id)),
            seats: BTreeMap::new(),
            books: BTreeMap::new(),
        }
    }

    pub fn handle(&mut self, ctx: &Ctx, from: NodeId, msg: &Message) -> Vec<Action> {
        match &msg.body {
            MessageBody::Join {
                joiner,
                target,
                avoid,
                lambda,
            } => self.on_join(ctx, from, *joiner, *target, *avoid, *lambda),
            MessageBody::Redirect {
                joiner,
                splitter,
                conflict,
                ..
            } => {
                if self.id == *splitter {
                    self.redirect_landing(ctx, *joiner, *conflict)
                } else {
                    vec![Action::Route {
                        target: *splitter,
                        body: msg.body.clone(),
                    }]
                }
            }
            MessageBody::Rejoin {
                member,
                branch_node,
                conflict,
            } => {
                if self.id == *member {
                    self.on_rejoin(ctx, *branch_node, *conflict)
                } else {
                    vec![Action::Route {
                        target: *member,
                        body: msg.body.clone(),
                    }]
                }
            }
            MessageBody::Probe {
                joiner,
                conflict,
                ttl,
            } => self.on_probe(ctx, *joiner, *conflict, *ttl),
            MessageBody::Flood {
                joiner,
                conflict,
                flood_id,
                ttl,
            } => self.on_flood(ctx, from, *joiner, *conflict, *flood_id, *ttl),
            MessageBody::FloodAck {
                splitter,
                conflict,
                joiner,
                ..
            } => {
                if self.id == *conflict {
                    self.on_flood_ack(ctx, *splitter, *joiner)
                } else {
                    vec![Action::Route {
                        target: *conflict,
                        body: msg.body.clone(),
                    }]
                }
            }
            MessageBody::Prune {
                detach,
                member,
                scope,
            } => self.on_prune(ctx, from, *detach, *member, *scope),
            MessageBody::PruneAck { member } => {
                if self.id == ctx.source {
                    vec![Action::SweepReleased { member: *member }]
                } else {
                    vec![Action::Route {
                        target: ctx.source,
                        body: msg.body.clone(),
                    }]
                }
            }
        }
    }

    /// The event loop calls this when a chain through this switch has
    /// committed and earlier redirects were parked here.
    pub fn on_commit_notify(&mut self, ctx: &Ctx) -> Vec<Action> {
        let Some(seat) = self.seats.get_mut(&ctx.session) else {
            return Vec::new();
        };
        debug_assert!(seat.committed);
        let parked = std::mem::take(&mut seat.pending_redirect);
        parked
            .into_iter()
            .map(|(joiner, conflict)| Action::Route {
                target: joiner,
                body: MessageBody::Rejoin {
                    member: joiner,
                    branch_node: self.id,
                    conflict,
                },
            })
            .collect()
    }

    /// The event loop calls this when a probe launched by this switch died
    /// without finding a splitter: escalate to a flood.
    pub fn on_probe_escalation(&mut self, ctx: &Ctx, joiner: NodeId) -> Vec<Action> {
        let mut actions = vec![Action::ConflictNoted {
            node: self.id,
            joiner,
            attempt: Attempt::ProbeExpired,
        }];
        actions.extend(self.launch_flood(ctx, joiner));
        actions
    }

    // --- join path -------------------------------------------------------

    fn on_join(
        &mut self,
        ctx: &Ctx,
        from: NodeId,
        joiner: NodeId,
        target: NodeId,
        avoid: Option<NodeId>,
        lambda: Wavelength,
    ) -> Vec<Action> {
        match self.seats.get(&ctx.session) {
            Some(seat) if seat.committed => {
                let feed = seat.feed(ctx.topo, self.id);
                if self.fabric.can_add_branch(feed, lambda) {
                    self.accept_branch(ctx, feed, lambda, from, joiner)
                } else {
                    self.resolve_conflict(ctx, joiner, target, avoid)
                }
            }
            // A chain still negotiating cannot take tenants; treat it like
            // any other busy switch.
            Some(_) => self.resolve_conflict(ctx, joiner, target, avoid),
            None => {
                if self.id == target {
                    // Only the session source can be an uninstalled target:
                    // splitters are recruited (and committed) before anyone
                    // is pointed at them.
                    debug_assert_eq!(self.id, ctx.source);
                    let seat = Seat {
                        upstream: None,
                        downstream: BTreeSet::new(),
                        is_member: false,
                        committed: true,
                        attached: false,
                        pending_redirect: BTreeMap::new(),
                    };
                    self.seats.insert(ctx.session, seat);
                    self.accept_branch(ctx, FeedPort::Local, lambda, from, joiner)
                } else {
                    self.install_and_forward(ctx, from, joiner, target, avoid, lambda)
                }
            }
        }
    }

    fn accept_branch(
        &mut self,
        ctx: &Ctx,
        feed: FeedPort,
        lambda: Wavelength,
        toward: NodeId,
        joiner: NodeId,
    ) -> Vec<Action> {
        let out = ctx
            .topo
            .port_toward(self.id, toward)
            .expect("request arrived over a link");
        match self.fabric.reserve_branch(feed, lambda, out) {
            Ok(()) => {}
            Err(FabricError::OutputBusy(_)) => {
                return vec![Action::Fail {
                    reason: FailReason::WavelengthBusy,
                }]
            }
            Err(e) => unreachable!("reservation at an accepting switch: {e}"),
        }
        let seat = self
            .seats
            .get_mut(&ctx.session)
            .expect("accepting switch is seated");
        seat.downstream.insert(toward);
        vec![Action::Absorbed {
            joiner,
            via: toward,
        }]
    }

    fn install_and_forward(
        &mut self,
        ctx: &Ctx,
        from: NodeId,
        joiner: NodeId,
        target: NodeId,
        avoid: Option<NodeId>,
        lambda: Wavelength,
    ) -> Vec<Action> {
        let up = match avoid {
            None => Some(ctx.topo.next_hop(self.id, target)),
            Some(banned) => ctx
                .topo
                .shortest_path_avoiding(self.id, target, banned)
                .map(|p| p[1]),
        };
        // A re-dial that cannot progress around the conflict is a failed
        // recruitment, the same dead end as an empty candidate list.
        let Some(up) = up else {
            return vec![Action::Fail {
                reason: FailReason::NoSplitterReachable,
            }];
        };
        let feed = FeedPort::Link(
            ctx.topo
                .port_toward(self.id, up)
                .expect("next hop is a neighbor"),
        );
        let out = ctx
            .topo
            .port_toward(self.id, from)
            .expect("request arrived over a link");
        match self.fabric.reserve_branch(feed, lambda, out) {
            Ok(()) => {}
            Err(FabricError::OutputBusy(_)) => {
                return vec![Action::Fail {
                    reason: FailReason::WavelengthBusy,
                }]
            }
            Err(e) => unreachable!("install on an unseated switch: {e}"),
        }
        let mut seat = Seat::pending(up);
        seat.downstream.insert(from);
        self.seats.insert(ctx.session, seat);
        vec![Action::Send {
            to: up,
            body: MessageBody::Join {
                joiner,
                target,
                avoid,
                lambda,
            },
        }]
    }

    // --- conflict resolution ---------------------------------------------

    fn resolve_conflict(
        &mut self,
        ctx: &Ctx,
        joiner: NodeId,
        target: NodeId,
        avoid: Option<NodeId>,
    ) -> Vec<Action> {
        match ctx.regime {
            Regime::Knowledge => {
                // The refused request walked here from the joiner, seating
                // every switch on the way; those switches are frozen until
                // the negotiation settles and make useless recruits. The
                // walk is reconstructible from the request fields.
                let walked: BTreeSet<NodeId> = match avoid {
                    None => Some(ctx.topo.shortest_path(joiner, target)),
                    Some(banned) => ctx.topo.shortest_path_avoiding(joiner, target, banned),
                }
                .map(|p| p.into_iter().take_while(|n| *n != self.id).collect())
                .unwrap_or_default();
                let book = self.books.entry(ctx.session).or_default();
                let tried = book.tried.entry(joiner).or_default();
                // Prefer the first splitter on our own path toward the
                // source, as far as a probe could reach: the redirect then
                // retraces exactly the hops a probe would have walked, and
                // both regimes resolve at the same switch for the same
                // price. Only when that stretch is splitterless fall back
                // to the nearest one anywhere.
                let on_path = ctx
                    .topo
                    .shortest_path(self.id, ctx.source)
                    .into_iter()
                    .skip(1)
                    .take(ctx.probe_ttl as usize)
                    .find(|n| {
                        ctx.topo.descriptor(*n).is_splitter
                            && *n != joiner
                            && !walked.contains(n)
                            && !tried.contains(n)
                    });
                let candidate = on_path.or_else(|| {
                    ctx.topo
                        .splitter_ranking(self.id, None)
                        .into_iter()
                        .map(|(n, _)| n)
                        .find(|n| {
                            *n != joiner
                                && *n != self.id
                                && !walked.contains(n)
                                && !tried.contains(n)
                        })
                });
                match candidate {
                    None => vec![Action::Fail {
                        reason: FailReason::NoSplitterReachable,
                    }],
                    Some(chosen) => {
                        tried.insert(chosen);
                        vec![
                            Action::ConflictNoted {
                                node: self.id,
                                joiner,
                                attempt: Attempt::Database { chosen },
                            },
                            Action::Route {
                                target: chosen,
                                body: MessageBody::Redirect {
                                    joiner,
                                    splitter: chosen,
                                    source: ctx.source,
                                    conflict: self.id,
                                },
                            },
                        ]
                    }
                }
            }
            Regime::NoKnowledge => {
                let book = self.books.entry(ctx.session).or_default();
                if !book.probed.contains(&joiner) {
                    book.probed.insert(joiner);
                    if self.id == ctx.source {
                        // A probe would travel toward ourselves; skip
                        // straight to flooding.
                        let mut actions = vec![Action::ConflictNoted {
                            node: self.id,
                            joiner,
                            attempt: Attempt::ProbeSkipped,
                        }];
                        actions.extend(self.launch_flood(ctx, joiner));
                        actions
                    } else {
                        vec![
                            Action::ConflictNoted {
                                node: self.id,
                                joiner,
                                attempt: Attempt::ProbeSent,
                            },
                            Action::Send {
                                to: ctx.topo.next_hop(self.id, ctx.source),
                                body: MessageBody::Probe {
                                    joiner,
                                    conflict: self.id,
                                    ttl: ctx.probe_ttl - 1,
                                },
                            },
                        ]
                    }
                } else if !book.flooded.contains(&joiner) {
                    self.launch_flood(ctx, joiner)
                } else {
                    vec![
                        Action::ConflictNoted {
                            node: self.id,
                            joiner,
                            attempt: Attempt::Stalled,
                        },
                        Action::Fail {
                            reason: FailReason::ResolutionStalled,
                        },
                    ]
                }
            }
        }
    }

    fn launch_flood(&mut self, ctx: &Ctx, joiner: NodeId) -> Vec<Action> {
        let flood_id = (self.id.0 << 16) | (joiner.0 & 0xffff);
        let book = self.books.entry(ctx.session).or_default();
        book.flooded.insert(joiner);
        book.seen_floods.insert(flood_id);
        let mut actions = vec![
            Action::ConflictNoted {
                node: self.id,
                joiner,
                attempt: Attempt::FloodLaunched,
            },
            Action::FloodLaunched { joiner },
        ];
        for &nb in ctx.topo.neighbors(self.id) {
            actions.push(Action::Send {
                to: nb,
                body: MessageBody::Flood {
                    joiner,
                    conflict: self.id,
                    flood_id,
                    ttl: ctx.flood_ttl - 1,
                },
            });
        }
        actions
    }

    /// A recruitment request reached this splitter, by directory redirect,
    /// by probe, or by flood answer.
    fn redirect_landing(&mut self, ctx: &Ctx, joiner: NodeId, conflict: NodeId) -> Vec<Action> {
        if let Some(seat) = self.seats.get_mut(&ctx.session) {
            if seat.committed {
                return vec![Action::Route {
                    target: joiner,
                    body: MessageBody::Rejoin {
                        member: joiner,
                        branch_node: self.id,
                        conflict,
                    },
                }];
            }
            // Mid-negotiation: the seated chain is frozen (loop-freedom
            // forbids acting twice), and it can never commit — its own head
            // was just refused at the conflict switch. Recruitment is out
            // of moves.
            return vec![Action::Fail {
                reason: FailReason::NoSplitterReachable,
            }];
        }
        let up = ctx.topo.next_hop(self.id, ctx.source);
        let mut seat = Seat::pending(up);
        seat.pending_redirect.insert(joiner, conflict);
        self.seats.insert(ctx.session, seat);
        vec![Action::Send {
            to: up,
            body: MessageBody::Join {
                joiner: self.id,
                target: ctx.source,
                avoid: None,
                lambda: ctx.lambda,
            },
        }]
    }

    fn on_rejoin(&mut self, ctx: &Ctx, branch_node: NodeId, conflict: NodeId) -> Vec<Action> {
        let me = self.id;
        match self.seats.get(&ctx.session) {
            Some(seat) if seat.attached => Vec::new(), // stale: already receiving
            Some(seat) if seat.committed => {
                // Another chain committed through us meanwhile; the signal
                // is already here, no new branch needed.
                vec![Action::Absorbed {
                    joiner: me,
                    via: me,
                }]
            }
            Some(seat) => {
                let mut actions = Vec::new();
                if let Some(up) = seat.upstream {
                    actions.push(Action::Send {
                        to: up,
                        body: MessageBody::Prune {
                            detach: me,
                            member: me,
                            scope: PruneScope::Chain,
                        },
                    });
                }
                // The old chain goes, but promises parked here by other
                // joiners ride along: this switch is re-routing, not giving
                // up, and must still answer them once it commits.
                let parked = self
                    .seats
                    .remove(&ctx.session)
                    .expect("seat checked above")
                    .pending_redirect;
                match ctx
                    .topo
                    .shortest_path_avoiding(me, branch_node, conflict)
                    .map(|p| p[1])
                {
                    // The designated branch switch is unreachable around the
                    // conflict: recruitment is out of moves.
                    None => actions.push(Action::Fail {
                        reason: FailReason::NoSplitterReachable,
                    }),
                    Some(nh) => {
                        let mut fresh = Seat::pending(nh);
                        fresh.pending_redirect = parked;
                        self.seats.insert(ctx.session, fresh);
                        actions.push(Action::Send {
                            to: nh,
                            body: MessageBody::Join {
                                joiner: me,
                                target: branch_node,
                                avoid: Some(conflict),
                                lambda: ctx.lambda,
                            },
                        });
                    }
                }
                actions
            }
            None => {
                debug_assert!(false, "rejoin instruction for a switch with no seat");
                Vec::new()
            }
        }
    }

    fn on_probe(&mut self, ctx: &Ctx, joiner: NodeId, conflict: NodeId, ttl: u32) -> Vec<Action> {
        // A splitter frozen mid-negotiation stays quiet and lets the probe
        // walk on, exactly as the directory skips the walked chain.
        let busy = self.seats.get(&ctx.session).is_some_and(|s| !s.committed);
        if ctx.topo.descriptor(self.id).is_splitter && self.id != joiner && !busy {
            let mut actions = vec![Action::ConflictNoted {
                node: conflict,
                joiner,
                attempt: Attempt::ProbeLanded { absorber: self.id },
            }];
            actions.extend(self.redirect_landing(ctx, joiner, conflict));
            actions
        } else if ttl > 0 && self.id != ctx.source {
            vec![Action::Send {
                to: ctx.topo.next_hop(self.id, ctx.source),
                body: MessageBody::Probe {
                    joiner,
                    conflict,
                    ttl: ttl - 1,
                },
            }]
        } else {
            // Budget spent — or the probe reached a splitterless source,
            // beyond which there is nowhere to look.
            vec![Action::ProbeExpired { conflict, joiner }]
        }
    }

    fn on_flood(
        &mut self,
        ctx: &Ctx,
        from: NodeId,
        joiner: NodeId,
        conflict: NodeId,
        flood_id: u32,
        ttl: u32,
    ) -> Vec<Action> {
        let book = self.books.entry(ctx.session).or_default();
        if !book.seen_floods.insert(flood_id) {
            return Vec::new();
        }
        let mut actions = Vec::new();
        // Same silence rule as for probes: mid-negotiation splitters don't
        // answer, so the first ack always names a recruitable switch.
        let busy = self.seats.get(&ctx.session).is_some_and(|s| !s.committed);
        if ctx.topo.descriptor(self.id).is_splitter && self.id != joiner && !busy {
            actions.push(Action::Route {
                target: conflict,
                body: MessageBody::FloodAck {
                    splitter: self.id,
                    conflict,
                    joiner,
                    flood_id,
                },
            });
        }
        if ttl > 0 {
            for &nb in ctx.topo.neighbors(self.id) {
                if nb != from {
                    actions.push(Action::Send {
                        to: nb,
                        body: MessageBody::Flood {
                            joiner,
                            conflict,
                            flood_id,
                            ttl: ttl - 1,
                        },
                    });
                }
            }
        }
        actions
    }

    fn on_flood_ack(&mut self, ctx: &Ctx, splitter: NodeId, joiner: NodeId) -> Vec<Action> {
        let book = self.books.entry(ctx.session).or_default();
        if !book.answered.insert(joiner) {
            return Vec::new(); // a winner was already picked
        }
        book.tried.entry(joiner).or_default().insert(splitter);
        vec![
            Action::ConflictNoted {
                node: self.id,
                joiner,
                attempt: Attempt::FloodWinner { winner: splitter },
            },
            Action::FloodAnswered { joiner },
            Action::Route {
                target: splitter,
                body: MessageBody::Redirect {
                    joiner,
                    splitter,
                    source: ctx.source,
                    conflict: self.id,
                },
            },
        ]
    }

    // --- prune path ------------------------------------------------------

    fn on_prune(
        &mut self,
        ctx: &Ctx,
        from: NodeId,
        detach: NodeId,
        member: NodeId,
        scope: PruneScope,
    ) -> Vec<Action> {
        let me = self.id;
        let release_toward = match (scope, self.seats.get(&ctx.session)) {
            (PruneScope::Chain | PruneScope::Full, Some(seat))
                if detach == from && seat.downstream.contains(&from) =>
            {
                Some(from)
            }
            (PruneScope::Sweep, Some(seat)) if seat.downstream.contains(&member) => Some(member),
            _ => None,
        };

        if let Some(toward) = release_toward {
            let seat = self.seats.get_mut(&ctx.session).expect("matched above");
            let feed = seat.feed(ctx.topo, me);
            let out = ctx
                .topo
                .port_toward(me, toward)
                .expect("downstream is a neighbor");
            self.fabric
                .release_branch(feed, ctx.lambda, out)
                .expect("tree edge has a reservation");
            let seat = self.seats.get_mut(&ctx.session).expect("matched above");
            seat.downstream.remove(&toward);

            let mut actions = Vec::new();
            if scope == PruneScope::Sweep {
                actions.push(Action::Route {
                    target: ctx.source,
                    body: MessageBody::PruneAck { member },
                });
            }
            let seat = self.seats.get(&ctx.session).expect("matched above");
            if !seat.is_member && seat.downstream.is_empty() {
                if let Some(up) = seat.upstream {
                    // Orphaned pass-through: collapse upward.
                    self.seats.remove(&ctx.session);
                    actions.push(Action::Send {
                        to: up,
                        body: MessageBody::Prune {
                            detach: me,
                            member,
                            scope: PruneScope::Chain,
                        },
                    });
                }
            }
            return actions;
        }

        match scope {
            // A chain release that finds no matching state has walked off
            // the end of its chain; drop it.
            PruneScope::Chain => Vec::new(),
            PruneScope::Full => {
                if me == ctx.source {
                    let Some(seat) = self.seats.get(&ctx.session) else {
                        return Vec::new();
                    };
                    let mut actions = vec![Action::SweepLaunched { member }];
                    for &child in &seat.downstream {
                        actions.push(Action::Send {
                            to: child,
                            body: MessageBody::Prune {
                                detach: member,
                                member,
                                scope: PruneScope::Sweep,
                            },
                        });
                    }
                    actions
                } else {
                    vec![Action::Route {
                        target: ctx.source,
                        body: MessageBody::Prune {
                            detach,
                            member,
                            scope,
                        },
                    }]
                }
            }
            PruneScope::Sweep => {
                let Some(seat) = self.seats.get(&ctx.session) else {
                    debug_assert!(false, "sweep escaped the tree");
                    return Vec::new();
                };
                seat.downstream
                    .iter()
                    .map(|&child| Action::Send {
                        to: child,
                        body: MessageBody::Prune {
                            detach: member,
                            member,
                            scope: PruneScope::Sweep,
                        },
                    })
                    .collect()
            }
        }
    }

    // --- episode initiation (called by the event loop, not by messages) ---

    /// Start a membership join at this switch. Returns `Ok(actions)` or the
    /// trivial outcomes: `Err(true)` = already receiving here (no signaling
    /// needed), `Err(false)` cannot happen for joins.
    pub fn initiate_join(&mut self, ctx: &Ctx) -> Result<Vec<Action>, bool> {
        if let Some(seat) = self.seats.get_mut(&ctx.session) {
            assert!(seat.committed, "join initiated while a prior episode is open");
            // The session already flows through this switch: tap it.
            seat.is_member = true;
            seat.attached = true;
            return Err(true);
        }
        let up = ctx.topo.next_hop(self.id, ctx.source);
        self.seats.insert(ctx.session, Seat::pending(up));
        Ok(vec![Action::Send {
            to: up,
            body: MessageBody::Join {
                joiner: self.id,
                target: ctx.source,
                avoid: None,
                lambda: ctx.lambda,
            },
        }])
    }

    /// Start a membership leave at this switch. The member unmarks itself;
    /// if nothing downstream depends on it, it leaves the tree and sends a
    /// release request toward the source.
    pub fn initiate_prune(&mut self, ctx: &Ctx) -> Vec<Action> {
        let seat = self
            .seats
            .get_mut(&ctx.session)
            .expect("prune initiator is seated");
        debug_assert!(seat.is_member && seat.attached);
        seat.is_member = false;
        seat.attached = false;
        if !seat.downstream.is_empty() {
            // Still forwarding to others; membership ends, plumbing stays.
            return Vec::new();
        }
        self.seats.remove(&ctx.session);
        vec![Action::Send {
            to: ctx.topo.next_hop(self.id, ctx.source),
            body: MessageBody::Prune {
                detach: self.id,
                member: self.id,
                scope: PruneScope::Full,
            },
        }]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::NodeDescriptor;

    fn plain(ports: u16) -> NodeDescriptor {
        NodeDescriptor {
            port_count: ports,
            is_splitter: false,
            max_fanout: 1,
            wavelength_conversion: false,
        }
    }

    fn splitter(ports: u16, fanout: u16) -> NodeDescriptor {
        NodeDescriptor {
            port_count: ports,
            is_splitter: true,
            max_fanout: fanout,
            wavelength_conversion: false,
        }
    }

    /// a(0) -- b(1) -- c(2) line with a splitter at a; source is a.
    /// A stub leaf d hangs off a so the splitter has the degree to split.
    fn line() -> Topology {
        Topology::build(
            1,
            None,
            vec![
                ("a".into(), splitter(2, 2)),
                ("b".into(), plain(2)),
                ("c".into(), plain(1)),
                ("d".into(), plain(1)),
            ],
            vec![
                ("a".into(), "b".into()),
                ("b".into(), "c".into()),
                ("a".into(), "d".into()),
            ],
        )
        .unwrap()
    }

    fn ctx<'a>(topo: &'a Topology, regime: Regime, source: NodeId) -> Ctx<'a> {
        Ctx {
            topo,
            regime,
            probe_ttl: 2,
            flood_ttl: topo.diameter(),
            session: SessionId(0),
            source,
            lambda: Wavelength(0),
        }
    }

    #[test]
    fn join_installs_state_along_the_way() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut nc = NodeState::new(c, &topo);
        let actions = nc.initiate_join(&cx).unwrap();
        assert_eq!(
            actions,
            vec![Action::Send {
                to: b,
                body: MessageBody::Join {
                    joiner: c,
                    target: a,
                    avoid: None,
                    lambda: Wavelength(0),
                }
            }]
        );
        // c got a pending seat and no fabric yet.
        let seat = &nc.seats[&SessionId(0)];
        assert!(!seat.committed);
        assert_eq!(seat.upstream, Some(b));
        assert!(nc.fabric.is_idle());

        // Forwarding through b reserves b's pass-through.
        let mut nb = NodeState::new(b, &topo);
        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Join {
                joiner: c,
                target: a,
                avoid: None,
                lambda: Wavelength(0),
            },
            hops: 1,
        };
        let actions = nb.handle(&cx, c, &msg);
        assert!(matches!(&actions[..], [Action::Send { to, .. }] if *to == a));
        assert!(!nb.fabric.is_idle());
        assert_eq!(nb.seats[&SessionId(0)].downstream, BTreeSet::from([c]));

        // The source absorbs and reports the chain head.
        let mut na = NodeState::new(a, &topo);
        let actions = na.handle(&cx, b, &msg);
        assert_eq!(actions, vec![Action::Absorbed { joiner: c, via: b }]);
        let seat = &na.seats[&SessionId(0)];
        assert!(seat.committed);
        assert_eq!(seat.upstream, None);
    }

    #[test]
    fn busy_plain_switch_conflicts_with_directory_iteration() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut nb = NodeState::new(b, &topo);
        // Seat b as committed pass-through feeding c.
        let mut seat = Seat::pending(a);
        seat.committed = true;
        seat.downstream.insert(c);
        nb.seats.insert(SessionId(0), seat);
        nb.fabric
            .reserve_branch(FeedPort::Link(0), Wavelength(0), 1)
            .unwrap();

        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Join {
                joiner: c,
                target: a,
                avoid: None,
                lambda: Wavelength(0),
            },
            hops: 1,
        };
        // Only splitter is a; first conflict picks it.
        let actions = nb.handle(&cx, c, &msg);
        assert!(actions.iter().any(|x| matches!(
            x,
            Action::Route {
                target,
                body: MessageBody::Redirect { splitter, .. }
            } if *target == a && *splitter == a
        )));
        // Second conflict for the same joiner: directory exhausted.
        let actions = nb.handle(&cx, c, &msg);
        assert!(actions.contains(&Action::Fail {
            reason: FailReason::NoSplitterReachable
        }));
    }

    #[test]
    fn no_knowledge_probes_then_floods_then_stalls() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::NoKnowledge, a);
        let mut nb = NodeState::new(b, &topo);
        let mut seat = Seat::pending(a);
        seat.committed = true;
        seat.downstream.insert(c);
        nb.seats.insert(SessionId(0), seat);
        nb.fabric
            .reserve_branch(FeedPort::Link(0), Wavelength(0), 1)
            .unwrap();

        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Join {
                joiner: NodeId(9),
                target: a,
                avoid: None,
                lambda: Wavelength(0),
            },
            hops: 1,
        };
        let actions = nb.handle(&cx, c, &msg);
        assert!(actions.iter().any(|x| matches!(
            x,
            Action::Send {
                to,
                body: MessageBody::Probe { ttl: 1, .. }
            } if *to == a
        )));
        // Second conflict: flood to every neighbor.
        let actions = nb.handle(&cx, c, &msg);
        let flood_sends = actions
            .iter()
            .filter(|x| matches!(x, Action::Send { body: MessageBody::Flood { .. }, .. }))
            .count();
        assert_eq!(flood_sends, 2);
        assert!(actions.contains(&Action::FloodLaunched { joiner: NodeId(9) }));
        // Third: stall.
        let actions = nb.handle(&cx, c, &msg);
        assert!(actions.contains(&Action::Fail {
            reason: FailReason::ResolutionStalled
        }));
    }

    #[test]
    fn probe_expiry_and_flood_dedup() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::NoKnowledge, a);
        // Probe with ttl 0 dies at a plain switch.
        let mut nc = NodeState::new(c, &topo);
        let probe = Message {
            session: SessionId(0),
            body: MessageBody::Probe {
                joiner: NodeId(9),
                conflict: b,
                ttl: 0,
            },
            hops: 1,
        };
        assert_eq!(
            nc.handle(&cx, b, &probe),
            vec![Action::ProbeExpired {
                conflict: b,
                joiner: NodeId(9)
            }]
        );
        // The same flood id is processed once: the first copy is forwarded
        // onward, the repeat is swallowed.
        let flood = Message {
            session: SessionId(0),
            body: MessageBody::Flood {
                joiner: NodeId(9),
                conflict: a,
                flood_id: 7,
                ttl: 1,
            },
            hops: 1,
        };
        let mut nb = NodeState::new(b, &topo);
        let first = nb.handle(&cx, a, &flood);
        assert!(first.iter().any(|x| matches!(
            x,
            Action::Send {
                to,
                body: MessageBody::Flood { ttl: 0, .. }
            } if *to == c
        )));
        assert!(nb.handle(&cx, a, &flood).is_empty());
    }

    #[test]
    fn splitter_absorbs_probe_and_answers_flood() {
        let topo = line();
        let (a, b, _) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::NoKnowledge, a);
        let mut na = NodeState::new(a, &topo);
        // Committed source seat: probe is answered with a rejoin order.
        let mut seat = Seat::pending(b);
        seat.upstream = None;
        seat.committed = true;
        na.seats.insert(SessionId(0), seat);
        let probe = Message {
            session: SessionId(0),
            body: MessageBody::Probe {
                joiner: NodeId(9),
                conflict: b,
                ttl: 0, // absorption is checked before the hop budget
            },
            hops: 1,
        };
        let actions = na.handle(&cx, b, &probe);
        assert!(actions.iter().any(|x| matches!(
            x,
            Action::Route {
                body: MessageBody::Rejoin { branch_node, .. },
                ..
            } if *branch_node == a
        )));
        // Flood at a splitter: ack routed to the conflict switch.
        let flood = Message {
            session: SessionId(0),
            body: MessageBody::Flood {
                joiner: NodeId(9),
                conflict: b,
                flood_id: 3,
                ttl: 0,
            },
            hops: 1,
        };
        let actions = na.handle(&cx, b, &flood);
        assert!(actions.iter().any(|x| matches!(
            x,
            Action::Route {
                target,
                body: MessageBody::FloodAck { splitter, .. }
            } if *target == b && *splitter == a
        )));
    }

    #[test]
    fn first_flood_answer_wins_rest_dropped() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::NoKnowledge, a);
        let mut nb = NodeState::new(b, &topo);
        let ack = |spl: NodeId| Message {
            session: SessionId(0),
            body: MessageBody::FloodAck {
                splitter: spl,
                conflict: b,
                joiner: NodeId(9),
                flood_id: 1,
            },
            hops: 1,
        };
        let first = nb.handle(&cx, a, &ack(a));
        assert!(first.contains(&Action::FloodAnswered { joiner: NodeId(9) }));
        assert!(first.iter().any(|x| matches!(
            x,
            Action::Route { body: MessageBody::Redirect { splitter, .. }, .. } if *splitter == a
        )));
        assert!(nb.handle(&cx, c, &ack(c)).is_empty());
    }

    #[test]
    fn rejoin_tears_down_and_redials_around_conflict() {
        // square a-b-d-c-a, member at d, conflict at b, branch node a.
        let topo = Topology::build(
            1,
            None,
            vec![
                ("a".into(), splitter(2, 2)),
                ("b".into(), plain(2)),
                ("c".into(), plain(2)),
                ("d".into(), plain(2)),
            ],
            vec![
                ("a".into(), "b".into()),
                ("b".into(), "d".into()),
                ("d".into(), "c".into()),
                ("c".into(), "a".into()),
            ],
        )
        .unwrap();
        let (a, b, c, d) = (NodeId(0), NodeId(1), NodeId(2), NodeId(3));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut nd = NodeState::new(d, &topo);
        nd.seats.insert(SessionId(0), Seat::pending(b));
        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Rejoin {
                member: d,
                branch_node: a,
                conflict: b,
            },
            hops: 1,
        };
        let actions = nd.handle(&cx, b, &msg);
        assert_eq!(
            actions,
            vec![
                Action::Send {
                    to: b,
                    body: MessageBody::Prune {
                        detach: d,
                        member: d,
                        scope: PruneScope::Chain,
                    }
                },
                Action::Send {
                    to: c,
                    body: MessageBody::Join {
                        joiner: d,
                        target: a,
                        avoid: Some(b),
                        lambda: Wavelength(0),
                    }
                },
            ]
        );
        // Fresh pending seat pointing around the conflict.
        assert_eq!(nd.seats[&SessionId(0)].upstream, Some(c));
    }

    #[test]
    fn chain_prune_releases_and_collapses() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut nb = NodeState::new(b, &topo);
        let mut seat = Seat::pending(a);
        seat.downstream.insert(c);
        nb.seats.insert(SessionId(0), seat);
        nb.fabric
            .reserve_branch(FeedPort::Link(0), Wavelength(0), 1)
            .unwrap();
        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Prune {
                detach: c,
                member: c,
                scope: PruneScope::Chain,
            },
            hops: 1,
        };
        let actions = nb.handle(&cx, c, &msg);
        // Released, orphaned, collapsed upward.
        assert!(nb.fabric.is_idle());
        assert!(nb.seats.is_empty());
        assert_eq!(
            actions,
            vec![Action::Send {
                to: a,
                body: MessageBody::Prune {
                    detach: b,
                    member: c,
                    scope: PruneScope::Chain,
                }
            }]
        );
        // A chain prune with no matching state dies silently.
        assert!(nb.handle(&cx, c, &msg).is_empty());
    }

    #[test]
    fn full_prune_escalates_to_sweep_at_source() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut na = NodeState::new(a, &topo);
        let mut seat = Seat::pending(b);
        seat.upstream = None;
        seat.committed = true;
        seat.downstream.insert(b);
        na.seats.insert(SessionId(0), seat);
        // Full prune for a member not directly below the source.
        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Prune {
                detach: c,
                member: c,
                scope: PruneScope::Full,
            },
            hops: 2,
        };
        let actions = na.handle(&cx, b, &msg);
        assert_eq!(actions[0], Action::SweepLaunched { member: c });
        assert!(matches!(
            &actions[1],
            Action::Send {
                to,
                body: MessageBody::Prune {
                    scope: PruneScope::Sweep,
                    ..
                }
            } if *to == b
        ));
    }

    #[test]
    fn sweep_releases_acks_and_collapses() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut nb = NodeState::new(b, &topo);
        let mut seat = Seat::pending(a);
        seat.committed = true;
        seat.downstream.insert(c);
        nb.seats.insert(SessionId(0), seat);
        nb.fabric
            .reserve_branch(FeedPort::Link(0), Wavelength(0), 1)
            .unwrap();
        let msg = Message {
            session: SessionId(0),
            body: MessageBody::Prune {
                detach: c,
                member: c,
                scope: PruneScope::Sweep,
            },
            hops: 1,
        };
        let actions = nb.handle(&cx, a, &msg);
        assert!(nb.fabric.is_idle());
        // Ack routed to the source, then the orphaned seat collapses up.
        assert_eq!(
            actions,
            vec![
                Action::Route {
                    target: a,
                    body: MessageBody::PruneAck { member: c }
                },
                Action::Send {
                    to: a,
                    body: MessageBody::Prune {
                        detach: b,
                        member: c,
                        scope: PruneScope::Chain,
                    }
                },
            ]
        );
    }

    #[test]
    fn transit_member_prune_is_silent() {
        let topo = line();
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let cx = ctx(&topo, Regime::Knowledge, a);
        let mut nb = NodeState::new(b, &topo);
        let mut seat = Seat::pending(a);
        seat.committed = true;
        seat.attached = true;
        seat.is_member = true;
        seat.downstream.insert(c);
        nb.seats.insert(SessionId(0), seat);
        assert!(nb.initiate_prune(&cx).is_empty());
        let seat = &nb.seats[&SessionId(0)];
        assert!(!seat.is_member);
        assert_eq!(seat.downstream, BTreeSet::from([c]));
    }
}
