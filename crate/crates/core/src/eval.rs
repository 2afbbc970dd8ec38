//! Paired experiments over the two splitter-location regimes.
//!
//! A [`Scenario`] is a generated network plus an ordered membership script.
//! [`compare_regimes`] replays it three ways — directory regime, discovery
//! regime, and a reference network where every transit switch can split —
//! and classifies each conflict by where it was resolved:
//!
//! * **on-path**: the recruited splitter sat on the conflict-to-source path
//!   within probe reach. Discovery pays one probe where the directory pays
//!   one redirect; totals come out identical.
//! * **off-path**: no splitter within probe reach toward the source, so
//!   discovery had to flood. Same trees, strictly more messages.
//!
//! The comparison renders as a fixed five-row report: the all-splitter
//! reference, then the sparse directory/discovery pair under each condition.
//! A conflict-free run satisfies both conditions vacuously and fills all
//! four sparse rows; a run mixing conditions fills the report under its
//! observed label and lists every conflict's own class.
//!
//! [`sweep`] repeats the comparison over seeded trials and tabulates the
//! mean and spread of each row's cost per network size. Cost throughout is
//! delivered control messages (one hop = one message), never optical state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::engine::{EpisodeOutcome, OutcomeKind, ProtocolConfig, Regime, Sim};
use crate::generate::{Family, GeneratorConfig};
use crate::protocol::Attempt;
use crate::topology::{NodeDescriptor, NodeId, Topology};
use crate::tree::LightTree;

/// One membership motion in a scenario script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Join(NodeId),
    Prune(NodeId),
}

/// Optional protocol-parameter overrides carried by a scenario; `None`
/// keeps the engine's topology-derived default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Knobs {
    pub probe_ttl: Option<u32>,
    pub flood_ttl: Option<u32>,
    pub flood_cap: Option<u32>,
    pub power_floor: Option<BigRational>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: GeneratorConfig,
    pub topo: Topology,
    pub source: NodeId,
    pub steps: Vec<Step>,
    pub knobs: Knobs,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Generate(#[from] crate::generate::GenerateError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        msg: msg.into(),
    }
}

impl Scenario {
    pub fn new(cfg: GeneratorConfig, source: NodeId, steps: Vec<Step>) -> Result<Scenario, ScenarioError> {
        let topo = crate::generate::generate(&cfg)?;
        Ok(Scenario {
            cfg,
            topo,
            source,
            steps,
            knobs: Knobs::default(),
        })
    }

    /// Parses the `.scn` text format: a `[network]` block with generator
    /// parameters, an optional `[protocol]` block with overrides, and an
    /// `[episodes]` block scripting the membership.
    ///
    /// ```text
    /// [network]
    /// family = grid
    /// nodes = 36
    /// fraction = 0.25
    /// fanout-cap = 4
    /// wavelengths = 8
    /// seed = 17
    ///
    /// [protocol]
    /// probe-ttl = 2
    /// power-floor = 1/64
    ///
    /// [episodes]
    /// source = n00
    /// join = n05
    /// join = n21
    /// prune = n05
    /// ```
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        enum Section {
            None,
            Network,
            Protocol,
            Episodes,
        }
        let mut section = Section::None;
        let mut family: Option<Family> = None;
        let mut nodes: Option<u32> = None;
        let mut fraction: Option<f64> = None;
        let mut fanout_cap: Option<u16> = None;
        let mut wavelengths: Option<u16> = None;
        let mut seed: Option<u64> = None;
        let mut knobs = Knobs::default();
        // Names resolve only after the network exists; collect then map.
        let mut source_name: Option<(usize, String)> = None;
        let mut step_names: Vec<(usize, bool, String)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            match body {
                "[network]" => {
                    section = Section::Network;
                    continue;
                }
                "[protocol]" => {
                    section = Section::Protocol;
                    continue;
                }
                "[episodes]" => {
                    section = Section::Episodes;
                    continue;
                }
                other if other.starts_with('[') => {
                    return Err(parse_err(line, format!("unknown section {other}")));
                }
                _ => {}
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| parse_err(line, "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let dup = |what: &str| parse_err(line, format!("{what} set twice"));
            match section {
                Section::None => {
                    return Err(parse_err(line, "content before the first section"));
                }
                Section::Network => match key {
                    "family" => {
                        if family.is_some() {
                            return Err(dup("family"));
                        }
                        family = Some(
                            Family::parse(value)
                                .ok_or_else(|| parse_err(line, format!("unknown family {value:?}")))?,
                        );
                    }
                    "nodes" => {
                        if nodes.is_some() {
                            return Err(dup("nodes"));
                        }
                        nodes = Some(value.parse().map_err(|_| {
                            parse_err(line, format!("bad node count {value:?}"))
                        })?);
                    }
                    "fraction" => {
                        if fraction.is_some() {
                            return Err(dup("fraction"));
                        }
                        fraction = Some(value.parse().map_err(|_| {
                            parse_err(line, format!("bad fraction {value:?}"))
                        })?);
                    }
                    "fanout-cap" => {
                        if fanout_cap.is_some() {
                            return Err(dup("fanout-cap"));
                        }
                        fanout_cap = Some(value.parse().map_err(|_| {
                            parse_err(line, format!("bad fanout cap {value:?}"))
                        })?);
                    }
                    "wavelengths" => {
                        if wavelengths.is_some() {
                            return Err(dup("wavelengths"));
                        }
                        wavelengths = Some(value.parse().map_err(|_| {
                            parse_err(line, format!("bad wavelength count {value:?}"))
                        })?);
                    }
                    "seed" => {
                        if seed.is_some() {
                            return Err(dup("seed"));
                        }
                        seed = Some(value.parse().map_err(|_| {
                            parse_err(line, format!("bad seed {value:?}"))
                        })?);
                    }
                    other => return Err(parse_err(line, format!("unknown key {other:?}"))),
                },
                Section::Protocol => {
                    let parse_u32 = |v: &str| {
                        v.parse::<u32>()
                            .map_err(|_| parse_err(line, format!("bad value {v:?}")))
                    };
                    match key {
                        "probe-ttl" => {
                            if knobs.probe_ttl.is_some() {
                                return Err(dup("probe-ttl"));
                            }
                            knobs.probe_ttl = Some(parse_u32(value)?);
                        }
                        "flood-ttl" => {
                            if knobs.flood_ttl.is_some() {
                                return Err(dup("flood-ttl"));
                            }
                            knobs.flood_ttl = Some(parse_u32(value)?);
                        }
                        "flood-cap" => {
                            if knobs.flood_cap.is_some() {
                                return Err(dup("flood-cap"));
                            }
                            knobs.flood_cap = Some(parse_u32(value)?);
                        }
                        "power-floor" => {
                            if knobs.power_floor.is_some() {
                                return Err(dup("power-floor"));
                            }
                            knobs.power_floor = Some(BigRational::from_str(value).map_err(
                                |_| parse_err(line, format!("bad ratio {value:?}")),
                            )?);
                        }
                        other => return Err(parse_err(line, format!("unknown key {other:?}"))),
                    }
                }
                Section::Episodes => match key {
                    "source" => {
                        if source_name.is_some() {
                            return Err(dup("source"));
                        }
                        source_name = Some((line, value.to_string()));
                    }
                    "join" => step_names.push((line, true, value.to_string())),
                    "prune" => step_names.push((line, false, value.to_string())),
                    other => return Err(parse_err(line, format!("unknown key {other:?}"))),
                },
            }
        }

        let last = text.lines().count();
        let missing = |what| parse_err(last, format!("missing {what}"));
        let cfg = GeneratorConfig {
            family: family.ok_or_else(|| missing("[network] family"))?,
            nodes: nodes.ok_or_else(|| missing("[network] nodes"))?,
            splitter_fraction: fraction.ok_or_else(|| missing("[network] fraction"))?,
            max_fanout: fanout_cap.ok_or_else(|| missing("[network] fanout-cap"))?,
            wavelengths: wavelengths.ok_or_else(|| missing("[network] wavelengths"))?,
            seed: seed.ok_or_else(|| missing("[network] seed"))?,
        };
        let topo = crate::generate::generate(&cfg)?;
        let (src_line, src_name) = source_name.ok_or_else(|| missing("[episodes] source"))?;
        let source = topo
            .lookup(&src_name)
            .ok_or_else(|| parse_err(src_line, format!("unknown switch {src_name:?}")))?;
        let steps = step_names
            .into_iter()
            .map(|(line, is_join, name)| {
                let n = topo
                    .lookup(&name)
                    .ok_or_else(|| parse_err(line, format!("unknown switch {name:?}")))?;
                Ok(if is_join { Step::Join(n) } else { Step::Prune(n) })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        Ok(Scenario {
            cfg,
            topo,
            source,
            steps,
            knobs,
        })
    }

    pub fn save(&self) -> String {
        let mut out = String::new();
        out.push_str("[network]\n");
        out.push_str(&format!("family = {}\n", self.cfg.family.name()));
        out.push_str(&format!("nodes = {}\n", self.cfg.nodes));
        out.push_str(&format!("fraction = {}\n", self.cfg.splitter_fraction));
        out.push_str(&format!("fanout-cap = {}\n", self.cfg.max_fanout));
        out.push_str(&format!("wavelengths = {}\n", self.cfg.wavelengths));
        out.push_str(&format!("seed = {}\n", self.cfg.seed));
        if self.knobs != Knobs::default() {
            out.push_str("\n[protocol]\n");
            if let Some(v) = self.knobs.probe_ttl {
                out.push_str(&format!("probe-ttl = {v}\n"));
            }
            if let Some(v) = self.knobs.flood_ttl {
                out.push_str(&format!("flood-ttl = {v}\n"));
            }
            if let Some(v) = self.knobs.flood_cap {
                out.push_str(&format!("flood-cap = {v}\n"));
            }
            if let Some(v) = &self.knobs.power_floor {
                out.push_str(&format!("power-floor = {v}\n"));
            }
        }
        out.push_str("\n[episodes]\n");
        out.push_str(&format!("source = {}\n", self.topo.name(self.source)));
        for step in &self.steps {
            match step {
                Step::Join(n) => out.push_str(&format!("join = {}\n", self.topo.name(*n))),
                Step::Prune(n) => out.push_str(&format!("prune = {}\n", self.topo.name(*n))),
            }
        }
        out
    }

    /// Engine configuration with this scenario's overrides applied.
    pub fn protocol_config(&self, regime: Regime) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::new(regime);
        cfg.probe_ttl = self.knobs.probe_ttl;
        cfg.flood_ttl = self.knobs.flood_ttl;
        cfg.flood_cap = self.knobs.flood_cap;
        cfg.power_floor = self.knobs.power_floor.clone();
        cfg
    }
}

/// The same network with every transit switch upgraded to a full splitter —
/// the reference point sparse deployments are measured against.
pub fn all_splitters(topo: &Topology) -> Topology {
    let nodes = topo
        .node_ids()
        .map(|n| {
            let d = topo.descriptor(n);
            let degree = topo.degree(n) as u16;
            let desc = if degree >= 2 {
                NodeDescriptor {
                    port_count: d.port_count,
                    is_splitter: true,
                    max_fanout: degree,
                    wavelength_conversion: d.wavelength_conversion,
                }
            } else {
                NodeDescriptor {
                    port_count: d.port_count,
                    is_splitter: false,
                    max_fanout: 1,
                    wavelength_conversion: d.wavelength_conversion,
                }
            };
            (topo.name(n).to_string(), desc)
        })
        .collect();
    let links = topo
        .links()
        .iter()
        .map(|&(a, b)| (topo.name(a).to_string(), topo.name(b).to_string()))
        .collect();
    Topology::build(topo.wavelengths(), topo.seed(), nodes, links)
        .expect("a valid network stays valid with more splitters")
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub regime: Regime,
    pub outcomes: Vec<EpisodeOutcome>,
    pub trace: Vec<String>,
    pub final_edges: BTreeSet<(NodeId, NodeId)>,
}

impl ScenarioRun {
    pub fn all_attached(&self) -> bool {
        self.outcomes.iter().all(|o| o.kind.is_success())
    }

    /// Total signaling spent on successful join episodes.
    pub fn join_cost(&self) -> u64 {
        self.outcomes
            .iter()
            .filter(|o| matches!(o.kind, OutcomeKind::Attached))
            .map(|o| o.cost.total)
            .sum()
    }

    pub fn total_cost(&self) -> u64 {
        self.outcomes.iter().map(|o| o.cost.total).sum()
    }

    /// Stable 64-bit digest of the final tree's edge set.
    pub fn tree_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &(a, b) in &self.final_edges {
            for v in [a.0, b.0] {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn run_on(topo: &Topology, sc: &Scenario, regime: Regime) -> ScenarioRun {
    let mut sim = Sim::new(topo.clone(), sc.protocol_config(regime));
    let sid = sim.add_session(sc.source);
    let outcomes = sc
        .steps
        .iter()
        .map(|step| match *step {
            Step::Join(n) => sim.run_join(sid, n),
            Step::Prune(n) => sim.run_prune(sid, n),
        })
        .collect();
    ScenarioRun {
        regime,
        outcomes,
        final_edges: sim.tree(sid).edges,
        trace: sim.trace().to_vec(),
    }
}

/// Runs the scenario under one regime on its own network.
pub fn run_scenario(sc: &Scenario, regime: Regime) -> ScenarioRun {
    run_on(&sc.topo, sc, regime)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathClass {
    /// Every conflict was resolved by a splitter on its conflict→source
    /// path within probe reach.
    OnPath,
    /// No conflict had such a splitter: the discovery regime flooded.
    OffPath,
    /// No conflicts at all; both conditions hold vacuously.
    NoConflict,
    /// Conflicts of both kinds, or regimes whose conflicts disagreed.
    Mixed,
    /// Some episode did not complete in some run.
    Failed,
}

fn class_word(c: PathClass) -> &'static str {
    match c {
        PathClass::OnPath => "on-path",
        PathClass::OffPath => "off-path",
        PathClass::NoConflict => "no-conflict",
        PathClass::Mixed => "mixed",
        PathClass::Failed => "failed",
    }
}

/// One conflict's own classification, reported even when the scenario as a
/// whole is mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConflictClass {
    pub episode: usize,
    pub node: NodeId,
    pub joiner: NodeId,
    pub class: PathClass,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub knowledge: ScenarioRun,
    pub no_knowledge: ScenarioRun,
    pub all_splitters: ScenarioRun,
    pub class: PathClass,
    pub conflicts: Vec<ConflictClass>,
}

/// First splitter on the path from `conflict` toward `source`, with its hop
/// distance, excluding the conflict switch itself.
fn splitter_toward_source(
    topo: &Topology,
    conflict: NodeId,
    source: NodeId,
) -> Option<(NodeId, u32)> {
    let path = topo.shortest_path(conflict, source);
    path.iter()
        .enumerate()
        .skip(1)
        .find(|&(_, &n)| topo.descriptor(n).is_splitter)
        .map(|(i, &n)| (n, i as u32))
}

fn classify(
    topo: &Topology,
    probe_ttl: u32,
    know: &ScenarioRun,
    blind: &ScenarioRun,
    source: NodeId,
) -> (PathClass, Vec<ConflictClass>) {
    if !know.all_attached() || !blind.all_attached() {
        return (PathClass::Failed, Vec::new());
    }

    // Pair conflicts by (episode, site, joiner); regimes must agree on where
    // trouble happened or no structural claim can be made.
    let sites = |run: &ScenarioRun| -> Vec<(usize, NodeId, NodeId)> {
        run.outcomes
            .iter()
            .enumerate()
            .flat_map(|(i, o)| o.conflicts.iter().map(move |c| (i, c.node, c.joiner)))
            .collect()
    };
    let k_sites = sites(know);
    if k_sites != sites(blind) {
        let records = k_sites
            .into_iter()
            .map(|(episode, node, joiner)| ConflictClass {
                episode,
                node,
                joiner,
                class: PathClass::Mixed,
            })
            .collect();
        return (PathClass::Mixed, records);
    }

    let mut records = Vec::new();
    for (episode, (ko, bo)) in know.outcomes.iter().zip(&blind.outcomes).enumerate() {
        for (kc, bc) in ko.conflicts.iter().zip(&bo.conflicts) {
            let near = splitter_toward_source(topo, kc.node, source)
                .filter(|&(_, d)| d <= probe_ttl)
                .map(|(n, _)| n);
            let k_on = matches!(
                (&kc.attempts[..], near),
                ([Attempt::Database { chosen }], Some(n)) if *chosen == n
            );
            let b_on = matches!(
                (&bc.attempts[..], near),
                (
                    [Attempt::ProbeSent, Attempt::ProbeLanded { absorber }],
                    Some(n)
                ) if *absorber == n
            );
            let k_off = near.is_none()
                && matches!(&kc.attempts[..], [Attempt::Database { .. }]);
            let b_off = near.is_none()
                && matches!(
                    &bc.attempts[..],
                    [
                        Attempt::ProbeSkipped,
                        Attempt::FloodLaunched,
                        Attempt::FloodWinner { .. }
                    ] | [
                        Attempt::ProbeSent,
                        Attempt::ProbeExpired,
                        Attempt::FloodLaunched,
                        Attempt::FloodWinner { .. }
                    ]
                );
            // Both regimes must also land on the same replacement switch,
            // otherwise the continuations are not comparable.
            let same_resolver = match (kc.attempts.last(), bc.attempts.last()) {
                (
                    Some(Attempt::Database { chosen }),
                    Some(Attempt::ProbeLanded { absorber }),
                ) => chosen == absorber,
                (
                    Some(Attempt::Database { chosen }),
                    Some(Attempt::FloodWinner { winner }),
                ) => chosen == winner,
                _ => false,
            };
            let class = if k_on && b_on {
                PathClass::OnPath
            } else if k_off && b_off && same_resolver {
                PathClass::OffPath
            } else {
                PathClass::Mixed
            };
            records.push(ConflictClass {
                episode,
                node: kc.node,
                joiner: kc.joiner,
                class,
            });
        }
    }

    let overall = if records.is_empty() {
        PathClass::NoConflict
    } else if records.iter().all(|r| r.class == PathClass::OnPath) {
        PathClass::OnPath
    } else if records.iter().all(|r| r.class == PathClass::OffPath) {
        PathClass::OffPath
    } else {
        PathClass::Mixed
    };
    (overall, records)
}

/// Replays the scenario under both sparse regimes and against the
/// all-splitter reference network, and classifies the conflicts.
pub fn compare_regimes(sc: &Scenario) -> Comparison {
    let know = run_scenario(sc, Regime::Knowledge);
    let blind = run_scenario(sc, Regime::NoKnowledge);
    let reference = all_splitters(&sc.topo);
    let all = run_on(&reference, sc, Regime::Knowledge);
    let probe_ttl =
        Sim::new(sc.topo.clone(), sc.protocol_config(Regime::NoKnowledge)).probe_ttl();
    let (class, conflicts) = classify(&sc.topo, probe_ttl, &know, &blind, sc.source);
    Comparison {
        knowledge: know,
        no_knowledge: blind,
        all_splitters: all,
        class,
        conflicts,
    }
}

impl Comparison {
    /// Row labels and contents of the five-row report. Rows whose condition
    /// was not observed stay empty; a conflict-free run fills both pairs.
    fn rows(&self) -> [(String, Option<&ScenarioRun>); 5] {
        let (fill_on, fill_off) = match self.class {
            PathClass::OnPath => (true, false),
            PathClass::OffPath => (false, true),
            PathClass::NoConflict => (true, true),
            // Observed condition replaces the bucket label so the numbers
            // are never presented under a claim that did not hold.
            PathClass::Mixed | PathClass::Failed => (true, false),
        };
        let suffix_on = match self.class {
            PathClass::Mixed => "mixed",
            PathClass::Failed => "failed",
            _ => "on-path",
        };
        [
            ("all splitters".to_string(), Some(&self.all_splitters)),
            (
                format!("sparse, directory, {suffix_on}"),
                fill_on.then_some(&self.knowledge),
            ),
            (
                format!("sparse, discovery, {suffix_on}"),
                fill_on.then_some(&self.no_knowledge),
            ),
            (
                "sparse, directory, off-path".to_string(),
                fill_off.then_some(&self.knowledge),
            ),
            (
                "sparse, discovery, off-path".to_string(),
                fill_off.then_some(&self.no_knowledge),
            ),
        ]
    }

    fn scenario_line(sc: &Scenario) -> String {
        format!(
            "{} {} switches, seed {}, source {}, steps {}",
            sc.cfg.family.name(),
            sc.cfg.nodes,
            sc.cfg.seed,
            sc.topo.name(sc.source),
            sc.steps.len(),
        )
    }

    /// Human-oriented aligned report.
    pub fn report(&self, sc: &Scenario) -> String {
        let rows = self.rows();
        let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap().max(6);
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", Self::scenario_line(sc));
        let _ = writeln!(out, "condition: {}", class_word(self.class));
        let _ = writeln!(
            out,
            " #  {:<label_w$}  joins  total  links  tree              outcome",
            "regime"
        );
        for (i, (label, run)) in rows.iter().enumerate() {
            match run {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        " {}  {:<label_w$}  {:>5}  {:>5}  {:>5}  {:016x}  {}",
                        i + 1,
                        label,
                        r.join_cost(),
                        r.total_cost(),
                        r.final_edges.len(),
                        r.tree_hash(),
                        if r.all_attached() { "ok" } else { "failed" },
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        " {}  {:<label_w$}  {:>5}  {:>5}  {:>5}  {:<16}  -",
                        i + 1,
                        label,
                        "-",
                        "-",
                        "-",
                        "-",
                    );
                }
            }
        }
        for c in &self.conflicts {
            let _ = writeln!(
                out,
                "conflict: episode {} at {} (joiner {}): {}",
                c.episode + 1,
                sc.topo.name(c.node),
                sc.topo.name(c.joiner),
                class_word(c.class),
            );
        }
        out
    }

    /// Machine-oriented tab-separated report with the same content.
    pub fn report_tsv(&self, sc: &Scenario) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario\t{}\t{}\t{}\t{}\t{}",
            sc.cfg.family.name(),
            sc.cfg.nodes,
            sc.cfg.seed,
            sc.topo.name(sc.source),
            sc.steps.len(),
        );
        let _ = writeln!(out, "condition\t{}", class_word(self.class));
        for (i, (label, run)) in self.rows().iter().enumerate() {
            match run {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "row\t{}\t{label}\t{}\t{}\t{}\t{:016x}\t{}",
                        i + 1,
                        r.join_cost(),
                        r.total_cost(),
                        r.final_edges.len(),
                        r.tree_hash(),
                        if r.all_attached() { "ok" } else { "failed" },
                    );
                }
                None => {
                    let _ = writeln!(out, "row\t{}\t{label}\t-\t-\t-\t-\t-", i + 1);
                }
            }
        }
        for c in &self.conflicts {
            let _ = writeln!(
                out,
                "conflict\t{}\t{}\t{}\t{}",
                c.episode + 1,
                sc.topo.name(c.node),
                sc.topo.name(c.joiner),
                class_word(c.class),
            );
        }
        out
    }
}

/// Cheapest feasible delivery tree by exhaustive search: fewest links,
/// branching only at splitters within fanout. Node subsets are tried in
/// ascending size, so the first tree found is optimal; ties are broken by
/// deterministic enumeration order. Exponential — keep the network small.
pub fn brute_force_tree(
    topo: &Topology,
    source: NodeId,
    members: &BTreeSet<NodeId>,
) -> Option<LightTree> {
    let required: BTreeSet<NodeId> = members.iter().copied().chain([source]).collect();
    let all: Vec<NodeId> = topo.node_ids().collect();
    let optional: Vec<NodeId> = all.iter().copied().filter(|n| !required.contains(n)).collect();

    for extra in 0..=optional.len() {
        let mut pick = vec![false; optional.len()];
        for slot in pick.iter_mut().take(extra) {
            *slot = true;
        }
        // Iterate |optional| choose `extra` subsets in lexicographic order.
        loop {
            let mut nodes: BTreeSet<NodeId> = required.clone();
            nodes.extend(
                optional
                    .iter()
                    .zip(&pick)
                    .filter(|&(_, &p)| p)
                    .map(|(&n, _)| n),
            );
            if let Some(tree) = spanning_tree_search(topo, source, members, &nodes) {
                return Some(tree);
            }
            if !next_combination(&mut pick) {
                break;
            }
        }
    }
    None
}

/// Advances a combination mask to the next lexicographic arrangement with
/// the same number of set slots; false when exhausted.
fn next_combination(mask: &mut [bool]) -> bool {
    let n = mask.len();
    // Find the rightmost true that can still move right.
    let mut i = n;
    let mut trailing = 0;
    loop {
        if i == 0 {
            return false;
        }
        i -= 1;
        if mask[i] {
            if i + 1 + trailing < n {
                break;
            }
            trailing += 1;
        }
    }
    mask[i] = false;
    let moved = trailing + 1;
    for slot in mask.iter_mut().skip(i + 1) {
        *slot = false;
    }
    for k in 0..moved {
        mask[i + 1 + k] = true;
    }
    true
}

fn spanning_tree_search(
    topo: &Topology,
    source: NodeId,
    members: &BTreeSet<NodeId>,
    nodes: &BTreeSet<NodeId>,
) -> Option<LightTree> {
    let induced: Vec<(NodeId, NodeId)> = topo
        .links()
        .iter()
        .copied()
        .filter(|&(a, b)| nodes.contains(&a) && nodes.contains(&b))
        .collect();
    let want = nodes.len() - 1;
    if induced.len() < want {
        return None;
    }
    let idx: BTreeMap<NodeId, usize> =
        nodes.iter().copied().enumerate().map(|(i, n)| (n, i)).collect();

    let mut mask = vec![false; induced.len()];
    for slot in mask.iter_mut().take(want) {
        *slot = true;
    }
    loop {
        let chosen: Vec<(NodeId, NodeId)> = induced
            .iter()
            .zip(&mask)
            .filter(|&(_, &p)| p)
            .map(|(&e, _)| e)
            .collect();
        if let Some(tree) = try_tree(topo, source, members, nodes, &idx, &chosen) {
            return Some(tree);
        }
        if want == 0 || !next_combination(&mut mask) {
            return None;
        }
    }
}

fn try_tree(
    topo: &Topology,
    source: NodeId,
    members: &BTreeSet<NodeId>,
    nodes: &BTreeSet<NodeId>,
    idx: &BTreeMap<NodeId, usize>,
    chosen: &[(NodeId, NodeId)],
) -> Option<LightTree> {
    // Union-find: |nodes|-1 edges and no cycle means a spanning tree.
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in chosen {
        let (ra, rb) = (find(&mut parent, idx[&a]), find(&mut parent, idx[&b]));
        if ra == rb {
            return None;
        }
        parent[ra] = rb;
    }

    // Orient away from the source and let the structural validator decide
    // whether the branching pattern is feasible.
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(a, b) in chosen {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut tree = LightTree::new(source, crate::fabric::Wavelength(0));
    tree.members = members.clone();
    let mut stack = vec![source];
    let mut seen = BTreeSet::from([source]);
    while let Some(v) = stack.pop() {
        for &w in adj.get(&v).into_iter().flatten() {
            if seen.insert(w) {
                tree.edges.insert((v, w));
                stack.push(w);
            }
        }
    }
    tree.validate(topo).ok().map(|()| tree)
}

// --- sweeps ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub sizes: Vec<u32>,
    pub family: Family,
    pub splitter_fraction: f64,
    pub max_fanout: u16,
    pub wavelengths: u16,
    /// Joining members per trial.
    pub members: usize,
    /// Seeded trials per size; each is binned by its observed condition.
    pub trials: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the process default. The report is identical
    /// either way — parallelism only reorders the work, not the binning.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> SweepConfig {
        SweepConfig {
            sizes: vec![12, 36, 50, 100],
            family: Family::Grid,
            splitter_fraction: 0.25,
            max_fanout: 4,
            wavelengths: 4,
            members: 3,
            trials: 30,
            seed: 1,
            threads: 0,
        }
    }
}

/// Aggregate of one row/size cell: trial count, mean, and spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub n: u64,
    pub mean: f64,
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    n: u64,
    sum: u64,
    min: u64,
    max: u64,
}

impl Acc {
    fn push(&mut self, v: u64) {
        if self.n == 0 {
            (self.min, self.max) = (v, v);
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.n += 1;
        self.sum += v;
    }

    fn cell(&self) -> Option<SweepCell> {
        (self.n > 0).then(|| SweepCell {
            n: self.n,
            mean: self.sum as f64 / self.n as f64,
            min: self.min,
            max: self.max,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: &'static str,
    pub cells: Vec<Option<SweepCell>>,
}

/// How one size's trials classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepCounts {
    pub trials: usize,
    pub no_conflict: usize,
    pub on_path: usize,
    pub off_path: usize,
    pub mixed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub sizes: Vec<u32>,
    pub rows: Vec<SweepRow>,
    pub counts: Vec<SweepCounts>,
}

impl SweepReport {
    /// Human-oriented aligned table; cells show `mean (min-max)`.
    pub fn table(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max("switches".len());
        let cell = |c: &Option<SweepCell>| match c {
            Some(c) => format!("{:.2} ({}-{})", c.mean, c.min, c.max),
            None => "-".to_string(),
        };
        let count_rows: [(&str, Vec<String>); 6] = [
            ("trials", self.counts.iter().map(|c| c.trials.to_string()).collect()),
            ("  no-conflict", self.counts.iter().map(|c| c.no_conflict.to_string()).collect()),
            ("  on-path", self.counts.iter().map(|c| c.on_path.to_string()).collect()),
            ("  off-path", self.counts.iter().map(|c| c.off_path.to_string()).collect()),
            ("  mixed", self.counts.iter().map(|c| c.mixed.to_string()).collect()),
            ("  failed", self.counts.iter().map(|c| c.failed.to_string()).collect()),
        ];
        let mut col_w: Vec<usize> = self.sizes.iter().map(|s| s.to_string().len()).collect();
        for row in &self.rows {
            for (i, c) in row.cells.iter().enumerate() {
                col_w[i] = col_w[i].max(cell(c).len());
            }
        }
        for (_, cells) in &count_rows {
            for (i, v) in cells.iter().enumerate() {
                col_w[i] = col_w[i].max(v.len());
            }
        }

        let mut out = String::new();
        out.push_str(&format!("{:<label_w$}", "switches"));
        for (i, s) in self.sizes.iter().enumerate() {
            out.push_str(&format!("  {:>w$}", s, w = col_w[i]));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<label_w$}", row.label));
            for (i, c) in row.cells.iter().enumerate() {
                out.push_str(&format!("  {:>w$}", cell(c), w = col_w[i]));
            }
            out.push('\n');
        }
        for (label, cells) in &count_rows {
            out.push_str(&format!("{label:<label_w$}"));
            for (i, v) in cells.iter().enumerate() {
                out.push_str(&format!("  {:>w$}", v, w = col_w[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Machine-oriented tab-separated rows, one line per row/size cell.
    pub fn tsv(&self) -> String {
        let mut out = String::from("row\tsize\tn\tmean\tmin\tmax\n");
        for row in &self.rows {
            for (i, c) in row.cells.iter().enumerate() {
                match c {
                    Some(c) => {
                        let _ = writeln!(
                            out,
                            "{}\t{}\t{}\t{:.4}\t{}\t{}",
                            row.label, self.sizes[i], c.n, c.mean, c.min, c.max
                        );
                    }
                    None => {
                        let _ = writeln!(out, "{}\t{}\t0\t-\t-\t-", row.label, self.sizes[i]);
                    }
                }
            }
        }
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "counts\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.sizes[i], c.trials, c.no_conflict, c.on_path, c.off_path, c.mixed, c.failed
            );
        }
        out
    }
}

/// Builds the scenario behind one sweep trial: a fresh network seed plus a
/// seeded draw of source and members. Public so a single trial out of a
/// sweep can be replayed or inspected on its own.
pub fn sweep_trial(cfg: &SweepConfig, size: u32, index: u64) -> Option<Scenario> {
    let mix = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((size as u64) << 24)
        .wrapping_add(index);
    let gen_cfg = GeneratorConfig {
        family: cfg.family,
        nodes: size,
        splitter_fraction: cfg.splitter_fraction,
        max_fanout: cfg.max_fanout,
        wavelengths: cfg.wavelengths,
        seed: mix,
    };
    let topo = crate::generate::generate(&gen_cfg).ok()?;
    let mut rng = ChaCha20Rng::seed_from_u64(mix ^ 0x5ca1_ab1e);
    let mut ids: Vec<NodeId> = topo.node_ids().collect();
    ids.shuffle(&mut rng);
    let source = ids[0];
    let steps = ids[1..=cfg.members.min(ids.len() - 1)]
        .iter()
        .map(|&n| Step::Join(n))
        .collect();
    Some(Scenario {
        cfg: gen_cfg,
        topo,
        source,
        steps,
        knobs: Knobs::default(),
    })
}

struct Trial {
    class: PathClass,
    know: u64,
    blind: u64,
    all: u64,
}

fn evaluate(cfg: &SweepConfig, size: u32, index: u64) -> Option<Trial> {
    let sc = sweep_trial(cfg, size, index)?;
    let cmp = compare_regimes(&sc);
    let class = if cmp.all_splitters.all_attached() {
        cmp.class
    } else {
        PathClass::Failed
    };
    Some(Trial {
        class,
        know: cmp.knowledge.join_cost(),
        blind: cmp.no_knowledge.join_cost(),
        all: cmp.all_splitters.join_cost(),
    })
}

/// Runs `trials` seeded comparisons per size, binning each by its observed
/// condition: conflict-free trials satisfy both conditions and feed all
/// four sparse rows, on-path trials feed the on-path pair, off-path trials
/// the off-path pair; mixed or failed trials are counted but not averaged.
/// Trials evaluate in parallel, but every aggregate is order-independent,
/// so the report is a pure function of the configuration.
pub fn sweep(cfg: &SweepConfig) -> SweepReport {
    let run = || sweep_all_sizes(cfg);
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .expect("thread pool")
            .install(run)
    } else {
        run()
    }
}

fn sweep_all_sizes(cfg: &SweepConfig) -> SweepReport {
    use rayon::prelude::*;

    let mut rows: Vec<(&'static str, Vec<Option<SweepCell>>)> = vec![
        ("all splitters", Vec::new()),
        ("sparse, directory, on-path", Vec::new()),
        ("sparse, discovery, on-path", Vec::new()),
        ("sparse, directory, off-path", Vec::new()),
        ("sparse, discovery, off-path", Vec::new()),
    ];
    let mut counts = Vec::new();

    for &size in &cfg.sizes {
        let trials: Vec<Option<Trial>> = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|i| evaluate(cfg, size, i))
            .collect();

        let mut acc = [Acc::default(); 5];
        let mut count = SweepCounts {
            trials: cfg.trials,
            no_conflict: 0,
            on_path: 0,
            off_path: 0,
            mixed: 0,
            failed: 0,
        };
        for t in trials.iter().flatten() {
            match t.class {
                PathClass::NoConflict => {
                    count.no_conflict += 1;
                    acc[0].push(t.all);
                    acc[1].push(t.know);
                    acc[2].push(t.blind);
                    acc[3].push(t.know);
                    acc[4].push(t.blind);
                }
                PathClass::OnPath => {
                    count.on_path += 1;
                    acc[0].push(t.all);
                    acc[1].push(t.know);
                    acc[2].push(t.blind);
                }
                PathClass::OffPath => {
                    count.off_path += 1;
                    acc[0].push(t.all);
                    acc[3].push(t.know);
                    acc[4].push(t.blind);
                }
                PathClass::Mixed => count.mixed += 1,
                PathClass::Failed => count.failed += 1,
            }
        }
        for (i, a) in acc.iter().enumerate() {
            rows[i].1.push(a.cell());
        }
        counts.push(count);
    }

    SweepReport {
        sizes: cfg.sizes.clone(),
        rows: rows
            .into_iter()
            .map(|(label, cells)| SweepRow { label, cells })
            .collect(),
        counts,
    }
}
