//! Save and restore of live session state.
//!
//! A snapshot is a plain-text record of every session's tree — source,
//! wavelength, members, edges — stamped with the topology fingerprint it
//! was taken against:
//!
//! ```text
//! lighttree-snapshot v1
//! fingerprint 1f2e3d4c5b6a7988
//!
//! [session s0]
//! source n0
//! lambda 0
//! member n2
//! edge n0 n1
//! edge n1 n2
//! ```
//!
//! Switch seats and fabric reservations are *not* stored: they are fully
//! determined by the trees and are rebuilt (and re-validated) on load.
//! Loading against a different network than the one saved from is refused
//! by the fingerprint check before anything is interpreted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::{ProtocolConfig, RestoredSession, Sim};
use crate::fabric::Wavelength;
use crate::message::SessionId;
use crate::topology::Topology;

const HEADER: &str = "lighttree-snapshot v1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("snapshot was taken against a different network (fingerprint {found}, expected {want})")]
    WrongNetwork { found: String, want: String },
    #[error("restore failed: {0}")]
    Restore(String),
}

fn parse_err(line: usize, msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn save(sim: &Sim) -> String {
    let topo = sim.topo();
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    writeln!(out, "fingerprint {:016x}", topo.fingerprint()).unwrap();
    for (&sid, st) in sim.sessions() {
        out.push('\n');
        writeln!(out, "[session {sid}]").unwrap();
        writeln!(out, "source {}", topo.name(st.source)).unwrap();
        match st.lambda {
            Some(w) => writeln!(out, "lambda {}", w.0).unwrap(),
            None => out.push_str("lambda -\n"),
        }
        for &m in &st.members {
            writeln!(out, "member {}", topo.name(m)).unwrap();
        }
        for (a, b) in sim.tree(sid).edges {
            writeln!(out, "edge {} {}", topo.name(a), topo.name(b)).unwrap();
        }
    }
    out
}

pub fn load(topo: Topology, cfg: ProtocolConfig, text: &str) -> Result<Sim, SnapshotError> {
    let mut sessions: BTreeMap<SessionId, RestoredSession> = BTreeMap::new();
    let mut current: Option<SessionId> = None;
    let mut header_seen = false;
    let mut fingerprint_seen = false;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() {
            continue;
        }
        if !header_seen {
            if body != HEADER {
                return Err(parse_err(line, format!("expected {HEADER:?}")));
            }
            header_seen = true;
            continue;
        }
        if !fingerprint_seen {
            let found = body
                .strip_prefix("fingerprint ")
                .ok_or_else(|| parse_err(line, "expected the fingerprint line"))?;
            let want = format!("{:016x}", topo.fingerprint());
            if found != want {
                return Err(SnapshotError::WrongNetwork {
                    found: found.to_string(),
                    want,
                });
            }
            fingerprint_seen = true;
            continue;
        }
        if let Some(rest) = body.strip_prefix("[session ") {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "unterminated session header"))?;
            let id: u32 = name
                .strip_prefix('s')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| parse_err(line, format!("bad session id {name:?}")))?;
            let sid = SessionId(id);
            if sessions.contains_key(&sid) {
                return Err(parse_err(line, format!("session {name} repeated")));
            }
            sessions.insert(
                sid,
                RestoredSession {
                    source: crate::topology::NodeId(0), // overwritten by `source`
                    lambda: None,
                    members: Default::default(),
                    edges: Default::default(),
                },
            );
            current = Some(sid);
            continue;
        }
        let Some(sid) = current else {
            return Err(parse_err(line, "content before the first session block"));
        };
        let rs = sessions.get_mut(&sid).unwrap();
        let (key, rest) = body.split_once(' ').unwrap_or((body, ""));
        let lookup = |name: &str| {
            topo.lookup(name)
                .ok_or_else(|| parse_err(line, format!("unknown switch {name:?}")))
        };
        match key {
            "source" => rs.source = lookup(rest)?,
            "lambda" => {
                rs.lambda = match rest {
                    "-" => None,
                    n => Some(Wavelength(n.parse().map_err(|_| {
                        parse_err(line, format!("bad wavelength {n:?}"))
                    })?)),
                }
            }
            "member" => {
                rs.members.insert(lookup(rest)?);
            }
            "edge" => {
                let (a, b) = rest
                    .split_once(' ')
                    .ok_or_else(|| parse_err(line, "edge needs two switch names"))?;
                rs.edges.insert((lookup(a)?, lookup(b)?));
            }
            other => return Err(parse_err(line, format!("unknown key {other:?}"))),
        }
    }

    if !header_seen {
        return Err(parse_err(1, format!("expected {HEADER:?}")));
    }
    if !fingerprint_seen {
        return Err(parse_err(2, "expected the fingerprint line"));
    }
    Sim::restore(topo, cfg, sessions).map_err(SnapshotError::Restore)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Regime;
    use crate::generate::{Family, GeneratorConfig};
    use crate::topology::NodeId;

    fn populated() -> Sim {
        let topo = crate::generate::generate(&GeneratorConfig {
            family: Family::Grid,
            nodes: 12,
            splitter_fraction: 0.4,
            max_fanout: 4,
            wavelengths: 3,
            seed: 11,
        })
        .unwrap();
        let mut sim = Sim::new(topo, ProtocolConfig::new(Regime::Knowledge));
        let s0 = sim.add_session(NodeId(0));
        let s1 = sim.add_session(NodeId(7));
        for m in [5u32, 10, 3] {
            sim.run_join(s0, NodeId(m));
        }
        sim.run_join(s1, NodeId(2));
        sim.run_prune(s0, NodeId(5));
        sim
    }

    #[test]
    fn round_trip_preserves_sessions_and_fabric() {
        let sim = populated();
        let text = save(&sim);
        let loaded = load(
            sim.topo().clone(),
            ProtocolConfig::new(Regime::Knowledge),
            &text,
        )
        .unwrap();
        assert_eq!(loaded.sessions(), sim.sessions());
        for &sid in sim.sessions().keys() {
            assert_eq!(loaded.tree(sid), sim.tree(sid));
        }
        loaded.validate_consistency().unwrap();
        // Byte-stable through a full cycle.
        assert_eq!(save(&loaded), text);
    }

    #[test]
    fn restored_sim_plays_like_the_original() {
        let mut sim = populated();
        let text = save(&sim);
        let mut loaded = load(
            sim.topo().clone(),
            ProtocolConfig::new(Regime::Knowledge),
            &text,
        )
        .unwrap();
        let sid = *loaded.sessions().keys().next().unwrap();
        // Whatever the next episode does — attach or fail — both worlds
        // must do the same thing at the same cost.
        let here = sim.run_join(sid, NodeId(11));
        let there = loaded.run_join(sid, NodeId(11));
        assert_eq!(here.kind, there.kind);
        assert_eq!(here.cost, there.cost);
        assert_eq!(sim.tree(sid), loaded.tree(sid));
        loaded.validate_consistency().unwrap();
    }

    #[test]
    fn wrong_network_is_refused() {
        let sim = populated();
        let text = save(&sim);
        let other = crate::generate::generate(&GeneratorConfig {
            family: Family::Grid,
            nodes: 12,
            splitter_fraction: 0.4,
            max_fanout: 4,
            wavelengths: 3,
            seed: 12, // different seed, different splitters
        })
        .unwrap();
        let err = load(other, ProtocolConfig::new(Regime::Knowledge), &text).unwrap_err();
        assert!(matches!(err, SnapshotError::WrongNetwork { .. }));
    }

    #[test]
    fn malformed_snapshots_are_rejected() {
        let sim = populated();
        let fp = format!("fingerprint {:016x}", sim.topo().fingerprint());
        let cases: &[(String, &str)] = &[
            ("nonsense\n".into(), "expected"),
            (format!("{HEADER}\n"), "fingerprint"),
            (format!("{HEADER}\n{fp}\nsource n00\n"), "before the first"),
            (
                format!("{HEADER}\n{fp}\n[session s0]\nsource bogus\n"),
                "unknown switch",
            ),
            (
                format!("{HEADER}\n{fp}\n[session s0]\ncolor red\n"),
                "unknown key",
            ),
            (
                format!("{HEADER}\n{fp}\n[session s0]\nsource n00\nlambda 9\nedge n00 n01\n"),
                "out of range",
            ),
        ];
        for (text, needle) in cases {
            let err = load(
                sim.topo().clone(),
                ProtocolConfig::new(Regime::Knowledge),
                text,
            )
            .unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(needle), "{text:?} gave {msg:?}");
        }
    }
}
