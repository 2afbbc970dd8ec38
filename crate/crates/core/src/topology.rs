//! Immutable network graphs.
//!
//! A topology is an undirected simple graph over named switches. Node names
//! are sorted once at construction and every node is addressed by its index
//! in that order ([`NodeId`]), so identical inputs always produce identical
//! ids regardless of input ordering. All-pairs hop distances are computed
//! eagerly; the graphs this crate deals with are small enough that the
//! quadratic table is cheaper than repeated searches.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Index of a node in the sorted name table of its [`Topology`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Index of an undirected link in the sorted link table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

/// Static capabilities of one switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDescriptor {
    /// Physical port count; must cover the node degree.
    pub port_count: u16,
    /// Whether the switch can split one input to several outputs.
    pub is_splitter: bool,
    /// Maximum copies a single input may be split into. 1 for plain
    /// switches, between 2 and `port_count` for splitters.
    pub max_fanout: u16,
    /// Whether the switch could retune a signal to another wavelength.
    /// Parsed and carried for completeness; the signaling here never
    /// retunes, so the flag has no behavioral effect.
    pub wavelength_conversion: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("link references unknown node {0:?}")]
    UnknownNode(String),
    #[error("self-loop on node {0:?}")]
    SelfLoop(String),
    #[error("duplicate link {0:?} -- {1:?}")]
    DuplicateLink(String, String),
    #[error("node {0:?} has degree {1} but only {2} ports")]
    TooFewPorts(String, usize, u16),
    #[error("splitter {0:?} needs max_fanout in 2..={1}, got {2}")]
    BadFanout(String, u16, u16),
    #[error("plain switch {0:?} must have max_fanout 1, got {1}")]
    FanoutOnPlainSwitch(String, u16),
    #[error("splitter {0:?} has degree {1}; splitting needs at least 2 links")]
    SplitterDegreeTooLow(String, usize),
    #[error("wavelength count must be at least 1")]
    NoWavelengths,
    #[error("graph is not connected: {0:?} unreachable from {1:?}")]
    Disconnected(String, String),
    #[error("topology needs at least 2 nodes")]
    TooSmall,
}

/// An immutable, validated network graph.
#[derive(Debug, Clone)]
pub struct Topology {
    names: Vec<String>,
    descriptors: Vec<NodeDescriptor>,
    /// Sorted neighbor lists; the position of a neighbor in this list is the
    /// local port number used for the connecting link.
    adjacency: Vec<Vec<NodeId>>,
    /// Canonical link table, each entry (lo, hi), sorted.
    links: Vec<(NodeId, NodeId)>,
    link_ids: BTreeMap<(NodeId, NodeId), LinkId>,
    wavelengths: u16,
    seed: Option<u64>,
    /// dist[a][b] in hops.
    dist: Vec<Vec<u32>>,
    diameter: u32,
}

impl Topology {
    /// Validates and builds a topology from named parts. `nodes` maps name to
    /// descriptor; `links` lists undirected name pairs.
    pub fn build(
        wavelengths: u16,
        seed: Option<u64>,
        nodes: Vec<(String, NodeDescriptor)>,
        links: Vec<(String, String)>,
    ) -> Result<Topology, TopologyError> {
        if wavelengths == 0 {
            return Err(TopologyError::NoWavelengths);
        }
        if nodes.len() < 2 {
            return Err(TopologyError::TooSmall);
        }
        let mut by_name: BTreeMap<String, NodeDescriptor> = BTreeMap::new();
        for (name, desc) in nodes {
            if by_name.insert(name.clone(), desc).is_some() {
                return Err(TopologyError::DuplicateNode(name));
            }
        }
        let names: Vec<String> = by_name.keys().cloned().collect();
        let descriptors: Vec<NodeDescriptor> = by_name.values().cloned().collect();
        let index_of = |name: &str| -> Option<NodeId> {
            names
                .binary_search_by(|n| n.as_str().cmp(name))
                .ok()
                .map(|i| NodeId(i as u32))
        };

        let mut link_set: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
        for (a, b) in &links {
            let ia = index_of(a).ok_or_else(|| TopologyError::UnknownNode(a.clone()))?;
            let ib = index_of(b).ok_or_else(|| TopologyError::UnknownNode(b.clone()))?;
            if ia == ib {
                return Err(TopologyError::SelfLoop(a.clone()));
            }
            let key = (ia.min(ib), ia.max(ib));
            if !link_set.insert(key) {
                return Err(TopologyError::DuplicateLink(a.clone(), b.clone()));
            }
        }
        let links: Vec<(NodeId, NodeId)> = link_set.into_iter().collect();
        let link_ids: BTreeMap<(NodeId, NodeId), LinkId> = links
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, LinkId(i as u32)))
            .collect();

        let mut adjacency = vec![Vec::new(); names.len()];
        for &(a, b) in &links {
            adjacency[a.index()].push(b);
            adjacency[b.index()].push(a);
        }
        for list in &mut adjacency {
            list.sort();
        }

        for (i, desc) in descriptors.iter().enumerate() {
            let degree = adjacency[i].len();
            let name = || names[i].clone();
            if (desc.port_count as usize) < degree {
                return Err(TopologyError::TooFewPorts(name(), degree, desc.port_count));
            }
            if desc.is_splitter {
                if degree < 2 {
                    return Err(TopologyError::SplitterDegreeTooLow(name(), degree));
                }
                if desc.max_fanout < 2 || desc.max_fanout > desc.port_count {
                    return Err(TopologyError::BadFanout(
                        name(),
                        desc.port_count,
                        desc.max_fanout,
                    ));
                }
            } else if desc.max_fanout != 1 {
                return Err(TopologyError::FanoutOnPlainSwitch(name(), desc.max_fanout));
            }
        }

        // All-pairs hop distances; doubles as the connectivity check.
        let n = names.len();
        let mut dist = vec![vec![u32::MAX; n]; n];
        for start in 0..n {
            let row = &mut dist[start];
            row[start] = 0;
            let mut queue = VecDeque::from([NodeId(start as u32)]);
            while let Some(v) = queue.pop_front() {
                let d = row[v.index()];
                for &w in &adjacency[v.index()] {
                    if row[w.index()] == u32::MAX {
                        row[w.index()] = d + 1;
                        queue.push_back(w);
                    }
                }
            }
        }
        let mut diameter = 0;
        for (i, row) in dist.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                if d == u32::MAX {
                    return Err(TopologyError::Disconnected(
                        names[j].clone(),
                        names[i].clone(),
                    ));
                }
                diameter = diameter.max(d);
            }
        }

        Ok(Topology {
            names,
            descriptors,
            adjacency,
            links,
            link_ids,
            wavelengths,
            seed,
            dist,
            diameter,
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.names.len() as u32).map(NodeId)
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.names[n.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names
            .binary_search_by(|x| x.as_str().cmp(name))
            .ok()
            .map(|i| NodeId(i as u32))
    }

    pub fn descriptor(&self, n: NodeId) -> &NodeDescriptor {
        &self.descriptors[n.index()]
    }

    pub fn neighbors(&self, n: NodeId) -> &[NodeId] {
        &self.adjacency[n.index()]
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adjacency[n.index()].len()
    }

    /// Local port of `n` that faces neighbor `to`. Ports are numbered by
    /// ascending neighbor id.
    pub fn port_toward(&self, n: NodeId, to: NodeId) -> Option<u16> {
        self.adjacency[n.index()]
            .binary_search(&to)
            .ok()
            .map(|i| i as u16)
    }

    pub fn links(&self) -> &[(NodeId, NodeId)] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.link_ids.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn wavelengths(&self) -> u16 {
        self.wavelengths
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn dist(&self, a: NodeId, b: NodeId) -> u32 {
        self.dist[a.index()][b.index()]
    }

    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    /// Minimum-hop path from `a` to `b` inclusive of both endpoints. Among
    /// equal-length paths the lexicographically smallest node sequence wins,
    /// which makes routing reproducible and suffix-consistent: every node on
    /// the path picks the same continuation it would pick for its own query.
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Vec<NodeId> {
        let mut path = vec![a];
        let mut cur = a;
        while cur != b {
            let d = self.dist[cur.index()][b.index()];
            // Neighbor lists are sorted, so the first strictly-closer
            // neighbor is the lexicographic choice.
            let next = self.adjacency[cur.index()]
                .iter()
                .copied()
                .find(|w| self.dist[w.index()][b.index()] == d - 1)
                .expect("connected graph: some neighbor is closer");
            path.push(next);
            cur = next;
        }
        path
    }

    /// First hop of [`Self::shortest_path`].
    pub fn next_hop(&self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_ne!(a, b);
        let d = self.dist[a.index()][b.index()];
        self.adjacency[a.index()]
            .iter()
            .copied()
            .find(|w| self.dist[w.index()][b.index()] == d - 1)
            .expect("connected graph: some neighbor is closer")
    }

    /// Minimum-hop path from `a` to `b` that never visits `banned`, with the
    /// same lexicographic tie-break as [`Self::shortest_path`]. `None` when
    /// removing `banned` disconnects the pair.
    pub fn shortest_path_avoiding(
        &self,
        a: NodeId,
        b: NodeId,
        banned: NodeId,
    ) -> Option<Vec<NodeId>> {
        if a == banned || b == banned {
            return None;
        }
        let n = self.names.len();
        let mut dist_b = vec![u32::MAX; n];
        dist_b[b.index()] = 0;
        let mut queue = VecDeque::from([b]);
        while let Some(v) = queue.pop_front() {
            for &w in &self.adjacency[v.index()] {
                if w != banned && dist_b[w.index()] == u32::MAX {
                    dist_b[w.index()] = dist_b[v.index()] + 1;
                    queue.push_back(w);
                }
            }
        }
        if dist_b[a.index()] == u32::MAX {
            return None;
        }
        let mut path = vec![a];
        let mut cur = a;
        while cur != b {
            let d = dist_b[cur.index()];
            let next = self.adjacency[cur.index()]
                .iter()
                .copied()
                .find(|w| *w != banned && dist_b[w.index()] == d - 1)?;
            path.push(next);
            cur = next;
        }
        Some(path)
    }

    /// Splitters ranked by (hop distance from `from`, node id) ascending.
    /// `from` itself is listed (distance 0) when it is a splitter. `limit`
    /// truncates the ranking.
    pub fn splitter_ranking(&self, from: NodeId, limit: Option<usize>) -> Vec<(NodeId, u32)> {
        let mut out: Vec<(NodeId, u32)> = self
            .node_ids()
            .filter(|&n| self.descriptors[n.index()].is_splitter)
            .map(|n| (n, self.dist(from, n)))
            .collect();
        out.sort_by_key(|&(n, d)| (d, n));
        if let Some(k) = limit {
            out.truncate(k);
        }
        out
    }

    /// Stable 64-bit fingerprint of the whole topology (FNV-1a over a
    /// canonical serialization). Snapshots embed it so state is never
    /// restored onto a different graph.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&self.wavelengths.to_le_bytes());
        for (i, name) in self.names.iter().enumerate() {
            eat(name.as_bytes());
            eat(&[0]);
            let d = &self.descriptors[i];
            eat(&d.port_count.to_le_bytes());
            eat(&[d.is_splitter as u8, d.wavelength_conversion as u8]);
            eat(&d.max_fanout.to_le_bytes());
        }
        for &(a, b) in &self.links {
            eat(&a.0.to_le_bytes());
            eat(&b.0.to_le_bytes());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn plain(ports: u16) -> NodeDescriptor {
        NodeDescriptor {
            port_count: ports,
            is_splitter: false,
            max_fanout: 1,
            wavelength_conversion: false,
        }
    }

    pub(crate) fn splitter(ports: u16, fanout: u16) -> NodeDescriptor {
        NodeDescriptor {
            port_count: ports,
            is_splitter: true,
            max_fanout: fanout,
            wavelength_conversion: false,
        }
    }

    fn line3() -> Topology {
        // a -- b -- c
        Topology::build(
            1,
            None,
            vec![
                ("a".into(), plain(1)),
                ("b".into(), plain(2)),
                ("c".into(), plain(1)),
            ],
            vec![("a".into(), "b".into()), ("b".into(), "c".into())],
        )
        .unwrap()
    }

    #[test]
    fn ids_follow_sorted_names() {
        let t = line3();
        assert_eq!(t.name(NodeId(0)), "a");
        assert_eq!(t.name(NodeId(2)), "c");
        assert_eq!(t.lookup("b"), Some(NodeId(1)));
        assert_eq!(t.lookup("zz"), None);
    }

    #[test]
    fn id_assignment_ignores_input_order() {
        let build = |names: [&str; 3]| {
            Topology::build(
                1,
                None,
                names
                    .iter()
                    .map(|n| (n.to_string(), plain(2)))
                    .collect(),
                vec![("a".into(), "b".into()), ("b".into(), "c".into())],
            )
            .unwrap()
        };
        let t1 = build(["a", "b", "c"]);
        let t2 = build(["c", "a", "b"]);
        assert_eq!(t1.fingerprint(), t2.fingerprint());
    }

    #[test]
    fn distances_and_diameter() {
        let t = line3();
        assert_eq!(t.dist(NodeId(0), NodeId(2)), 2);
        assert_eq!(t.dist(NodeId(2), NodeId(0)), 2);
        assert_eq!(t.dist(NodeId(1), NodeId(1)), 0);
        assert_eq!(t.diameter(), 2);
    }

    #[test]
    fn ports_numbered_by_neighbor_id() {
        // b's neighbors are a (#0) and c (#2): ports 0 and 1.
        let t = line3();
        assert_eq!(t.port_toward(NodeId(1), NodeId(0)), Some(0));
        assert_eq!(t.port_toward(NodeId(1), NodeId(2)), Some(1));
        assert_eq!(t.port_toward(NodeId(0), NodeId(2)), None);
    }

    /// 4-cycle a-b-d-c-a: two equal-length routes between opposite corners;
    /// the lexicographically smaller one must win.
    #[test]
    fn path_tie_break_is_lexicographic() {
        let t = Topology::build(
            1,
            None,
            vec![
                ("a".into(), plain(2)),
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
        // a(0) to d(3): via b(1) or via c(2); [a,b,d] < [a,c,d].
        assert_eq!(
            t.shortest_path(NodeId(0), NodeId(3)),
            vec![NodeId(0), NodeId(1), NodeId(3)]
        );
        assert_eq!(t.next_hop(NodeId(0), NodeId(3)), NodeId(1));
        // Banning b forces the other route.
        assert_eq!(
            t.shortest_path_avoiding(NodeId(0), NodeId(3), NodeId(1)),
            Some(vec![NodeId(0), NodeId(2), NodeId(3)])
        );
        // Banning the destination or a cut vertex yields None.
        assert_eq!(t.shortest_path_avoiding(NodeId(0), NodeId(3), NodeId(3)), None);
    }

    #[test]
    fn avoiding_cut_vertex_disconnects() {
        let t = line3();
        assert_eq!(t.shortest_path_avoiding(NodeId(0), NodeId(2), NodeId(1)), None);
    }

    #[test]
    fn splitter_ranking_orders_by_distance_then_id() {
        // line: a - b - c - d, splitters at a and d; asked from b the nearer
        // one (a, dist 1) precedes d (dist 2). Asked from a splitter itself,
        // it comes first at distance 0.
        let t = Topology::build(
            1,
            None,
            vec![
                ("a".into(), splitter(2, 2)),
                ("b".into(), plain(2)),
                ("c".into(), plain(2)),
                ("d".into(), splitter(2, 2)),
            ],
            vec![
                ("a".into(), "b".into()),
                ("b".into(), "c".into()),
                ("c".into(), "d".into()),
                ("a".into(), "d".into()),
            ],
        )
        .unwrap();
        let a = NodeId(0);
        let b = NodeId(1);
        let d = NodeId(3);
        assert_eq!(t.splitter_ranking(b, None), vec![(a, 1), (d, 2)]);
        assert_eq!(t.splitter_ranking(a, None), vec![(a, 0), (d, 1)]);
        assert_eq!(t.splitter_ranking(b, Some(1)), vec![(a, 1)]);
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let nodes = |descs: Vec<(&str, NodeDescriptor)>| {
            descs.into_iter().map(|(n, d)| (n.to_string(), d)).collect::<Vec<_>>()
        };
        let ab = vec![("a".to_string(), "b".to_string())];

        let err = Topology::build(
            0,
            None,
            nodes(vec![("a", plain(1)), ("b", plain(1))]),
            ab.clone(),
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::NoWavelengths);

        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", plain(1)), ("b", plain(1))]),
            vec![("a".into(), "z".into())],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::UnknownNode("z".into()));

        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", plain(1)), ("b", plain(1))]),
            vec![("a".into(), "a".into())],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::SelfLoop("a".into()));

        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", plain(1)), ("b", plain(1))]),
            vec![("a".into(), "b".into()), ("b".into(), "a".into())],
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::DuplicateLink(..)));

        // degree 2 on a 1-port switch
        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", plain(1)), ("b", plain(1)), ("c", plain(1))]),
            vec![
                ("a".into(), "b".into()),
                ("b".into(), "c".into()),
            ],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::TooFewPorts("b".into(), 2, 1));

        // splitter with fanout 1
        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", splitter(2, 1)), ("b", plain(2)), ("c", plain(2))]),
            vec![
                ("a".into(), "b".into()),
                ("b".into(), "c".into()),
                ("c".into(), "a".into()),
            ],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::BadFanout("a".into(), 2, 1));

        // splitter on a degree-1 node can never branch
        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", splitter(2, 2)), ("b", plain(2)), ("c", plain(1))]),
            vec![("a".into(), "b".into()), ("b".into(), "c".into())],
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::SplitterDegreeTooLow("a".into(), 1));

        // plain switch claiming fanout
        let err = Topology::build(
            1,
            None,
            nodes(vec![(
                "a",
                NodeDescriptor {
                    port_count: 2,
                    is_splitter: false,
                    max_fanout: 2,
                    wavelength_conversion: false,
                },
            ), ("b", plain(1))]),
            ab.clone(),
        )
        .unwrap_err();
        assert_eq!(err, TopologyError::FanoutOnPlainSwitch("a".into(), 2));

        // disconnected
        let err = Topology::build(
            1,
            None,
            nodes(vec![("a", plain(1)), ("b", plain(1)), ("c", plain(1)), ("d", plain(1))]),
            vec![("a".into(), "b".into()), ("c".into(), "d".into())],
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::Disconnected(..)));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let t1 = line3();
        let mut t2 = line3();
        assert_eq!(t1.fingerprint(), t2.fingerprint());
        t2.descriptors[0].is_splitter = true; // direct poke, not a valid build
        assert_ne!(t1.fingerprint(), t2.fingerprint());
    }
}
