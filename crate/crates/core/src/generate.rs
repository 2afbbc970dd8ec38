//! Seeded topology generators.
//!
//! Three families, all connected by construction and all deterministic in the
//! seed: a ring, a rectangular grid, and a random tree thickened with extra
//! chords. Splitter placement is a seeded draw over nodes of degree >= 2
//! (a degree-1 switch has nowhere to send a second copy).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::topology::{NodeDescriptor, Topology, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Ring,
    Grid,
    RandomConnected,
}

impl Family {
    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "ring" => Some(Family::Ring),
            "grid" => Some(Family::Grid),
            "random-connected" | "random" => Some(Family::RandomConnected),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Ring => "ring",
            Family::Grid => "grid",
            Family::RandomConnected => "random-connected",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub family: Family,
    pub nodes: u32,
    /// Fraction of switches upgraded to splitters, rounded to the nearest
    /// count. 1.0 upgrades every eligible switch.
    pub splitter_fraction: f64,
    /// Fanout cap for generated splitters; each gets min(degree, this).
    pub max_fanout: u16,
    pub wavelengths: u16,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("{family} generator needs at least {min} nodes, got {got}")]
    TooFewNodes {
        family: &'static str,
        min: u32,
        got: u32,
    },
    #[error("grid generator needs a node count r*c with r,c >= 2, got {0}")]
    NotAGrid(u32),
    #[error("splitter fraction must be within 0..=1, got {0}")]
    BadFraction(f64),
    #[error("generated splitters need a fanout cap of at least 2, got {0}")]
    BadFanoutCap(u16),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Source of a topology: either fully spelled out or drawn from a generator.
#[derive(Debug, Clone)]
pub enum TopologySpec {
    Explicit {
        wavelengths: u16,
        seed: Option<u64>,
        nodes: Vec<(String, NodeDescriptor)>,
        links: Vec<(String, String)>,
    },
    Generated(GeneratorConfig),
}

pub fn build_topology(spec: &TopologySpec) -> Result<Topology, GenerateError> {
    match spec {
        TopologySpec::Explicit {
            wavelengths,
            seed,
            nodes,
            links,
        } => Ok(Topology::build(
            *wavelengths,
            *seed,
            nodes.clone(),
            links.clone(),
        )?),
        TopologySpec::Generated(cfg) => generate(cfg),
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Topology, GenerateError> {
    if !(0.0..=1.0).contains(&cfg.splitter_fraction) {
        return Err(GenerateError::BadFraction(cfg.splitter_fraction));
    }
    if cfg.max_fanout < 2 {
        return Err(GenerateError::BadFanoutCap(cfg.max_fanout));
    }
    let n = cfg.nodes as usize;
    let edges = match cfg.family {
        Family::Ring => {
            if cfg.nodes < 3 {
                return Err(GenerateError::TooFewNodes {
                    family: "ring",
                    min: 3,
                    got: cfg.nodes,
                });
            }
            (0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>()
        }
        Family::Grid => {
            let (rows, cols) = grid_shape(cfg.nodes).ok_or(GenerateError::NotAGrid(cfg.nodes))?;
            let at = |r: usize, c: usize| r * cols + c;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        edges.push((at(r, c), at(r, c + 1)));
                    }
                    if r + 1 < rows {
                        edges.push((at(r, c), at(r + 1, c)));
                    }
                }
            }
            edges
        }
        Family::RandomConnected => {
            if cfg.nodes < 3 {
                return Err(GenerateError::TooFewNodes {
                    family: "random-connected",
                    min: 3,
                    got: cfg.nodes,
                });
            }
            random_connected_edges(n, cfg.seed)
        }
    };

    let mut degree = vec![0usize; n];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }

    // Splitter draw: seeded shuffle of eligible nodes, take the first k.
    // Distinct stream from the edge draw so adding chords never reshuffles
    // the splitter placement.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut eligible: Vec<usize> = (0..n).filter(|&i| degree[i] >= 2).collect();
    eligible.shuffle(&mut rng);
    let want = (cfg.splitter_fraction * n as f64).round() as usize;
    let chosen: std::collections::BTreeSet<usize> =
        eligible.into_iter().take(want).collect();

    let width = (n.max(2) - 1).to_string().len();
    let name = |i: usize| format!("n{:0width$}", i, width = width);
    let nodes: Vec<(String, NodeDescriptor)> = (0..n)
        .map(|i| {
            let is_splitter = chosen.contains(&i);
            (
                name(i),
                NodeDescriptor {
                    port_count: degree[i] as u16,
                    is_splitter,
                    max_fanout: if is_splitter {
                        (degree[i] as u16).min(cfg.max_fanout)
                    } else {
                        1
                    },
                    wavelength_conversion: false,
                },
            )
        })
        .collect();
    let links: Vec<(String, String)> = edges.iter().map(|&(a, b)| (name(a), name(b))).collect();
    Ok(Topology::build(
        cfg.wavelengths,
        Some(cfg.seed),
        nodes,
        links,
    )?)
}

/// Most-square factorization r*c = n with r <= c and r >= 2, plus the
/// degenerate 1x2 case so the smallest connected network is constructible.
fn grid_shape(n: u32) -> Option<(usize, usize)> {
    if n == 2 {
        return Some((1, 2));
    }
    let mut r = (n as f64).sqrt() as u32;
    while r >= 2 {
        if n % r == 0 {
            return Some((r as usize, (n / r) as usize));
        }
        r -= 1;
    }
    None
}

/// Random spanning tree plus ~n/4 chords, then degree-1 repair so every node
/// can in principle host a splitter. Connected by construction.
fn random_connected_edges(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut edge_set = std::collections::BTreeSet::new();
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        let v = order[i];
        edge_set.insert((v.min(parent), v.max(parent)));
    }
    let extra = n / 4;
    let mut added = 0;
    let mut attempts = 0;
    while added < extra && attempts < 20 * n {
        attempts += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && edge_set.insert((a.min(b), a.max(b))) {
            added += 1;
        }
    }
    // Repair: give every degree-1 node a second link.
    loop {
        let mut degree = vec![0usize; n];
        for &(a, b) in &edge_set {
            degree[a] += 1;
            degree[b] += 1;
        }
        let Some(lonely) = (0..n).find(|&i| degree[i] < 2) else {
            break;
        };
        let target = (0..n)
            .filter(|&j| j != lonely && !edge_set.contains(&(lonely.min(j), lonely.max(j))))
            .min_by_key(|&j| (degree[j], j))
            .expect("n >= 3 guarantees a free partner");
        edge_set.insert((lonely.min(target), lonely.max(target)));
    }
    edge_set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(family: Family, nodes: u32, fraction: f64, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            family,
            nodes,
            splitter_fraction: fraction,
            max_fanout: 4,
            wavelengths: 2,
            seed,
        }
    }

    #[test]
    fn ring_shape() {
        let t = generate(&cfg(Family::Ring, 6, 0.0, 1)).unwrap();
        assert_eq!(t.node_count(), 6);
        assert_eq!(t.link_count(), 6);
        for n in t.node_ids() {
            assert_eq!(t.degree(n), 2);
        }
        assert_eq!(t.diameter(), 3);
    }

    #[test]
    fn grid_shape_and_factoring() {
        let t = generate(&cfg(Family::Grid, 12, 0.0, 1)).unwrap();
        // 3x4 grid: 12 nodes, 3*3 + 2*4 = 17 links.
        assert_eq!(t.node_count(), 12);
        assert_eq!(t.link_count(), 17);
        // Degenerate two-switch grid: one link, no splitter-eligible nodes.
        let tiny = generate(&cfg(Family::Grid, 2, 0.25, 1)).unwrap();
        assert_eq!(tiny.link_count(), 1);
        assert!(tiny.node_ids().all(|n| !tiny.descriptor(n).is_splitter));
        assert_eq!(
            generate(&cfg(Family::Grid, 13, 0.0, 1)).unwrap_err(),
            GenerateError::NotAGrid(13)
        );
        assert_eq!(grid_shape(36), Some((6, 6)));
        assert_eq!(grid_shape(50), Some((5, 10)));
        assert_eq!(grid_shape(100), Some((10, 10)));
        assert_eq!(grid_shape(7), None);
    }

    #[test]
    fn random_connected_is_connected_and_min_degree_2() {
        for seed in 0..20 {
            let t = generate(&cfg(Family::RandomConnected, 15, 0.3, seed)).unwrap();
            assert_eq!(t.node_count(), 15); // build() would reject disconnection
            for n in t.node_ids() {
                assert!(t.degree(n) >= 2, "seed {seed}: degree-1 node survived repair");
            }
        }
    }

    #[test]
    fn same_seed_same_graph_different_seed_usually_not() {
        let a = generate(&cfg(Family::RandomConnected, 12, 0.4, 7)).unwrap();
        let b = generate(&cfg(Family::RandomConnected, 12, 0.4, 7)).unwrap();
        let c = generate(&cfg(Family::RandomConnected, 12, 0.4, 8)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn splitter_fraction_respected() {
        let t = generate(&cfg(Family::Grid, 36, 0.25, 3)).unwrap();
        let count = t
            .node_ids()
            .filter(|&n| t.descriptor(n).is_splitter)
            .count();
        assert_eq!(count, 9);
        let all = generate(&cfg(Family::Ring, 8, 1.0, 3)).unwrap();
        assert!(all.node_ids().all(|n| all.descriptor(n).is_splitter));
    }

    #[test]
    fn generated_splitters_respect_degree_and_cap() {
        let t = generate(&cfg(Family::Grid, 36, 1.0, 5)).unwrap();
        for n in t.node_ids() {
            let d = t.descriptor(n);
            assert!(d.is_splitter);
            assert_eq!(d.max_fanout, (t.degree(n) as u16).min(4));
        }
    }

    #[test]
    fn zero_padded_names_sort_numerically() {
        let t = generate(&cfg(Family::Grid, 12, 0.0, 1)).unwrap();
        assert_eq!(t.name(crate::topology::NodeId(0)), "n00");
        assert_eq!(t.name(crate::topology::NodeId(11)), "n11");
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(matches!(
            generate(&cfg(Family::Ring, 2, 0.0, 1)),
            Err(GenerateError::TooFewNodes { .. })
        ));
        assert!(matches!(
            generate(&cfg(Family::Ring, 6, 1.5, 1)),
            Err(GenerateError::BadFraction(_))
        ));
        let mut c = cfg(Family::Ring, 6, 0.5, 1);
        c.max_fanout = 1;
        assert!(matches!(generate(&c), Err(GenerateError::BadFanoutCap(1))));
    }
}
