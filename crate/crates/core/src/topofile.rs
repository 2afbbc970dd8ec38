//! Plain-text network description, round-trippable.
//!
//! ```text
//! [network]
//! wavelengths = 8
//! seed = 42            # optional
//!
//! [nodes]
//! # name  ports  splitter  fanout  convert
//! n0  3  yes  3  no
//! n1  2  no   1  no
//!
//! [links]
//! n0 n1
//! ```
//!
//! Parsing is strict: unknown sections or keys, wrong column counts, and
//! duplicates are errors carrying a line number. [`save`] emits nodes and
//! links in canonical (sorted) order, so `load(save(t))` reproduces `t`
//! exactly — same ids, same fingerprint.

use std::fmt::Write as _;

use thiserror::Error;

use crate::topology::{NodeDescriptor, Topology, TopologyError};

#[derive(Debug, Error)]
pub enum TopofileError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Build(#[from] TopologyError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> TopofileError {
    TopofileError::Parse {
        line,
        msg: msg.into(),
    }
}

fn yes_no(token: &str, line: usize, column: &str) -> Result<bool, TopofileError> {
    match token {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(parse_err(
            line,
            format!("{column} must be yes or no, got {other:?}"),
        )),
    }
}

pub fn load(text: &str) -> Result<Topology, TopofileError> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Network,
        Nodes,
        Links,
    }

    let mut section = Section::None;
    let mut seen_network = false;
    let mut seen_nodes = false;
    let mut seen_links = false;
    let mut wavelengths: Option<u16> = None;
    let mut seed: Option<u64> = None;
    let mut nodes: Vec<(String, NodeDescriptor)> = Vec::new();
    let mut links: Vec<(String, String)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "unterminated section header"))?;
            section = match name {
                "network" if !seen_network => {
                    seen_network = true;
                    Section::Network
                }
                "nodes" if !seen_nodes => {
                    seen_nodes = true;
                    Section::Nodes
                }
                "links" if !seen_links => {
                    seen_links = true;
                    Section::Links
                }
                "network" | "nodes" | "links" => {
                    return Err(parse_err(line, format!("section [{name}] repeated")))
                }
                other => return Err(parse_err(line, format!("unknown section [{other}]"))),
            };
            continue;
        }
        match section {
            Section::None => {
                return Err(parse_err(line, "content before the first section header"))
            }
            Section::Network => {
                let (key, value) = body
                    .split_once('=')
                    .ok_or_else(|| parse_err(line, "expected key = value"))?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "wavelengths" => {
                        if wavelengths.is_some() {
                            return Err(parse_err(line, "wavelengths set twice"));
                        }
                        wavelengths = Some(value.parse().map_err(|_| {
                            parse_err(line, format!("bad wavelength count {value:?}"))
                        })?);
                    }
                    "seed" => {
                        if seed.is_some() {
                            return Err(parse_err(line, "seed set twice"));
                        }
                        seed = Some(
                            value
                                .parse()
                                .map_err(|_| parse_err(line, format!("bad seed {value:?}")))?,
                        );
                    }
                    other => return Err(parse_err(line, format!("unknown key {other:?}"))),
                }
            }
            Section::Nodes => {
                let cols: Vec<&str> = body.split_whitespace().collect();
                if cols.len() != 5 {
                    return Err(parse_err(
                        line,
                        format!(
                            "expected 5 columns (name ports splitter fanout convert), got {}",
                            cols.len()
                        ),
                    ));
                }
                let ports: u16 = cols[1]
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad port count {:?}", cols[1])))?;
                let is_splitter = yes_no(cols[2], line, "splitter")?;
                let max_fanout: u16 = cols[3]
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad fanout {:?}", cols[3])))?;
                let wavelength_conversion = yes_no(cols[4], line, "convert")?;
                nodes.push((
                    cols[0].to_string(),
                    NodeDescriptor {
                        port_count: ports,
                        is_splitter,
                        max_fanout,
                        wavelength_conversion,
                    },
                ));
            }
            Section::Links => {
                let cols: Vec<&str> = body.split_whitespace().collect();
                if cols.len() != 2 {
                    return Err(parse_err(
                        line,
                        format!("expected 2 columns (two node names), got {}", cols.len()),
                    ));
                }
                links.push((cols[0].to_string(), cols[1].to_string()));
            }
        }
    }

    let wavelengths = wavelengths
        .ok_or_else(|| parse_err(text.lines().count(), "missing [network] wavelengths"))?;
    Ok(Topology::build(wavelengths, seed, nodes, links)?)
}

pub fn save(topo: &Topology) -> String {
    let mut out = String::new();
    out.push_str("[network]\n");
    writeln!(out, "wavelengths = {}", topo.wavelengths()).unwrap();
    if let Some(seed) = topo.seed() {
        writeln!(out, "seed = {seed}").unwrap();
    }
    out.push_str("\n[nodes]\n# name ports splitter fanout convert\n");
    for n in topo.node_ids() {
        let d = topo.descriptor(n);
        writeln!(
            out,
            "{} {} {} {} {}",
            topo.name(n),
            d.port_count,
            if d.is_splitter { "yes" } else { "no" },
            d.max_fanout,
            if d.wavelength_conversion { "yes" } else { "no" },
        )
        .unwrap();
    }
    out.push_str("\n[links]\n");
    for &(a, b) in topo.links() {
        writeln!(out, "{} {}", topo.name(a), topo.name(b)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# three switches in a line, middle one splits
[network]
wavelengths = 4
seed = 7

[nodes]
a 1 no 1 no
b 2 yes 2 no
c 1 no 1 no

[links]
a b
b c
";

    #[test]
    fn loads_and_resolves_names() {
        let topo = load(SAMPLE).unwrap();
        assert_eq!(topo.node_count(), 3);
        assert_eq!(topo.wavelengths(), 4);
        assert_eq!(topo.seed(), Some(7));
        let b = topo.lookup("b").unwrap();
        assert!(topo.descriptor(b).is_splitter);
        assert_eq!(topo.link_count(), 2);
    }

    #[test]
    fn save_load_is_identity() {
        let topo = load(SAMPLE).unwrap();
        let text = save(&topo);
        let again = load(&text).unwrap();
        assert_eq!(again.fingerprint(), topo.fingerprint());
        assert_eq!(save(&again), text);
    }

    #[test]
    fn rejects_malformed_input() {
        let cases: &[(&str, &str)] = &[
            ("x 1 no 1 no\n", "before the first section"),
            ("[network]\nwavelengths = 1\n[nodes]\na 1 no\n", "5 columns"),
            ("[network]\nwavelengths = 1\nwavelengths = 2\n", "twice"),
            ("[bogus]\n", "unknown section"),
            ("[network]\ncolor = red\n", "unknown key"),
            ("[network]\nwavelengths = 1\n[nodes]\na 1 maybe 1 no\n", "yes or no"),
            ("[network]\nwavelengths = 1\n[links]\na\n", "2 columns"),
            ("[network]\nseed = 1\n", "missing"),
            ("[network]\nwavelengths = 1\n[network]\n", "repeated"),
        ];
        for (text, needle) in cases {
            let err = load(text).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains(needle),
                "input {text:?} gave {msg:?}, wanted {needle:?}"
            );
        }
    }

    #[test]
    fn build_errors_pass_through() {
        let text = "[network]\nwavelengths = 1\n[nodes]\na 1 no 1 no\n[links]\na a\n";
        assert!(matches!(load(text), Err(TopofileError::Build(_))));
    }
}
