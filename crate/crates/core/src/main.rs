//! Command-line front end: generate networks, replay membership scenarios,
//! compare the splitter-location regimes, and tabulate cost sweeps.
//!
//! Exit codes: 0 on success, 1 when an episode fails or a snapshot does not
//! validate, 2 on bad input. File outputs are written via a temporary
//! sibling and rename, so a crash never leaves a half-written file.

use std::fmt::Write as _;
use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use num_rational::BigRational;

use lighttree::engine::{Cost, EpisodeOutcome, OutcomeKind, ProtocolConfig, Regime, Sim};
use lighttree::eval::{self, Knobs, Scenario, Step};
use lighttree::generate::{Family, GeneratorConfig};
use lighttree::topology::Topology;
use lighttree::{snapshot, topofile};

#[derive(Parser)]
#[command(name = "lighttree", version, about = "Multicast light-tree signaling simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    /// Switches hold a directory of splitter locations.
    Directory,
    /// Switches discover splitters by probing and flooding.
    Discovery,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::Directory => Regime::Knowledge,
            RegimeArg::Discovery => Regime::NoKnowledge,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum FormatArg {
    /// Aligned, human-oriented table.
    Table,
    /// Tab-separated values for machines.
    Delimited,
}

/// Explicit flag wins; otherwise table on a terminal, delimited when piped
/// or written to a file.
fn resolve_format(explicit: Option<FormatArg>, to_file: bool) -> FormatArg {
    explicit.unwrap_or(if to_file || !std::io::stdout().is_terminal() {
        FormatArg::Delimited
    } else {
        FormatArg::Table
    })
}

fn family_arg(s: &str) -> Result<Family, String> {
    Family::parse(s).ok_or_else(|| format!("unknown family {s:?} (ring, grid, random)"))
}

fn ratio_arg(s: &str) -> Result<BigRational, String> {
    BigRational::from_str(s).map_err(|_| format!("{s:?} is not a ratio like 1/64"))
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a network and print it in the .topo text format.
    GenTopology {
        /// Network family: ring, grid, or random.
        #[arg(long, value_parser = family_arg, default_value = "grid")]
        family: Family,
        #[arg(long)]
        nodes: u32,
        /// Fraction of switches that can split light.
        #[arg(long, default_value_t = 0.25)]
        splitter_fraction: f64,
        /// Largest branch count a generated splitter supports.
        #[arg(long, default_value_t = 4)]
        fanout_cap: u16,
        #[arg(long, default_value_t = 4)]
        wavelengths: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Replay a membership script under one regime.
    Run {
        /// Self-contained .scn scenario file.
        #[arg(long, conflicts_with_all = ["topology", "source", "step"])]
        scenario: Option<PathBuf>,
        /// Explicit .topo network file (needs --source and --step).
        #[arg(long, requires = "source")]
        topology: Option<PathBuf>,
        /// Source switch name (with --topology).
        #[arg(long)]
        source: Option<String>,
        /// Membership motion, in order: join:<switch> or prune:<switch>.
        #[arg(long = "step", value_name = "KIND:SWITCH")]
        step: Vec<String>,
        #[arg(long, value_enum, default_value_t = RegimeArg::Directory)]
        regime: RegimeArg,
        /// Regenerate the scenario's network from this seed.
        #[arg(long, conflicts_with = "topology")]
        seed: Option<u64>,
        /// Probe hop budget; default max(1, ceil(diameter / 2)).
        #[arg(long)]
        probe_ttl: Option<u32>,
        /// Flood hop budget; default diameter.
        #[arg(long)]
        flood_ttl: Option<u32>,
        /// Cap on flood transmissions per episode; default 2 * links.
        #[arg(long)]
        flood_cap: Option<u32>,
        /// Reject joins that would drop any delivery below this power,
        /// e.g. 1/64; default off.
        #[arg(long, value_parser = ratio_arg)]
        power_floor: Option<BigRational>,
        /// Print every delivered message.
        #[arg(long)]
        trace: bool,
        /// Write the final state as a snapshot file.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Replay a scenario under both sparse regimes plus the all-splitter
    /// reference and print the five-row comparison.
    Compare {
        scenario: PathBuf,
        /// Regenerate the scenario's network from this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Print the delivered-message traces of both sparse runs.
        #[arg(long)]
        trace: bool,
    },
    /// Tabulate mean signaling cost per network size over seeded trials,
    /// binned by where each trial's conflicts were resolved.
    Sweep {
        /// Comma-separated switch counts.
        #[arg(long, default_value = "12,36,50,100")]
        sizes: String,
        #[arg(long, value_parser = family_arg, default_value = "grid")]
        family: Family,
        #[arg(long, default_value_t = 0.25)]
        splitter_fraction: f64,
        #[arg(long, default_value_t = 4)]
        fanout_cap: u16,
        #[arg(long, default_value_t = 4)]
        wavelengths: u16,
        /// Joining members per trial.
        #[arg(long, default_value_t = 3)]
        members: usize,
        /// Seeded trials per size.
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Worker threads (0 = default pool). The report is identical
        /// regardless.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Write here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check a snapshot against its network and summarize the sessions.
    Validate {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, String> {
    match cmd {
        Cmd::GenTopology {
            family,
            nodes,
            splitter_fraction,
            fanout_cap,
            wavelengths,
            seed,
            out,
        } => {
            let cfg = GeneratorConfig {
                family,
                nodes,
                splitter_fraction,
                max_fanout: fanout_cap,
                wavelengths,
                seed,
            };
            let topo = lighttree::generate::generate(&cfg).map_err(|e| e.to_string())?;
            emit(out.as_deref(), &topofile::save(&topo))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run {
            scenario,
            topology,
            source,
            step,
            regime,
            seed,
            probe_ttl,
            flood_ttl,
            flood_cap,
            power_floor,
            trace,
            snapshot: snap_out,
        } => {
            let overrides = Knobs {
                probe_ttl,
                flood_ttl,
                flood_cap,
                power_floor,
            };
            run_cmd(
                scenario, topology, source, step, regime.into(), seed, overrides, trace, snap_out,
            )
        }
        Cmd::Compare {
            scenario,
            seed,
            format,
            trace,
        } => compare_cmd(&scenario, seed, format, trace),
        Cmd::Sweep {
            sizes,
            family,
            splitter_fraction,
            fanout_cap,
            wavelengths,
            members,
            trials,
            seed,
            threads,
            format,
            out,
        } => {
            let sizes = sizes
                .split(',')
                .map(|s| s.trim().parse::<u32>().map_err(|_| format!("bad size {s:?}")))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = eval::SweepConfig {
                sizes,
                family,
                splitter_fraction,
                max_fanout: fanout_cap,
                wavelengths,
                members,
                trials,
                seed,
                threads,
            };
            let report = eval::sweep(&cfg);
            let text = match resolve_format(format, out.is_some()) {
                FormatArg::Table => report.table(),
                FormatArg::Delimited => report.tsv(),
            };
            emit(out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate {
            topology,
            snapshot: snap,
        } => validate_cmd(&topology, &snap),
    }
}

/// Writes to the path via a temporary sibling and rename, or to stdout.
fn emit(path: Option<&Path>, text: &str) -> Result<(), String> {
    match path {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(p) => {
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, text).map_err(|e| format!("writing {}: {e}", tmp.display()))?;
            fs::rename(&tmp, p).map_err(|e| format!("renaming to {}: {e}", p.display()))
        }
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, String> {
    let mut sc = Scenario::parse(&read(path)?).map_err(|e| e.to_string())?;
    if let Some(seed) = seed {
        // Same shape, fresh splitter placement; switch names carry over.
        sc.cfg.seed = seed;
        sc.topo = lighttree::generate::generate(&sc.cfg).map_err(|e| e.to_string())?;
    }
    Ok(sc)
}

fn parse_step(topo: &Topology, spec: &str) -> Result<Step, String> {
    let (kind, name) = spec
        .split_once(':')
        .ok_or_else(|| format!("step {spec:?} is not join:<switch> or prune:<switch>"))?;
    let node = topo
        .lookup(name)
        .ok_or_else(|| format!("unknown switch {name:?}"))?;
    match kind {
        "join" => Ok(Step::Join(node)),
        "prune" => Ok(Step::Prune(node)),
        other => Err(format!("unknown step kind {other:?}")),
    }
}

fn per_kind(cost: &Cost) -> String {
    if cost.per_kind.is_empty() {
        return String::new();
    }
    let inner: Vec<String> = cost
        .per_kind
        .iter()
        .map(|(k, v)| format!("{k} {v}"))
        .collect();
    format!(" [{}]", inner.join(", "))
}

fn episode_line(i: usize, step: Step, out: &EpisodeOutcome, topo: &Topology) -> String {
    let (verb, node) = match step {
        Step::Join(n) => ("join", n),
        Step::Prune(n) => ("prune", n),
    };
    let verdict = match &out.kind {
        OutcomeKind::Attached => "attached".to_string(),
        OutcomeKind::Pruned { forced: false } => "released".to_string(),
        OutcomeKind::Pruned { forced: true } => "released (forced, ack lost)".to_string(),
        OutcomeKind::Rejected { why } => format!("rejected: {why}"),
        OutcomeKind::Failed(reason) => format!("failed: {reason}"),
    };
    format!(
        "episode {i}: {verb} {} — {verdict}, cost {}{} ({} ticks)",
        topo.name(node),
        out.cost.total,
        per_kind(&out.cost),
        out.ticks,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_cmd(
    scenario: Option<PathBuf>,
    topology: Option<PathBuf>,
    source: Option<String>,
    step: Vec<String>,
    regime: Regime,
    seed: Option<u64>,
    overrides: Knobs,
    trace: bool,
    snap_out: Option<PathBuf>,
) -> Result<ExitCode, String> {
    let (topo, source, steps, mut knobs) = match (scenario, topology) {
        (Some(path), None) => {
            let sc = load_scenario(&path, seed)?;
            (sc.topo, sc.source, sc.steps, sc.knobs)
        }
        (None, Some(path)) => {
            if seed.is_some() {
                return Err("--seed only applies to generated scenarios".into());
            }
            let topo = topofile::load(&read(&path)?).map_err(|e| e.to_string())?;
            let name = source.expect("clap enforces --source with --topology");
            let src = topo
                .lookup(&name)
                .ok_or_else(|| format!("unknown switch {name:?}"))?;
            let steps = step
                .iter()
                .map(|s| parse_step(&topo, s))
                .collect::<Result<Vec<_>, _>>()?;
            (topo, src, steps, Knobs::default())
        }
        (None, None) => return Err("pass --scenario or --topology".into()),
        (Some(_), Some(_)) => unreachable!("clap marks the flags as conflicting"),
    };
    knobs.probe_ttl = overrides.probe_ttl.or(knobs.probe_ttl);
    knobs.flood_ttl = overrides.flood_ttl.or(knobs.flood_ttl);
    knobs.flood_cap = overrides.flood_cap.or(knobs.flood_cap);
    knobs.power_floor = overrides.power_floor.or(knobs.power_floor);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "network: {} switches, {} links, {} wavelengths, fingerprint {:016x}",
        topo.node_count(),
        topo.link_count(),
        topo.wavelengths(),
        topo.fingerprint(),
    );
    let _ = writeln!(
        out,
        "regime: {}",
        match regime {
            Regime::Knowledge => "directory",
            Regime::NoKnowledge => "discovery",
        }
    );

    let mut cfg = ProtocolConfig::new(regime);
    cfg.probe_ttl = knobs.probe_ttl;
    cfg.flood_ttl = knobs.flood_ttl;
    cfg.flood_cap = knobs.flood_cap;
    cfg.power_floor = knobs.power_floor.clone();
    let mut sim = Sim::new(topo, cfg);
    let sid = sim.add_session(source);
    let mut ok = true;
    for (i, &st) in steps.iter().enumerate() {
        let outcome = match st {
            Step::Join(n) => sim.run_join(sid, n),
            Step::Prune(n) => sim.run_prune(sid, n),
        };
        ok &= outcome.kind.is_success();
        let _ = writeln!(out, "{}", episode_line(i + 1, st, &outcome, sim.topo()));
    }

    let tree = sim.tree(sid);
    let _ = writeln!(
        out,
        "session: source {}, {} members, {} links, total signaling {}",
        sim.topo().name(source),
        tree.members.len(),
        tree.edges.len(),
        sim.ledger_total(),
    );
    for &m in &tree.members {
        if let Some(p) = sim.member_power(sid, m) {
            let _ = writeln!(out, "power {} = {}", sim.topo().name(m), p);
        }
    }
    if trace {
        let _ = writeln!(out, "trace:");
        for line in sim.trace() {
            let _ = writeln!(out, "{line}");
        }
    }
    print!("{out}");

    if let Some(path) = snap_out {
        emit(Some(&path), &snapshot::save(&sim))?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn compare_cmd(
    path: &Path,
    seed: Option<u64>,
    format: Option<FormatArg>,
    trace: bool,
) -> Result<ExitCode, String> {
    let sc = load_scenario(path, seed)?;
    let cmp = eval::compare_regimes(&sc);
    match resolve_format(format, false) {
        FormatArg::Table => print!("{}", cmp.report(&sc)),
        FormatArg::Delimited => print!("{}", cmp.report_tsv(&sc)),
    }
    if trace {
        println!("== directory trace ==");
        for line in &cmp.knowledge.trace {
            println!("{line}");
        }
        println!("== discovery trace ==");
        for line in &cmp.no_knowledge.trace {
            println!("{line}");
        }
    }
    let ok = cmp.knowledge.all_attached()
        && cmp.no_knowledge.all_attached()
        && cmp.all_splitters.all_attached();
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn validate_cmd(topo_path: &Path, snap_path: &Path) -> Result<ExitCode, String> {
    let topo = topofile::load(&read(topo_path)?).map_err(|e| e.to_string())?;
    let text = read(snap_path)?;
    let sim = match snapshot::load(topo, ProtocolConfig::new(Regime::Knowledge), &text) {
        Ok(sim) => sim,
        Err(e @ snapshot::SnapshotError::Parse { .. }) => return Err(e.to_string()),
        Err(e) => {
            eprintln!("invalid: {e}");
            return Ok(ExitCode::FAILURE);
        }
    };
    for (sid, session) in sim.sessions() {
        let tree = sim.tree(*sid);
        println!(
            "session s{}: source {}, lambda {}, {} members, {} links",
            sid.0,
            sim.topo().name(session.source),
            session
                .lambda
                .map_or("-".to_string(), |w| w.0.to_string()),
            tree.members.len(),
            tree.edges.len(),
        );
        for &m in &tree.members {
            if let Some(p) = sim.member_power(*sid, m) {
                println!("  power {} = {}", sim.topo().name(m), p);
            }
        }
    }
    println!("consistency: ok");
    Ok(ExitCode::SUCCESS)
}
