//! Batch configuration and report emission for the `manet-nc` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{
    run_broadcast, standard_workload, DtMode, EventLog, LoadScenario, Scenario, Thresholds,
};
use crate::metrics::{aggregate, runs_csv, summary_csv, summary_text, RunRecord};
use crate::pruning::PruningProtocol;
use crate::topology::{find_connected_topology, is_connected, load_topology, Topology};
use crate::{Error, NodeId, Result};

/// Redraws allowed per (node count, seed) before giving up on connectivity.
pub const MAX_TOPOLOGY_ATTEMPTS: u32 = 100_000;

const STREAM_SOURCE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceRule {
    Fixed(NodeId),
    /// Uniform over the nodes, drawn from the run's seed.
    Random,
}

impl SourceRule {
    pub fn pick(self, node_count: usize, seed: u64) -> NodeId {
        match self {
            Self::Fixed(v) => v,
            Self::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(STREAM_SOURCE);
                rng.gen_range(0..node_count)
            }
        }
    }
}

impl FromStr for SourceRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "random" {
            return Ok(Self::Random);
        }
        s.parse()
            .map(Self::Fixed)
            .map_err(|_| format!("expected a node id or `random`, got `{s}`"))
    }
}

impl fmt::Display for SourceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(v) => write!(f, "{v}"),
            Self::Random => f.write_str("random"),
        }
    }
}

/// `N` means seeds `0..N`; a comma list (`3,7,`) or range (`10..20`) is taken
/// literally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSpec(pub Vec<u64>);

impl FromStr for SeedSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = |part: &str| format!("invalid seed `{part}`");
        if let Some((lo, hi)) = s.split_once("..") {
            let lo: u64 = lo.trim().parse().map_err(|_| bad(lo))?;
            let hi: u64 = hi.trim().parse().map_err(|_| bad(hi))?;
            if lo >= hi {
                return Err(format!("empty seed range `{s}`"));
            }
            return Ok(Self((lo..hi).collect()));
        }
        if s.contains(',') {
            let seeds = s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|_| bad(p)))
                .collect::<std::result::Result<Vec<u64>, _>>()?;
            if seeds.is_empty() {
                return Err("seed list is empty".into());
            }
            return Ok(Self(seeds));
        }
        let count: u64 = s.trim().parse().map_err(|_| bad(s))?;
        if count == 0 {
            return Err("seed count must be positive".into());
        }
        Ok(Self((0..count).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CodingSetting {
    On,
    Off,
    Both,
}

impl CodingSetting {
    pub fn settings(self) -> &'static [bool] {
        match self {
            Self::On => &[true],
            Self::Off => &[false],
            Self::Both => &[false, true],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProtocolArg {
    One(PruningProtocol),
    All,
}

impl FromStr for ProtocolArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "all" {
            Ok(Self::All)
        } else {
            s.parse().map(Self::One)
        }
    }
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is out of [0,1]"))
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "manet-nc",
    version,
    about = "Broadcast simulator for dominant pruning with opportunistic XOR coding",
    long_about = "Runs every combination of node count, seed, protocol and coding setting \
                  on seeded random unit-disk topologies, then writes runs.csv, summary.csv \
                  and summary.txt to the output directory. Exits nonzero if any run fails \
                  to go quiet or any connected topology is not fully delivered."
)]
struct Args {
    /// Node counts to sweep (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "40")]
    nodes: Vec<usize>,
    /// Side of the square deployment area
    #[arg(long, default_value_t = 100.0, value_parser = positive_f64)]
    area: f64,
    /// Radio range
    #[arg(long, default_value_t = 25.0, value_parser = positive_f64)]
    range: f64,
    /// Seed count N (seeds 0..N), a comma list, or a range a..b
    #[arg(long, default_value = "100")]
    seeds: SeedSpec,
    /// Broadcast source: a node id or `random`
    #[arg(long, default_value_t = SourceRule::Fixed(0))]
    source: SourceRule,
    /// Protocols: flood, dp, tdp, pdp or all (comma separated)
    #[arg(long, value_delimiter = ',', default_value = "all")]
    protocol: Vec<ProtocolArg>,
    /// Opportunistic coding
    #[arg(long, value_enum, default_value_t = CodingSetting::On)]
    coding: CodingSetting,
    /// Packet sizes: low = all small, high = all large, mixed = alternating
    #[arg(long, default_value = "low")]
    load: LoadScenario,
    /// with: random delay tolerance and bounded wait; without: every packet waits
    #[arg(long = "dt-mode", default_value = "with")]
    dt_mode: DtMode,
    /// Coding needs the needing-neighbour probability above this
    #[arg(long = "prob-gate", default_value_t = 0.4, value_parser = unit_interval)]
    prob_gate: f64,
    /// Coding needs the packet's delay tolerance above this
    #[arg(long = "dt-gate", default_value_t = 0.8, value_parser = unit_interval)]
    dt_gate: f64,
    /// Possession probability at which a neighbour is assumed to hold a packet
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval)]
    guess: f64,
    /// Ticks a buffered packet waits for a coding partner
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    timeout: u64,
    /// Native packets per broadcast
    #[arg(long, default_value_t = 9, value_parser = clap::value_parser!(u64).range(1..))]
    packets: u64,
    /// Packets shorter than this many bytes are small
    #[arg(long = "small-threshold", default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    small_threshold: u64,
    /// Use this topology for every run instead of random ones
    #[arg(long = "topology-file")]
    topology_file: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write each run's event log under <out>/logs
    #[arg(long = "emit-log")]
    emit_log: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub nodes: Vec<usize>,
    pub area: f64,
    pub radio_range: f64,
    pub seeds: Vec<u64>,
    pub source: SourceRule,
    pub protocols: Vec<PruningProtocol>,
    pub coding: CodingSetting,
    pub load: LoadScenario,
    pub dt_mode: DtMode,
    pub thresholds: Thresholds,
    pub timeout_ticks: u64,
    pub packets: usize,
    pub small_threshold: usize,
    pub topology_file: Option<PathBuf>,
    pub out: PathBuf,
    pub emit_log: bool,
}

impl Default for Config {
    fn default() -> Self {
        parse_args(["manet-nc"]).expect("defaults are valid")
    }
}

/// Parses command-line arguments (including the program name).
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Config, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let a = Args::try_parse_from(argv)?;
    let mut protocols = Vec::new();
    for p in a.protocol {
        let expanded: &[PruningProtocol] = match &p {
            ProtocolArg::All => &PruningProtocol::ALL,
            ProtocolArg::One(one) => std::slice::from_ref(one),
        };
        for &q in expanded {
            if !protocols.contains(&q) {
                protocols.push(q);
            }
        }
    }
    protocols.sort();
    let mut nodes = a.nodes;
    nodes.sort_unstable();
    nodes.dedup();
    if nodes.contains(&0) {
        return Err(clap::Error::raw(
            clap::error::ErrorKind::ValueValidation,
            "node counts must be positive\n",
        ));
    }
    if let (SourceRule::Fixed(s), None) = (a.source, &a.topology_file) {
        if let Some(&n) = nodes.iter().find(|&&n| s >= n) {
            return Err(clap::Error::raw(
                clap::error::ErrorKind::ValueValidation,
                format!("source {s} does not exist in a {n}-node topology\n"),
            ));
        }
    }
    Ok(Config {
        nodes,
        area: a.area,
        radio_range: a.range,
        seeds: a.seeds.0,
        source: a.source,
        protocols,
        coding: a.coding,
        load: a.load,
        dt_mode: a.dt_mode,
        thresholds: Thresholds {
            prob_gate: a.prob_gate,
            dt_gate: a.dt_gate,
            guess: a.guess,
        },
        timeout_ticks: a.timeout,
        packets: a.packets as usize,
        small_threshold: a.small_threshold as usize,
        topology_file: a.topology_file,
        out: a.out,
        emit_log: a.emit_log,
    })
}

struct Job {
    topology: Arc<Topology>,
    connected: bool,
    nodes: usize,
    seed: u64,
    source: NodeId,
    protocol: PruningProtocol,
    coding: bool,
}

struct Outcome {
    record: RunRecord,
    log: EventLog,
    connected: bool,
}

impl Config {
    fn scenario(&self, job: &Job) -> Scenario {
        let mut sc = Scenario::new(
            job.topology.clone(),
            job.protocol,
            job.coding,
            job.source,
            self.load,
            self.dt_mode,
            job.seed,
        );
        sc.workload = standard_workload(
            job.source,
            self.packets,
            self.load,
            self.dt_mode,
            job.seed,
            self.small_threshold,
        );
        sc.small_threshold = self.small_threshold;
        sc.thresholds = self.thresholds;
        sc.timeout = self.dt_mode.timeout(self.timeout_ticks);
        sc
    }

    /// One topology per (node count, seed), in sweep order.
    fn topologies(&self) -> Result<Vec<(usize, u64, Arc<Topology>)>> {
        if let Some(path) = &self.topology_file {
            let text = fs::read_to_string(path)?;
            let t = Arc::new(load_topology(&text)?);
            return Ok(self
                .seeds
                .iter()
                .map(|&s| (t.node_count(), s, t.clone()))
                .collect());
        }
        let keys: Vec<(usize, u64)> = self
            .nodes
            .iter()
            .flat_map(|&n| self.seeds.iter().map(move |&s| (n, s)))
            .collect();
        keys.into_par_iter()
            .map(|(n, s)| {
                find_connected_topology(n, self.area, self.radio_range, s, MAX_TOPOLOGY_ATTEMPTS)
                    .map(|t| (n, s, Arc::new(t)))
            })
            .collect()
    }
}

/// Summary of a finished batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub records: Vec<RunRecord>,
    /// Runs on connected topologies that left some node without some packet.
    pub undelivered: usize,
    /// Runs stopped by the tick cap.
    pub stalled: usize,
}

impl BatchReport {
    pub fn ok(&self) -> bool {
        self.undelivered == 0 && self.stalled == 0
    }
}

/// Runs the whole sweep and writes the reports under `c.out`.
pub fn run_batch_report(c: &Config) -> Result<BatchReport> {
    let mut jobs = Vec::new();
    for (nodes, seed, topology) in c.topologies()? {
        let source = c.source.pick(nodes, seed);
        topology.check_node(source)?;
        let connected = is_connected(&topology);
        for &protocol in &c.protocols {
            for &coding in c.coding.settings() {
                jobs.push(Job {
                    topology: topology.clone(),
                    connected,
                    nodes,
                    seed,
                    source,
                    protocol,
                    coding,
                });
            }
        }
    }

    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|job| {
            let (log, metrics) = run_broadcast(&c.scenario(job))?;
            Ok(Outcome {
                record: RunRecord {
                    protocol: job.protocol,
                    nodes: job.nodes,
                    seed: job.seed,
                    coding: job.coding,
                    load: c.load,
                    dt_mode: c.dt_mode,
                    metrics,
                },
                log,
                connected: job.connected,
            })
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&c.out)?;
    if c.emit_log {
        let dir = c.out.join("logs");
        fs::create_dir_all(&dir)?;
        for o in &outcomes {
            let r = &o.record;
            let name = format!(
                "{}_n{}_s{}_{}.log",
                r.protocol,
                r.nodes,
                r.seed,
                if r.coding { "on" } else { "off" }
            );
            write_file(&dir.join(name), &o.log.to_text())?;
        }
    }

    let undelivered = outcomes
        .iter()
        .filter(|o| o.connected && !o.record.metrics.delivery_complete)
        .count();
    let stalled = outcomes
        .iter()
        .filter(|o| !o.record.metrics.quiescent)
        .count();
    let records: Vec<RunRecord> = outcomes.into_iter().map(|o| o.record).collect();
    let summary = aggregate(&records);
    write_file(&c.out.join("runs.csv"), &runs_csv(&records))?;
    write_file(&c.out.join("summary.csv"), &summary_csv(&summary))?;
    write_file(&c.out.join("summary.txt"), &summary_text(&summary))?;

    Ok(BatchReport {
        records,
        undelivered,
        stalled,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Runs the batch and maps the outcome to a process exit code: 0 when every
/// run went quiet and every connected topology was fully delivered, 1 on an
/// invariant violation or error.
pub fn run_batch(c: &Config) -> i32 {
    match run_batch_report(c) {
        Ok(report) => {
            eprintln!(
                "{} runs written to {}",
                report.records.len(),
                c.out.display()
            );
            if report.undelivered > 0 {
                eprintln!(
                    "error: {} runs did not deliver every packet",
                    report.undelivered
                );
            }
            if report.stalled > 0 {
                eprintln!("error: {} runs hit the tick cap", report.stalled);
            }
            i32::from(!report.ok())
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.nodes, vec![40]);
        assert_eq!(c.packets, 9);
        assert_eq!(c.protocols, PruningProtocol::ALL.to_vec());
        assert_eq!(c.coding, CodingSetting::On);
        assert_eq!(c.seeds, (0..100).collect::<Vec<_>>());
        assert_eq!(c.source, SourceRule::Fixed(0));
        assert_eq!(c.thresholds, Thresholds::default());
    }

    #[test]
    fn protocol_subset() {
        let c = parse_args([
            "x",
            "--nodes",
            "40",
            "--source",
            "31",
            "--protocol",
            "dp,tdp,pdp",
        ])
        .unwrap();
        assert_eq!(c.protocols, PruningProtocol::PRUNED.to_vec());
        assert_eq!(c.source, SourceRule::Fixed(31));
    }

    #[test]
    fn gate_out_of_range() {
        let e = parse_args(["x", "--prob-gate", "1.5"]).unwrap_err();
        assert!(e.to_string().contains("out of [0,1]"));
        assert!(parse_args(["x", "--guess", "-0.1"]).is_err());
    }

    #[test]
    fn rejects_unknown_flag_and_bad_values() {
        assert!(parse_args(["x", "--frobnicate"]).is_err());
        assert!(parse_args(["x", "--protocol", "aodv"]).is_err());
        assert!(parse_args(["x", "--nodes", "ten"]).is_err());
        assert!(parse_args(["x", "--timeout", "0"]).is_err());
        assert!(parse_args(["x", "--nodes", "10", "--source", "10"]).is_err());
    }

    #[test]
    fn seed_specs() {
        assert_eq!("3".parse::<SeedSpec>().unwrap().0, vec![0, 1, 2]);
        assert_eq!("5,1,".parse::<SeedSpec>().unwrap().0, vec![5, 1]);
        assert_eq!("10..13".parse::<SeedSpec>().unwrap().0, vec![10, 11, 12]);
        assert!("0".parse::<SeedSpec>().is_err());
        assert!("4..4".parse::<SeedSpec>().is_err());
    }

    #[test]
    fn random_source_is_seeded() {
        let picks: Vec<NodeId> = (0..20).map(|s| SourceRule::Random.pick(40, s)).collect();
        assert!(picks.iter().all(|&v| v < 40));
        assert_eq!(
            picks,
            (0..20)
                .map(|s| SourceRule::Random.pick(40, s))
                .collect::<Vec<_>>()
        );
        assert!(picks.iter().any(|&v| v != picks[0]));
    }

    #[test]
    fn small_batch_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let c = parse_args([
            "x",
            "--nodes",
            "8,12",
            "--seeds",
            "3",
            "--coding",
            "both",
            "--emit-log",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let report = run_batch_report(&c).unwrap();
        assert!(report.ok());
        assert_eq!(report.records.len(), 2 * 3 * 4 * 2);
        let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 1 + report.records.len());
        assert!(out.join("summary.txt").exists());
        assert_eq!(
            fs::read_dir(out.join("logs")).unwrap().count(),
            report.records.len()
        );
        assert_eq!(run_batch(&c), 0);
    }

    #[test]
    fn topology_file_runs() {
        let dir = tempfile::tempdir().unwrap();
        let topo = dir.path().join("path.txt");
        fs::write(&topo, "0 1\n1 2\n2 3\n").unwrap();
        let out = dir.path().join("o");
        let c = parse_args([
            "x",
            "--topology-file",
            topo.to_str().unwrap(),
            "--seeds",
            "2",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let report = run_batch_report(&c).unwrap();
        assert!(report.ok());
        assert!(report.records.iter().all(|r| r.nodes == 4));
    }

    #[test]
    fn disconnected_file_topology_is_not_a_failure() {
        let dir = tempfile::tempdir().unwrap();
        let topo = dir.path().join("split.txt");
        fs::write(&topo, "nodes 4\n0 1\n2 3\n").unwrap();
        let c = parse_args([
            "x",
            "--topology-file",
            topo.to_str().unwrap(),
            "--seeds",
            "1",
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .unwrap();
        let report = run_batch_report(&c).unwrap();
        assert_eq!(report.undelivered, 0);
        assert!(report.records.iter().all(|r| !r.metrics.delivery_complete));
    }
}
