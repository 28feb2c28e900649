//! Transmission counts and coding gain.
//!
//! Coding gain is the number of transmissions a run would need without coding
//! divided by the number it actually made. For one size class:
//!
//! - `t_p`: native transmissions needed without coding. Every native send
//!   counts once, and every coded send counts once per native it carries.
//! - `t_ncp`: natives carried inside coded sends.
//! - `coded_sends`: coded transmissions.
//!
//! giving `gain = t_p / ((t_p - t_ncp) + coded_sends)`. With a single coded
//! send this is `t_p / (t_p - t_ncp + 1)`. A coded transmission belongs to the
//! class of its padded length. The overall gain is the mean of the two class
//! gains, and an empty class contributes 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::coding::SizeClass;
use crate::engine::{DtMode, EventKind, EventLog, LoadScenario, WorkloadItem};
use crate::pruning::PruningProtocol;
use crate::{Error, NodeId, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub native_sends: usize,
    pub coded_sends: usize,
    /// Natives carried inside coded sends (`t_ncp`).
    pub coded_natives: usize,
}

impl ClassCounts {
    /// `t_p`.
    pub fn uncoded_equivalent(&self) -> usize {
        self.native_sends + self.coded_natives
    }

    pub fn sends(&self) -> usize {
        self.native_sends + self.coded_sends
    }

    pub fn gain(&self) -> f64 {
        class_gain(
            self.uncoded_equivalent(),
            self.coded_natives,
            self.coded_sends,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub t_p_big: usize,
    pub t_p_small: usize,
    pub t_ncp_big: usize,
    pub t_ncp_small: usize,
    pub coded_sends_big: usize,
    pub coded_sends_small: usize,
    pub native_sends_big: usize,
    pub native_sends_small: usize,
    pub gain_big: f64,
    pub gain_small: f64,
    pub gain_overall: f64,
    /// Distinct non-source nodes that transmitted.
    pub forwarder_count: usize,
    pub delivery_complete: bool,
    pub quiescent: bool,
    pub ticks: u64,
    /// Coverage-set members no candidate could reach, summed over all
    /// forwarding decisions.
    pub uncovered_residue: usize,
}

impl RunMetrics {
    pub fn from_counts(
        big: ClassCounts,
        small: ClassCounts,
        forwarder_count: usize,
        delivery_complete: bool,
        quiescent: bool,
        ticks: u64,
        uncovered_residue: usize,
    ) -> Self {
        let gain_big = big.gain();
        let gain_small = small.gain();
        Self {
            t_p_big: big.uncoded_equivalent(),
            t_p_small: small.uncoded_equivalent(),
            t_ncp_big: big.coded_natives,
            t_ncp_small: small.coded_natives,
            coded_sends_big: big.coded_sends,
            coded_sends_small: small.coded_sends,
            native_sends_big: big.native_sends,
            native_sends_small: small.native_sends,
            gain_big,
            gain_small,
            gain_overall: overall_gain(gain_big, gain_small),
            forwarder_count,
            delivery_complete,
            quiescent,
            ticks,
            uncovered_residue,
        }
    }

    pub fn sends(&self) -> usize {
        self.native_sends_big
            + self.native_sends_small
            + self.coded_sends_big
            + self.coded_sends_small
    }

    pub fn coded_sends(&self) -> usize {
        self.coded_sends_big + self.coded_sends_small
    }

    /// Transmissions the run would have made without coding.
    pub fn uncoded_equivalent(&self) -> usize {
        self.t_p_big + self.t_p_small
    }
}

/// `t_p / ((t_p - t_ncp) + coded_sends)`; 1 for an empty class.
pub fn class_gain(t_p: usize, t_ncp: usize, coded_sends: usize) -> f64 {
    debug_assert!(t_ncp <= t_p);
    if t_p == 0 {
        return 1.0;
    }
    t_p as f64 / ((t_p - t_ncp) + coded_sends) as f64
}

pub fn overall_gain(gain_big: f64, gain_small: f64) -> f64 {
    (gain_big + gain_small) / 2.0
}

/// Send-side counts recomputed from an event log alone.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMetrics {
    pub big: ClassCounts,
    pub small: ClassCounts,
    pub gain_big: f64,
    pub gain_small: f64,
    pub gain_overall: f64,
    pub forwarder_count: usize,
}

impl LogMetrics {
    /// Exact agreement with the engine's incrementally kept counters.
    pub fn matches(&self, m: &RunMetrics) -> bool {
        self.big.uncoded_equivalent() == m.t_p_big
            && self.small.uncoded_equivalent() == m.t_p_small
            && self.big.coded_natives == m.t_ncp_big
            && self.small.coded_natives == m.t_ncp_small
            && self.big.coded_sends == m.coded_sends_big
            && self.small.coded_sends == m.coded_sends_small
            && self.big.native_sends == m.native_sends_big
            && self.small.native_sends == m.native_sends_small
            && self.gain_big == m.gain_big
            && self.gain_small == m.gain_small
            && self.gain_overall == m.gain_overall
            && self.forwarder_count == m.forwarder_count
    }
}

/// Recounts every send in `log`. Native lengths come from the workload
/// (packet id `i` is workload item `i`); a coded send's class follows the
/// longest constituent.
pub fn gain_from_log(
    log: &EventLog,
    workload: &[WorkloadItem],
    small_threshold: usize,
) -> Result<LogMetrics> {
    let mut big = ClassCounts::default();
    let mut small = ClassCounts::default();
    let origins: BTreeSet<NodeId> = workload.iter().map(|w| w.origin).collect();
    let mut forwarders = BTreeSet::new();

    for (line, e) in log.events.iter().enumerate() {
        if !e.kind.is_send() {
            continue;
        }
        let mut longest = 0;
        for id in &e.packets {
            let item = workload
                .get(id.0 as usize)
                .ok_or_else(|| Error::MalformedLog {
                    line: line + 1,
                    message: format!("packet {id} not in workload"),
                })?;
            longest = longest.max(item.length);
        }
        let class = match SizeClass::of(longest, small_threshold) {
            SizeClass::Large => &mut big,
            SizeClass::Small => &mut small,
        };
        match e.kind {
            EventKind::SendNative => {
                if e.packets.len() != 1 {
                    return Err(Error::MalformedLog {
                        line: line + 1,
                        message: "native send must carry one packet".into(),
                    });
                }
                class.native_sends += 1;
            }
            _ => {
                if e.packets.len() < 2 {
                    return Err(Error::MalformedLog {
                        line: line + 1,
                        message: "coded send must carry at least two packets".into(),
                    });
                }
                class.coded_sends += 1;
                class.coded_natives += e.packets.len();
            }
        }
        if !origins.contains(&e.actor) {
            forwarders.insert(e.actor);
        }
    }

    let gain_big = big.gain();
    let gain_small = small.gain();
    Ok(LogMetrics {
        big,
        small,
        gain_big,
        gain_small,
        gain_overall: overall_gain(gain_big, gain_small),
        forwarder_count: forwarders.len(),
    })
}

/// One run's identity and results, as written to the per-run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub protocol: PruningProtocol,
    pub nodes: usize,
    pub seed: u64,
    pub coding: bool,
    pub load: LoadScenario,
    pub dt_mode: DtMode,
    pub metrics: RunMetrics,
}

pub const RUN_CSV_HEADER: &str =
    "protocol,nodes,seed,coding,load,dt_mode,sends,forwarders,gain_big,gain_small,gain_overall,delivered";

impl RunRecord {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.protocol,
            self.nodes,
            self.seed,
            on_off(self.coding),
            self.load,
            self.dt_mode,
            m.sends(),
            m.forwarder_count,
            m.gain_big,
            m.gain_small,
            m.gain_overall,
            m.delivery_complete,
        )
    }

    pub fn key(&self) -> GroupKey {
        GroupKey {
            protocol: self.protocol,
            nodes: self.nodes,
            coding: self.coding,
            load: self.load,
            dt_mode: self.dt_mode,
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub protocol: PruningProtocol,
    pub nodes: usize,
    pub coding: bool,
    pub load: LoadScenario,
    pub dt_mode: DtMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut sum, mut n) = (0.0, 0usize);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            sum += v;
            n += 1;
            min = min.min(v);
            max = max.max(v);
        }
        Self {
            mean: sum / n as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub runs: usize,
    pub delivered: usize,
    pub sends: Stat,
    pub forwarders: Stat,
    pub gain_big: Stat,
    pub gain_small: Stat,
    pub gain_overall: Stat,
}

/// Mean/min/max per `(protocol, nodes, coding, load, dt_mode)` group, in key order.
pub fn aggregate(records: &[RunRecord]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunMetrics>> = BTreeMap::new();
    for r in records {
        groups.entry(r.key()).or_default().push(&r.metrics);
    }
    groups
        .into_iter()
        .map(|(key, ms)| GroupSummary {
            key,
            runs: ms.len(),
            delivered: ms.iter().filter(|m| m.delivery_complete).count(),
            sends: Stat::of(ms.iter().map(|m| m.sends() as f64)),
            forwarders: Stat::of(ms.iter().map(|m| m.forwarder_count as f64)),
            gain_big: Stat::of(ms.iter().map(|m| m.gain_big)),
            gain_small: Stat::of(ms.iter().map(|m| m.gain_small)),
            gain_overall: Stat::of(ms.iter().map(|m| m.gain_overall)),
        })
        .collect()
}

pub const SUMMARY_CSV_HEADER: &str = "protocol,nodes,coding,load,dt_mode,runs,delivered,\
sends_mean,sends_min,sends_max,forwarders_mean,forwarders_min,forwarders_max,\
gain_big_mean,gain_small_mean,gain_overall_mean,gain_overall_min,gain_overall_max";

pub fn summary_csv(summary: &[GroupSummary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for g in summary {
        let k = &g.key;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            k.protocol,
            k.nodes,
            on_off(k.coding),
            k.load,
            k.dt_mode,
            g.runs,
            g.delivered,
            g.sends.mean,
            g.sends.min,
            g.sends.max,
            g.forwarders.mean,
            g.forwarders.min,
            g.forwarders.max,
            g.gain_big.mean,
            g.gain_small.mean,
            g.gain_overall.mean,
            g.gain_overall.min,
            g.gain_overall.max,
        );
    }
    out
}

/// Text tables with node counts as rows and protocols as columns, one table
/// of mean coding gain per (load, delay-tolerance) pair with coding on, and
/// one table of mean forwarder counts.
pub fn summary_text(summary: &[GroupSummary]) -> String {
    let mut out = String::new();
    let protocols: BTreeSet<PruningProtocol> = summary.iter().map(|g| g.key.protocol).collect();
    let nodes: BTreeSet<usize> = summary.iter().map(|g| g.key.nodes).collect();
    let regimes: BTreeSet<(LoadScenario, DtMode)> = summary
        .iter()
        .map(|g| (g.key.load, g.key.dt_mode))
        .collect();

    let cell = |n: usize,
                p: PruningProtocol,
                load,
                dt,
                coding: bool,
                pick: &dyn Fn(&GroupSummary) -> f64| {
        summary
            .iter()
            .find(|g| {
                g.key.nodes == n
                    && g.key.protocol == p
                    && g.key.load == load
                    && g.key.dt_mode == dt
                    && g.key.coding == coding
            })
            .map(pick)
    };

    let table = |out: &mut String,
                 title: String,
                 coding: bool,
                 load,
                 dt,
                 pick: &dyn Fn(&GroupSummary) -> f64| {
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:>8}", "nodes");
        for p in &protocols {
            let _ = write!(out, "{:>10}", p.as_str().to_uppercase());
        }
        out.push('\n');
        for &n in &nodes {
            let _ = write!(out, "{n:>8}");
            for &p in &protocols {
                match cell(n, p, load, dt, coding, pick) {
                    Some(v) => {
                        let _ = write!(out, "{v:>10.4}");
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    };

    for &(load, dt) in &regimes {
        if summary
            .iter()
            .any(|g| g.key.coding && g.key.load == load && g.key.dt_mode == dt)
        {
            let title = format!("Coding gain, {load} load, {dt} delay tolerance (mean over runs)");
            table(&mut out, title, true, load, dt, &|g| g.gain_overall.mean);
        }
        if summary
            .iter()
            .any(|g| !g.key.coding && g.key.load == load && g.key.dt_mode == dt)
        {
            let title =
                format!("Forward nodes, {load} load, {dt} delay tolerance, coding off (mean)");
            table(&mut out, title, false, load, dt, &|g| g.forwarders.mean);
        }
    }
    out
}
