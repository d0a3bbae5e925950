use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::write_atomic;
use super::ScenarioError;
use crate::adversary::write_threat_matrix;
use crate::controller::{read_report_csv, ReportRow};
use crate::ids::SecuritySetting;

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const CURVE_FILE: &str = "f1_curve.csv";
pub const THREAT_FILE: &str = "threat_matrix.csv";

/// Relative tolerance below which a delta counts as no change.
const FLAT: f64 = 1e-12;

/// Aggregates of one run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregate {
    pub config: String,
    pub nodes: usize,
    pub rounds: usize,
    pub final_f1: f64,
    pub final_f1_sd: f64,
    pub net_mb: f64,
    pub latency_ms: f64,
    pub loss_pct: f64,
    pub ctrl_overhead_pct: f64,
    pub cpu_pct: Option<f64>,
    pub ram_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Same,
}

impl Direction {
    pub fn of(delta: f64, scale: f64) -> Self {
        if delta.abs() <= FLAT * scale.abs().max(1.0) {
            Direction::Same
        } else if delta > 0.0 {
            Direction::Up
        } else {
            Direction::Down
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Same => "same",
        }
    }
}

/// One comparison line: aggregates plus deltas against the first line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    #[serde(flatten)]
    pub agg: ReportAggregate,
    pub delta_f1: f64,
    pub delta_net_mb: f64,
    pub delta_ctrl_overhead_pct: f64,
    pub delta_latency_ms: f64,
    pub f1_dir: Direction,
    pub net_dir: Direction,
    pub ctrl_dir: Direction,
    pub latency_dir: Direction,
}

/// F1-vs-round point for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub config: String,
    pub round: u32,
    pub nodes: usize,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub curve: Vec<CurvePoint>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs.iter().copied());
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

fn optional_mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean(v.into_iter()))
}

pub fn aggregate(rows: &[ReportRow]) -> Result<ReportAggregate, ScenarioError> {
    let first = rows
        .first()
        .ok_or_else(|| ScenarioError::Schema("report has no rows".into()))?;
    if rows.iter().any(|r| r.config != first.config) {
        return Err(ScenarioError::Schema(format!(
            "report mixes configurations ({} and others)",
            first.config
        )));
    }
    let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
    let finals: Vec<f64> = rows.iter().filter(|r| r.round == last).map(|r| r.f1).collect();
    let (final_f1, final_f1_sd) = mean_sd(&finals);
    let mut nodes: Vec<_> = rows.iter().map(|r| r.node).collect();
    nodes.sort();
    nodes.dedup();
    let mut rounds: Vec<_> = rows.iter().map(|r| r.round).collect();
    rounds.sort();
    rounds.dedup();
    Ok(ReportAggregate {
        config: first.config.clone(),
        nodes: nodes.len(),
        rounds: rounds.len(),
        final_f1,
        final_f1_sd,
        net_mb: rows.iter().map(|r| r.net_bytes).sum::<u64>() as f64 / 1e6,
        latency_ms: mean(rows.iter().map(|r| r.latency_ms)),
        loss_pct: mean(rows.iter().map(|r| r.loss_pct)),
        ctrl_overhead_pct: mean(rows.iter().map(|r| r.ctrl_overhead_pct)),
        cpu_pct: optional_mean(rows.iter().map(|r| r.cpu_pct)),
        ram_pct: optional_mean(rows.iter().map(|r| r.ram_pct)),
    })
}

fn rank(config: &str) -> usize {
    SecuritySetting::ALL
        .iter()
        .position(|s| s.as_str() == config)
        .unwrap_or(SecuritySetting::ALL.len())
}

fn curve(rows: &[ReportRow]) -> Vec<CurvePoint> {
    let mut by_round: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_round.entry(r.round).or_default().push(r.f1);
    }
    by_round
        .into_iter()
        .map(|(round, f1s)| {
            let (f1_mean, f1_sd) = mean_sd(&f1s);
            CurvePoint {
                config: rows[0].config.clone(),
                round,
                nodes: f1s.len(),
                f1_mean,
                f1_sd,
            }
        })
        .collect()
}

/// Orders reports Baseline, Encryption, EncryptionMtd (unknown labels
/// last, input order otherwise) and takes deltas against the first.
pub fn compare_reports(reports: &[Vec<ReportRow>]) -> Result<Comparison, ScenarioError> {
    if reports.len() < 2 {
        return Err(ScenarioError::Schema("at least two reports are needed".into()));
    }
    let mut aggs = reports
        .iter()
        .map(|r| Ok((aggregate(r)?, curve(r))))
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    aggs.sort_by_key(|(a, _)| rank(&a.config));
    let base = aggs[0].0.clone();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (agg, c) in aggs {
        let d_f1 = agg.final_f1 - base.final_f1;
        let d_net = agg.net_mb - base.net_mb;
        let d_ctrl = agg.ctrl_overhead_pct - base.ctrl_overhead_pct;
        let d_lat = agg.latency_ms - base.latency_ms;
        rows.push(ComparisonRow {
            f1_dir: Direction::of(d_f1, base.final_f1),
            net_dir: Direction::of(d_net, base.net_mb),
            ctrl_dir: Direction::of(d_ctrl, base.ctrl_overhead_pct),
            latency_dir: Direction::of(d_lat, base.latency_ms),
            delta_f1: d_f1,
            delta_net_mb: d_net,
            delta_ctrl_overhead_pct: d_ctrl,
            delta_latency_ms: d_lat,
            agg,
        });
        points.extend(c);
    }
    Ok(Comparison { rows, curve: points })
}

pub fn load_report(path: &Path) -> Result<Vec<ReportRow>, ScenarioError> {
    let f = fs::File::open(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    read_report_csv(f).map_err(|e| ScenarioError::Schema(format!("{}: {e}", path.display())))
}

impl Comparison {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "config",
            "nodes",
            "rounds",
            "final_f1",
            "final_f1_sd",
            "net_mb",
            "latency_ms",
            "loss_pct",
            "ctrl_overhead_pct",
            "cpu_pct",
            "ram_pct",
            "delta_f1",
            "delta_net_mb",
            "delta_ctrl_overhead_pct",
            "delta_latency_ms",
            "f1_dir",
            "net_dir",
            "ctrl_dir",
            "latency_dir",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let a = &r.agg;
            w.write_record([
                a.config.clone(),
                a.nodes.to_string(),
                a.rounds.to_string(),
                a.final_f1.to_string(),
                a.final_f1_sd.to_string(),
                a.net_mb.to_string(),
                a.latency_ms.to_string(),
                a.loss_pct.to_string(),
                a.ctrl_overhead_pct.to_string(),
                opt(a.cpu_pct),
                opt(a.ram_pct),
                r.delta_f1.to_string(),
                r.delta_net_mb.to_string(),
                r.delta_ctrl_overhead_pct.to_string(),
                r.delta_latency_ms.to_string(),
                r.f1_dir.as_str().into(),
                r.net_dir.as_str().into(),
                r.ctrl_dir.as_str().into(),
                r.latency_dir.as_str().into(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format: one `(config, round)` point per line.
    pub fn write_curve_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.curve {
            w.serialize(p)?;
        }
        if self.curve.is_empty() {
            w.write_record(["config", "round", "nodes", "f1_mean", "f1_sd"])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>5} {:>6} {:>8} {:>10} {:>8} {:>9} {:>9} {:>10}",
            "config", "nodes", "rounds", "F1", "net MB", "ctrl %", "dF1", "dMB", "dctrl %"
        );
        for r in &self.rows {
            let a = &r.agg;
            let _ = writeln!(
                s,
                "{:<14} {:>5} {:>6} {:>8.4} {:>10.3} {:>8.3} {:>+9.4} {:>+9.3} {:>+10.3}",
                a.config,
                a.nodes,
                a.rounds,
                a.final_f1,
                a.net_mb,
                a.ctrl_overhead_pct,
                r.delta_f1,
                r.delta_net_mb,
                r.delta_ctrl_overhead_pct
            );
        }
        s
    }
}

/// Loads reports, compares them and, with `out`, writes the comparison,
/// the F1 curve and the threat matrix there.
pub fn compare_runs(paths: &[PathBuf], out: Option<&Path>) -> Result<Comparison, ScenarioError> {
    let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_reports(&reports)?;
    if let Some(dir) = out {
        write_comparison(&cmp, dir)?;
    }
    Ok(cmp)
}

pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<(), ScenarioError> {
    let io = |p: &Path, e: String| ScenarioError::Io(format!("{}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(dir, e.to_string()))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut b = Vec::new();
    cmp.write_csv(&mut b).map_err(|e| io(dir, e.to_string()))?;
    files.push((COMPARISON_FILE, b));
    let mut b = Vec::new();
    cmp.write_curve_csv(&mut b).map_err(|e| io(dir, e.to_string()))?;
    files.push((CURVE_FILE, b));
    let mut b = Vec::new();
    write_threat_matrix(&mut b).map_err(|e| io(dir, e.to_string()))?;
    files.push((THREAT_FILE, b));
    for (name, bytes) in files {
        let p = dir.join(name);
        write_atomic(&p, &bytes).map_err(|e| io(&p, e.to_string()))?;
    }
    Ok(())
}
