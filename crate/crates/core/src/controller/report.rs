use std::io;

use serde::{Deserialize, Serialize};

use super::ledger::RunLedger;
use crate::ids::NodeId;

pub const REPORT_HEADER: [&str; 12] = [
    "config",
    "node",
    "round",
    "f1",
    "loss",
    "cpu_pct",
    "ram_pct",
    "net_bytes",
    "throughput_mbps",
    "latency_ms",
    "loss_pct",
    "ctrl_overhead_pct",
];

/// One `(node, round)` line of the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub node: NodeId,
    pub round: u32,
    pub f1: f64,
    pub loss: f64,
    pub cpu_pct: Option<f64>,
    pub ram_pct: Option<f64>,
    pub net_bytes: u64,
    pub throughput_mbps: f64,
    pub latency_ms: f64,
    pub loss_pct: f64,
    pub ctrl_overhead_pct: f64,
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64 * 100.0
    }
}

/// Flattens a ledger into report rows labelled `config`.
pub fn report_rows(config: &str, ledger: &RunLedger) -> Vec<ReportRow> {
    ledger
        .reports()
        .map(|r| {
            let net_bytes = r.bytes_sent + r.bytes_recv;
            let throughput_mbps = match r.wall_ms {
                Some(w) if w > 0.0 => net_bytes as f64 * 8.0 / (w * 1000.0),
                _ => 0.0,
            };
            ReportRow {
                config: config.to_string(),
                node: r.node_id,
                round: r.round,
                f1: r.f1,
                loss: r.loss,
                cpu_pct: r.cpu_pct,
                ram_pct: r.ram_pct,
                net_bytes,
                throughput_mbps,
                latency_ms: r.latency_ms.unwrap_or(0.0),
                loss_pct: pct(r.frames_lost.unwrap_or(0), r.frames_sent.unwrap_or(0)),
                ctrl_overhead_pct: pct(r.ctrl_bytes.unwrap_or(0), r.bytes_sent),
            }
        })
        .collect()
}

pub fn write_report_csv<W: io::Write>(rows: &[ReportRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(REPORT_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: io::Read>(input: R) -> csv::Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    if headers.iter().ne(REPORT_HEADER) {
        return Err(csv::Error::from(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected report header: {}", headers.iter().collect::<Vec<_>>().join(",")),
        )));
    }
    rd.deserialize().collect()
}
