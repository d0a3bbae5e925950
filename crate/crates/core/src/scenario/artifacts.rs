use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::run::{RunOutput, RunStatus};
use super::ScenarioError;
use crate::adversary::write_outcome_csv;
use crate::controller::write_report_csv;

pub const REPORT_FILE: &str = "report.csv";
pub const LINKS_FILE: &str = "links.csv";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "scenario.toml";
pub const ATTACK_FILE: &str = "attack_outcome.csv";
pub const CAPTURE_FILE: &str = "capture.jsonl";
/// Present only next to the artifacts of an aborted run.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

pub fn node_file(node: crate::ids::NodeId) -> String {
    format!("node-{node}.json")
}

/// File names a run writes, in writing order.
pub fn declared_artifacts(out: &RunOutput) -> Vec<String> {
    let mut names = vec![
        CONFIG_FILE.to_string(),
        REPORT_FILE.to_string(),
        LINKS_FILE.to_string(),
        SUMMARY_FILE.to_string(),
    ];
    if out.frames.is_some() {
        names.push(FRAMES_FILE.to_string());
    }
    names.extend(out.nodes.iter().map(|n| node_file(n.node)));
    if out.attack.is_some() {
        names.push(ATTACK_FILE.to_string());
        names.push(CAPTURE_FILE.to_string());
    }
    names
}

/// Writes `bytes` next to `path` and renames it into place, so readers
/// never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> ScenarioError + '_ {
    move |e| ScenarioError::Io(format!("{}: {e}", path.display()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, ScenarioError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| ScenarioError::Io(e.to_string()))?;
    Ok(buf)
}

fn json_lines<T: serde::Serialize>(items: &[T]) -> Result<Vec<u8>, ScenarioError> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|e| ScenarioError::Io(e.to_string()))?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn json_pretty<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, ScenarioError> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| ScenarioError::Io(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

/// Writes the declared artifact set into `dir`. An aborted run also gets
/// the [`INCOMPLETE_MARKER`] file holding the reason; a clean run removes a
/// stale one.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    if let RunStatus::Aborted { reason } = out.status() {
        write_atomic(&marker, format!("{reason}\n").as_bytes()).map_err(io_err(&marker))?;
    }
    let mut written = Vec::new();
    for name in declared_artifacts(out) {
        let bytes = match name.as_str() {
            CONFIG_FILE => out.config.to_toml()?.into_bytes(),
            REPORT_FILE => csv_bytes(|b| write_report_csv(&out.rows, b))?,
            LINKS_FILE => csv_bytes(|b| out.stats.write_csv(b))?,
            SUMMARY_FILE => json_pretty(&out.summary)?,
            FRAMES_FILE => json_lines(out.frames.as_deref().unwrap_or_default())?,
            ATTACK_FILE => csv_bytes(|b| write_outcome_csv(out.attack.as_slice(), b))?,
            CAPTURE_FILE => {
                let mut b = Vec::new();
                if let Some(c) = &out.capture {
                    c.write_jsonl(&mut b).map_err(|e| ScenarioError::Io(e.to_string()))?;
                }
                b
            }
            _ => {
                let n = out
                    .nodes
                    .iter()
                    .find(|n| node_file(n.node) == name)
                    .expect("declared node file");
                json_pretty(n)?
            }
        };
        let path = dir.join(&name);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    if !matches!(out.status(), RunStatus::Aborted { .. }) && marker.exists() {
        fs::remove_file(&marker).map_err(io_err(&marker))?;
    }
    Ok(written)
}
