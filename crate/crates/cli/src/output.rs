//! CSV artifacts and the run manifest.
//!
//! Floats are written with 17 significant digits in scientific notation,
//! which round-trips every `f64` exactly and does not depend on locale.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use es_adapt::sim::{EpisodeTrace, IterationRecord};

pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const TRACE_FIRST_FILE: &str = "trace_first.csv";
pub const TRACE_LAST_FILE: &str = "trace_last.csv";
pub const MANIFEST_FILE: &str = "manifest";

pub const TRACE_COLUMNS: [&str; 12] = [
    "t", "q1", "q2", "qdot1", "qdot2", "qd1", "qd2", "qddot_d1", "qddot_d2", "tau1", "tau2", "z_norm",
];

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn iterations_header(p: usize) -> Vec<String> {
    let mut header = vec!["iter".to_string(), "J".to_string()];
    header.extend((1..=p).map(|i| format!("delta_hat_{i}")));
    header.extend((1..=p).map(|i| format!("delta_true_{i}")));
    header.push("max_z".into());
    header
}

pub fn iterations_csv(records: &[IterationRecord]) -> io::Result<Vec<u8>> {
    let p = records.first().map_or(0, |r| r.delta_hat.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(iterations_header(p))?;
    for r in records {
        let mut row = vec![r.k.to_string(), format_float(r.j)];
        row.extend(r.delta_hat.iter().chain(&r.delta_true).map(|&v| format_float(v)));
        row.push(format_float(r.max_z));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

pub fn trace_csv(trace: &EpisodeTrace) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_COLUMNS)?;
    for n in 0..trace.len() {
        let values = [
            trace.t[n],
            trace.q[n][0],
            trace.q[n][1],
            trace.qdot[n][0],
            trace.qdot[n][1],
            trace.qd[n][0],
            trace.qd[n][1],
            trace.qddot_d[n][0],
            trace.qddot_d[n][1],
            trace.tau[n][0],
            trace.tau[n][1],
            trace.z_norm[n],
        ];
        w.write_record(values.iter().map(|&v| format_float(v)))?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Summary of one completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub scenario: String,
    pub config: toml::Table,
    pub artifacts: Vec<PathBuf>,
    pub duration: Duration,
    pub checks: Vec<(String, bool)>,
    pub iterations: usize,
    pub final_j: f64,
    pub final_delta_hat: Vec<f64>,
}

impl RunManifest {
    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }

    /// `key: value` lines.
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("scenario: {}", self.scenario),
            format!("iterations: {}", self.iterations),
            format!("duration_s: {:.3}", self.duration.as_secs_f64()),
            format!("final_J: {}", format_float(self.final_j)),
            format!(
                "final_delta_hat: {}",
                self.final_delta_hat.iter().map(|&v| format_float(v)).collect::<Vec<_>>().join(", ")
            ),
        ];
        for path in &self.artifacts {
            let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
            lines.push(format!("artifact.{name}: {}", path.display()));
        }
        for (name, ok) in &self.checks {
            lines.push(format!("check.{name}: {}", if *ok { "pass" } else { "fail" }));
        }
        flatten("config", &toml::Value::Table(self.config.clone()), &mut lines);
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        other => out.push(format!("{prefix}: {other}")),
    }
}

/// Parses manifest text back into `(key, value)` pairs.
pub fn parse_manifest(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
