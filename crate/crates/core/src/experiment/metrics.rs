//! JSON-lines round metrics and the end-of-run summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::cohort::CommunitySet;
use crate::cost::MemoryBreakdown;
use crate::error::Result;
use crate::orchestrator::{ExperimentReport, RoundRecord, StageSummary};

pub const SCHEMA: &str = "smartfreeze.metrics";
pub const SCHEMA_VERSION: u32 = 1;

/// Append-only writer: a header line, then one JSON object per round.
/// Every line is flushed as written, so any prefix of the file parses.
pub struct MetricsSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsSink {
    pub fn create(path: &Path, kind: &str, seed: u64) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut sink = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
        };
        sink.line(&json!({ "schema": SCHEMA, "version": SCHEMA_VERSION, "kind": kind, "seed": seed }))?;
        Ok(sink)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn record(&mut self, r: &RoundRecord) -> Result<()> {
        self.line(r)
    }
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub schema: &'static str,
    pub version: u32,
    pub kind: &'a str,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub total_simulated_seconds: f64,
    pub full_training_memory: MemoryBreakdown,
    pub stages: &'a [StageSummary],
    pub communities: Option<&'a CommunitySet>,
    pub memory_wall: bool,
    pub aborted: Option<&'a str>,
}

impl<'a> Summary<'a> {
    pub fn of(report: &'a ExperimentReport, seed: u64) -> Self {
        Self {
            schema: SCHEMA,
            version: SCHEMA_VERSION,
            kind: &report.kind,
            seed,
            rounds: report.records.len(),
            final_accuracy: report.final_accuracy,
            total_simulated_seconds: report.total_seconds,
            full_training_memory: report.full_training_memory,
            stages: &report.stages,
            communities: report.communities.as_ref(),
            memory_wall: report.memory_wall,
            aborted: report.aborted.as_deref(),
        }
    }
}

pub fn write_summary(path: &Path, report: &ExperimentReport, seed: u64) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Summary::of(report, seed))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse every complete line of a metrics file (header included).
pub fn read_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut sink = MetricsSink::create(&path, "test", 4).unwrap();
        sink.line(&json!({"round": 1})).unwrap();
        drop(sink);
        let lines = read_lines(&path).unwrap();
        assert_eq!(lines[0]["schema"], SCHEMA);
        assert_eq!(lines[0]["version"], 1);
        assert_eq!(lines[1]["round"], 1);
    }
}
