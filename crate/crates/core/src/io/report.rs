//! Per-batch JSONL logs and the accuracy / macro-F1 summary tables.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::ProtocolResult;
use crate::error::{Error, Result};
use crate::metrics::BenchReport;

#[derive(Serialize)]
struct RecordLine<'a> {
    method: String,
    group: &'a str,
    seed: u64,
    domain: &'a str,
    batch: usize,
    predictions: &'a [usize],
    labels: &'a [usize],
    entropies: &'a [f32],
    ms: f64,
}

/// One JSON object per batch, for every seed and domain of `result`.
pub fn write_records(out: &mut impl std::io::Write, group: &str, result: &ProtocolResult) -> std::io::Result<()> {
    for run in &result.runs {
        for d in &run.domains {
            for r in &d.records {
                let line = RecordLine {
                    method: result.method.to_string(),
                    group,
                    seed: run.seed,
                    domain: &r.domain,
                    batch: r.index,
                    predictions: &r.predictions,
                    labels: &r.labels,
                    entropies: &r.entropies,
                    ms: r.ms,
                };
                serde_json::to_writer(&mut *out, &line)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn write_records_file(path: &Path, results: &[(String, ProtocolResult)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (group, r) in results {
        write_records(&mut w, group, r).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and std over seeds, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn pct((mean, std): (f64, f64)) -> Self {
        Self {
            mean: 100.0 * mean,
            std: 100.0 * std,
        }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ({:.2})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    /// `all` for leave-one-out runs, the source domain for continual runs.
    pub group: String,
    pub domains: Vec<String>,
    pub accuracy: Vec<Stat>,
    pub macro_f1: Vec<Stat>,
    pub avg_accuracy: Stat,
    pub avg_macro_f1: Stat,
    pub seeds: usize,
}

impl SummaryRow {
    pub fn from_result(group: &str, r: &ProtocolResult) -> Self {
        let n = r.subjects.len();
        Self {
            method: r.method.to_string(),
            group: group.to_string(),
            domains: r.subjects.clone(),
            accuracy: (0..n).map(|i| Stat::pct(r.domain_stat(i, |s| s.accuracy))).collect(),
            macro_f1: (0..n).map(|i| Stat::pct(r.domain_stat(i, |s| s.macro_f1))).collect(),
            avg_accuracy: Stat::pct(r.average_stat(|s| s.accuracy)),
            avg_macro_f1: Stat::pct(r.average_stat(|s| s.macro_f1)),
            seeds: r.runs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    /// Plain-text table: one accuracy and one macro-F1 line per row, mean
    /// (std over seeds) in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "protocol: {}  seeds: {}", self.protocol, seeds.join(","));
        let mut last_group = None;
        for row in &self.rows {
            if last_group != Some(&row.group) {
                let _ = write!(s, "\n{:<14} {:<6}", format!("[{}]", row.group), "metric");
                for d in &row.domains {
                    let _ = write!(s, " {:>15}", d);
                }
                let _ = writeln!(s, " {:>15}", "avg");
                last_group = Some(&row.group);
            }
            for (name, cells, avg) in [
                ("acc", &row.accuracy, row.avg_accuracy),
                ("mf1", &row.macro_f1, row.avg_macro_f1),
            ] {
                let _ = write!(s, "{:<14} {:<6}", row.method, name);
                for c in cells {
                    let _ = write!(s, " {:>15}", c.to_string());
                }
                let _ = writeln!(s, " {:>15}", avg.to_string());
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

pub fn bench_table(report: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "batch size {}, {} timed batches, {} repetitions (warm-up batch excluded)",
        report.batch_size, report.batches_timed, report.repetitions
    );
    let _ = writeln!(s, "forward baseline: {:.3} ms/batch", report.forward_baseline_ms);
    let _ = writeln!(s, "{:<14} {:>12} {:>10} {:>6} {:>22}", "method", "ms/batch", "std", "runs", "support bytes (>=)");
    for m in &report.methods {
        let _ = writeln!(
            s,
            "{:<14} {:>12.3} {:>10.3} {:>6} {:>22}",
            m.method.to_string(),
            m.mean_ms,
            m.std_ms,
            m.runs,
            m.support_bytes
        );
    }
    s
}
