//! results.csv, summary.json, traces/*.jsonl and plots/*.svg.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{plot, summarize, CellSummary, Knob, RunMetrics, SweepResult};
use crate::engine::trace::{read_jsonl, write_jsonl};
use crate::engine::{Scheme, TraceRecord};
use crate::error::BenchError;

pub const RESULTS_SCHEMA: &str = "specreason-results-v1";

/// One results.csv row. Column order is part of the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema: String,
    pub scheme: Scheme,
    pub knob: Knob,
    pub value: u64,
    pub trajectories: usize,
    pub failed: usize,
    pub pass_at_1: Option<f64>,
    pub mean_latency_s: f64,
    pub median_latency_s: f64,
    pub mean_accepted_fraction: Option<f64>,
    pub mean_thinking_tokens: f64,
    pub median_thinking_tokens: f64,
    pub mean_rejected: f64,
    pub budget_exhausted_fraction: f64,
}

impl From<&CellSummary> for ResultRow {
    fn from(c: &CellSummary) -> Self {
        ResultRow {
            schema: RESULTS_SCHEMA.into(),
            scheme: c.scheme,
            knob: c.knob,
            value: c.value,
            trajectories: c.trajectories,
            failed: c.failed,
            pass_at_1: c.pass_at_1,
            mean_latency_s: c.mean_latency_s,
            median_latency_s: c.median_latency_s,
            mean_accepted_fraction: c.mean_accepted_fraction,
            mean_thinking_tokens: c.mean_thinking_tokens,
            median_thinking_tokens: c.median_thinking_tokens,
            mean_rejected: c.mean_rejected,
            budget_exhausted_fraction: c.budget_exhausted_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupEntry {
    pub scheme: Scheme,
    pub value: u64,
    pub speedup_vs_base_only: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub knob: Knob,
    pub values: Vec<u64>,
    pub repeats: usize,
    pub schemes: Vec<Scheme>,
    pub cells: Vec<CellSummary>,
    pub speedups: Vec<SpeedupEntry>,
}

pub fn trace_file_name(scheme: Scheme, knob: Knob, value: u64) -> String {
    format!("{scheme}_{knob}_{value}.jsonl")
}

pub fn summary_of(result: &SweepResult) -> Summary {
    Summary {
        schema: RESULTS_SCHEMA.into(),
        knob: result.spec.knob,
        values: result.spec.values.clone(),
        repeats: result.spec.repeats,
        schemes: result.schemes.clone(),
        cells: result.cells.iter().map(|c| c.summary.clone()).collect(),
        speedups: result
            .speedups()
            .into_iter()
            .map(|(scheme, value, s)| SpeedupEntry {
                scheme,
                value,
                speedup_vs_base_only: s,
            })
            .collect(),
    }
}

/// Write every artifact of a sweep under `dir`.
pub fn write_outputs(dir: &Path, result: &SweepResult) -> Result<(), BenchError> {
    fs::create_dir_all(dir.join("traces"))?;
    fs::create_dir_all(dir.join("plots"))?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for c in &result.cells {
        w.serialize(ResultRow::from(&c.summary))?;
    }
    w.flush()?;
    for c in &result.cells {
        let s = &c.summary;
        let f = fs::File::create(dir.join("traces").join(trace_file_name(s.scheme, s.knob, s.value)))?;
        write_jsonl(BufWriter::new(f), &c.traces)?;
    }
    let summary = summary_of(result);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let rows: Vec<ResultRow> = result.cells.iter().map(|c| ResultRow::from(&c.summary)).collect();
    fs::write(dir.join("plots").join("latency_accuracy.svg"), plot::latency_accuracy_svg(&rows))?;
    fs::write(dir.join("plots").join("latency_accuracy.dat"), plot::latency_accuracy_dat(&rows))?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.schema != RESULTS_SCHEMA) {
        return Err(BenchError::MismatchedRunSets(format!(
            "{}: unsupported schema {:?}",
            path.display(),
            bad.schema
        )));
    }
    Ok(rows)
}

/// Rebuild every cell summary from the metrics records in `dir/traces`.
pub fn recompute_from_traces(dir: &Path, repeats: usize) -> Result<Vec<CellSummary>, BenchError> {
    let mut cells: BTreeMap<(Scheme, Knob, u64), Vec<RunMetrics>> = BTreeMap::new();
    let mut paths: Vec<_> = fs::read_dir(dir.join("traces"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.sort();
    for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "jsonl")) {
        for rec in read_jsonl(BufReader::new(fs::File::open(&p)?))? {
            if let TraceRecord::Metrics(m) = rec {
                let (Some(k), Some(v)) = (m.knob, m.value) else {
                    continue;
                };
                cells.entry((m.scheme, k, v)).or_default().push(m);
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|((s, k, v), runs)| summarize(s, k, v, &runs, repeats))
        .collect())
}

/// Per-cell differences `b - a` for cells present in both tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub scheme: Scheme,
    pub knob: Knob,
    pub value: u64,
    pub pass_at_1_a: Option<f64>,
    pub pass_at_1_b: Option<f64>,
    pub delta_pass_at_1: Option<f64>,
    pub mean_latency_a: f64,
    pub mean_latency_b: f64,
    pub delta_latency_s: f64,
    pub latency_ratio: f64,
}

pub fn compare_results(a: &[ResultRow], b: &[ResultRow]) -> Result<Vec<DeltaRow>, BenchError> {
    let index: BTreeMap<(Scheme, Knob, u64), &ResultRow> = b.iter().map(|r| ((r.scheme, r.knob, r.value), r)).collect();
    let out: Vec<DeltaRow> = a
        .iter()
        .filter_map(|ra| {
            let rb = index.get(&(ra.scheme, ra.knob, ra.value))?;
            Some(DeltaRow {
                scheme: ra.scheme,
                knob: ra.knob,
                value: ra.value,
                pass_at_1_a: ra.pass_at_1,
                pass_at_1_b: rb.pass_at_1,
                delta_pass_at_1: ra.pass_at_1.zip(rb.pass_at_1).map(|(x, y)| y - x),
                mean_latency_a: ra.mean_latency_s,
                mean_latency_b: rb.mean_latency_s,
                delta_latency_s: rb.mean_latency_s - ra.mean_latency_s,
                latency_ratio: rb.mean_latency_s / ra.mean_latency_s,
            })
        })
        .collect();
    if out.is_empty() {
        return Err(BenchError::MismatchedRunSets("the two tables share no cells".into()));
    }
    Ok(out)
}
