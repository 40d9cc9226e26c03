//! Experiment runner: seed-aligned sweeps, k-sample accuracy and latency
//! aggregation.

pub mod output;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::engine::{run_scheme, Scheme, StepAction, TraceRecord, TrajectoryResult};
use crate::error::BenchError;
use crate::simlab::{mix, ChainTask};
use crate::types::{AcceptanceThreshold, EngineConfig, Tokens};

pub use output::{compare_results, read_results_csv, recompute_from_traces, write_outputs};

/// A problem and its reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    pub answer: String,
}

impl Problem {
    pub fn from_chain(id: impl Into<String>, task: &ChainTask) -> Self {
        Problem {
            id: id.into(),
            prompt: task.render(),
            answer: task.answer().to_string(),
        }
    }
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());

/// The last number in the answer text must equal the reference.
pub fn grade(answer_text: &str, expected: &str) -> bool {
    NUMBER
        .find_iter(answer_text)
        .last()
        .is_some_and(|m| m.as_str() == expected.trim())
}

/// Measurements of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub problem: String,
    pub scheme: Scheme,
    pub knob: Option<Knob>,
    pub value: Option<u64>,
    pub repeat: usize,
    pub seed: u64,
    pub latency_s: f64,
    pub thinking_tokens: Tokens,
    pub budget: Tokens,
    /// Only for schemes that speculate steps.
    pub accepted_fraction: Option<f64>,
    pub rejected_count: usize,
    pub forced_count: usize,
    pub steps: usize,
    pub correct: bool,
    pub budget_exhausted: bool,
    pub error: Option<String>,
}

impl RunMetrics {
    pub fn from_result(r: &TrajectoryResult, problem: &Problem, repeat: usize, seed: u64) -> Self {
        RunMetrics {
            problem: problem.id.clone(),
            scheme: r.scheme,
            knob: None,
            value: None,
            repeat,
            seed,
            latency_s: r.latency_s(),
            thinking_tokens: r.state.thinking_tokens_used,
            budget: r.state.budget,
            accepted_fraction: r.accepted_fraction(),
            rejected_count: r.rejected_steps.len(),
            forced_count: r
                .state
                .retained_steps
                .iter()
                .filter(|s| s.producer == crate::types::StepProducer::BaseForced)
                .count(),
            steps: r.outcomes.len(),
            correct: grade(r.final_answer(), &problem.answer),
            budget_exhausted: r.budget_exhausted,
            error: None,
        }
    }

    pub fn failed(problem: &Problem, scheme: Scheme, repeat: usize, seed: u64, budget: Tokens, err: String) -> Self {
        RunMetrics {
            problem: problem.id.clone(),
            scheme,
            knob: None,
            value: None,
            repeat,
            seed,
            latency_s: 0.0,
            thinking_tokens: 0,
            budget,
            accepted_fraction: None,
            rejected_count: 0,
            forced_count: 0,
            steps: 0,
            correct: false,
            budget_exhausted: false,
            error: Some(err),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.thinking_tokens > self.budget {
            return Err(format!("{}: thinking tokens over budget", self.problem));
        }
        if self.accepted_fraction.is_some() != self.scheme.speculates() && self.error.is_none() {
            return Err(format!("{}: accepted_fraction presence does not match scheme", self.problem));
        }
        if self.accepted_fraction.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(format!("{}: accepted_fraction outside [0, 1]", self.problem));
        }
        Ok(())
    }
}

/// Mean over problems of the fraction of correct samples. Every problem must
/// have exactly `k` samples.
pub fn pass_at_1(results: &[RunMetrics], k: usize) -> Result<f64, BenchError> {
    let mut by_problem: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in results {
        let e = by_problem.entry(&r.problem).or_default();
        e.0 += 1;
        e.1 += usize::from(r.correct);
    }
    if by_problem.is_empty() || k == 0 {
        return Err(BenchError::MissingSamples {
            problem: "<none>".into(),
            found: 0,
            expected: k,
        });
    }
    let mut sum = 0.0;
    for (p, (n, c)) in &by_problem {
        if *n != k {
            return Err(BenchError::MissingSamples {
                problem: p.to_string(),
                found: *n,
                expected: k,
            });
        }
        sum += *c as f64 / k as f64;
    }
    Ok(sum / by_problem.len() as f64)
}

/// Baseline mean latency over scheme mean latency, on identical run sets.
pub fn speedup(scheme: &[RunMetrics], baseline: &[RunMetrics]) -> Result<f64, BenchError> {
    let key = |rs: &[RunMetrics]| -> BTreeSet<(String, usize, u64)> {
        rs.iter().map(|r| (r.problem.clone(), r.repeat, r.seed)).collect()
    };
    if scheme.is_empty() || key(scheme) != key(baseline) || scheme.len() != baseline.len() {
        return Err(BenchError::MismatchedRunSets(format!(
            "{} scheme runs vs {} baseline runs over different (problem, repeat, seed) sets",
            scheme.len(),
            baseline.len()
        )));
    }
    Ok(mean(baseline.iter().map(|r| r.latency_s)) / mean(scheme.iter().map(|r| r.latency_s)))
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn median(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Knob {
    Threshold,
    ForceFirstN,
    TokenBudget,
    DraftLength,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::Threshold => "threshold",
            Knob::ForceFirstN => "force_first_n",
            Knob::TokenBudget => "token_budget",
            Knob::DraftLength => "draft_length",
        }
    }

    pub fn apply(self, config: &EngineConfig, value: u64) -> Result<EngineConfig, BenchError> {
        let mut c = config.clone();
        let bad = |m: String| BenchError::InvalidSweep(m);
        match self {
            Knob::Threshold => {
                let v = u8::try_from(value).map_err(|_| bad(format!("threshold {value}")))?;
                c.threshold = AcceptanceThreshold::new(v).map_err(|e| bad(e.message().to_string()))?;
            }
            Knob::ForceFirstN => c.force_first_n = value as usize,
            Knob::TokenBudget => c.token_budget = value as Tokens,
            Knob::DraftLength => c.draft_length = value as usize,
        }
        c.validate().map_err(|e| bad(e.message().to_string()))?;
        Ok(c)
    }
}

impl std::fmt::Display for Knob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_repeats() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub knob: Knob,
    pub values: Vec<u64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub base: EngineConfig,
}

impl SweepSpec {
    pub fn new(knob: Knob, values: Vec<u64>, repeats: usize, base: EngineConfig) -> Self {
        SweepSpec {
            knob,
            values,
            repeats,
            base,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.values.is_empty() {
            return Err(BenchError::InvalidSweep("no knob values".into()));
        }
        if self.repeats == 0 {
            return Err(BenchError::InvalidSweep("repeats must be >= 1".into()));
        }
        for v in &self.values {
            self.knob.apply(&self.base, *v)?;
        }
        Ok(())
    }
}

/// Seed for (repeat, problem); never depends on the knob value.
pub fn cell_seed(base_seed: u64, repeat: usize, problem_index: usize) -> u64 {
    mix(&[base_seed, repeat as u64, problem_index as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
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

/// Fold one cell's runs into its summary row.
pub fn summarize(scheme: Scheme, knob: Knob, value: u64, runs: &[RunMetrics], k: usize) -> CellSummary {
    let ok: Vec<&RunMetrics> = runs.iter().filter(|r| r.error.is_none()).collect();
    let acc: Vec<f64> = ok.iter().filter_map(|r| r.accepted_fraction).collect();
    CellSummary {
        scheme,
        knob,
        value,
        trajectories: runs.len(),
        failed: runs.len() - ok.len(),
        pass_at_1: pass_at_1(runs, k).ok(),
        mean_latency_s: mean(ok.iter().map(|r| r.latency_s)),
        median_latency_s: median(ok.iter().map(|r| r.latency_s)),
        mean_accepted_fraction: (!acc.is_empty()).then(|| mean(acc.iter().copied())),
        mean_thinking_tokens: mean(ok.iter().map(|r| r.thinking_tokens as f64)),
        median_thinking_tokens: median(ok.iter().map(|r| r.thinking_tokens as f64)),
        mean_rejected: mean(ok.iter().map(|r| r.rejected_count as f64)),
        budget_exhausted_fraction: mean(ok.iter().map(|r| f64::from(u8::from(r.budget_exhausted)))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub summary: CellSummary,
    pub runs: Vec<RunMetrics>,
    #[serde(skip)]
    pub traces: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub schemes: Vec<Scheme>,
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    pub fn cell(&self, scheme: Scheme, value: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.summary.scheme == scheme && c.summary.value == value)
    }

    /// Speedup of each cell over the BaseOnly cell with the same knob value.
    pub fn speedups(&self) -> Vec<(Scheme, u64, f64)> {
        self.cells
            .iter()
            .filter_map(|c| {
                let b = self.cell(Scheme::BaseOnly, c.summary.value)?;
                let ok = |rs: &[RunMetrics]| rs.iter().filter(|r| r.error.is_none()).cloned().collect::<Vec<_>>();
                let s = speedup(&ok(&c.runs), &ok(&b.runs)).ok()?;
                Some((c.summary.scheme, c.summary.value, s))
            })
            .collect()
    }
}

pub fn trajectory_id(scheme: Scheme, knob: Knob, value: u64, repeat: usize, problem: &str) -> String {
    format!("{scheme}/{knob}={value}/r{repeat}/{problem}")
}

/// Run every scheme at every knob value, `repeats` times per problem.
///
/// Trajectories run concurrently on a pool of `parallelism` threads; results
/// are folded in a fixed order so output does not depend on scheduling.
pub fn run_sweep(
    spec: &SweepSpec,
    schemes: &[Scheme],
    problems: &[Problem],
    small: &dyn Backend,
    base: &dyn Backend,
    parallelism: usize,
) -> Result<SweepResult, BenchError> {
    spec.validate()?;
    if schemes.is_empty() || problems.is_empty() {
        return Err(BenchError::InvalidSweep("need at least one scheme and one problem".into()));
    }
    let mut jobs = Vec::new();
    for &scheme in schemes {
        for &value in &spec.values {
            for repeat in 0..spec.repeats {
                for (qi, _) in problems.iter().enumerate() {
                    jobs.push((scheme, value, repeat, qi));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| BenchError::InvalidSweep(e.to_string()))?;
    let done: Vec<(RunMetrics, Vec<TraceRecord>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(scheme, value, repeat, qi)| {
                let problem = &problems[qi];
                let seed = cell_seed(spec.base.seed, repeat, qi);
                let mut cfg = spec.knob.apply(&spec.base, value).expect("validated");
                cfg.seed = seed;
                let id = trajectory_id(scheme, spec.knob, value, repeat, &problem.id);
                let (mut m, mut traces) = match run_scheme(scheme, &cfg, &problem.prompt, small, base) {
                    Ok(r) => (RunMetrics::from_result(&r, problem, repeat, seed), r.trace_records(&id)),
                    Err(e) => (
                        RunMetrics::failed(problem, scheme, repeat, seed, cfg.token_budget, e.to_string()),
                        Vec::new(),
                    ),
                };
                m.knob = Some(spec.knob);
                m.value = Some(value);
                traces.push(TraceRecord::Metrics(m.clone()));
                (m, traces)
            })
            .collect()
    });
    let per_cell = spec.repeats * problems.len();
    let mut cells = Vec::new();
    for (ci, chunk) in done.chunks(per_cell).enumerate() {
        let (scheme, value, _, _) = jobs[ci * per_cell];
        let runs: Vec<RunMetrics> = chunk.iter().map(|(m, _)| m.clone()).collect();
        let traces = chunk.iter().flat_map(|(_, t)| t.iter().cloned()).collect();
        cells.push(CellResult {
            summary: summarize(scheme, spec.knob, value, &runs, spec.repeats),
            runs,
            traces,
        });
    }
    Ok(SweepResult {
        spec: spec.clone(),
        schemes: schemes.to_vec(),
        cells,
    })
}

/// Count of steps with a given action across a cell's traces.
pub fn count_actions(traces: &[TraceRecord], action: StepAction) -> usize {
    traces
        .iter()
        .filter(|r| matches!(r, TraceRecord::Step { action: a, .. } if *a == action))
        .count()
}
