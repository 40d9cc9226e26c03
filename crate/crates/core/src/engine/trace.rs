//! JSONL trace records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Scheme, StepAction, TrajectoryResult};
use crate::bench::RunMetrics;
use crate::types::{LatencyBreakdown, StepProducer, Tokens, UtilityScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Step {
        trajectory: String,
        index: usize,
        producer: StepProducer,
        score: Option<UtilityScore>,
        action: StepAction,
        token_count: Tokens,
        latency: LatencyBreakdown,
        text: String,
    },
    Rejected {
        trajectory: String,
        index: usize,
        score: Option<UtilityScore>,
        token_count: Tokens,
        latency: LatencyBreakdown,
        text: String,
    },
    Round {
        trajectory: String,
        step: usize,
        round: usize,
        drafted: usize,
        accepted: usize,
    },
    Trajectory {
        trajectory: String,
        scheme: Scheme,
        latency_s: f64,
        answer_latency_s: f64,
        thinking_tokens: Tokens,
        budget: Tokens,
        budget_exhausted: bool,
        final_answer: String,
    },
    Metrics(RunMetrics),
}

impl TrajectoryResult {
    pub fn trace_records(&self, id: &str) -> Vec<TraceRecord> {
        let t = || id.to_string();
        let mut out: Vec<TraceRecord> = self
            .outcomes
            .iter()
            .map(|o| TraceRecord::Step {
                trajectory: t(),
                index: o.step.index,
                producer: o.step.producer,
                score: o.step.score,
                action: o.action,
                token_count: o.step.token_count,
                latency: o.step.latency,
                text: o.step.text.clone(),
            })
            .collect();
        out.extend(self.rejected_steps.iter().map(|s| TraceRecord::Rejected {
            trajectory: t(),
            index: s.index,
            score: s.score,
            token_count: s.token_count,
            latency: s.latency,
            text: s.text.clone(),
        }));
        out.extend(self.rounds.iter().map(|r| TraceRecord::Round {
            trajectory: t(),
            step: r.step_index,
            round: r.round,
            drafted: r.drafted,
            accepted: r.accepted,
        }));
        out.push(TraceRecord::Trajectory {
            trajectory: t(),
            scheme: self.scheme,
            latency_s: self.latency_s(),
            answer_latency_s: self.answer_latency_s,
            thinking_tokens: self.state.thinking_tokens_used,
            budget: self.state.budget,
            budget_exhausted: self.budget_exhausted,
            final_answer: self.final_answer().to_string(),
        });
        out
    }
}

pub fn write_jsonl(mut w: impl Write, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<TraceRecord>, crate::error::BenchError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Re-derive the budget invariant from a trace alone.
pub fn check_trace_budget(records: &[TraceRecord]) -> Result<(), String> {
    use std::collections::HashMap;
    let mut used: HashMap<&str, Tokens> = HashMap::new();
    for r in records {
        if let TraceRecord::Step {
            trajectory,
            token_count,
            ..
        } = r
        {
            *used.entry(trajectory).or_default() += token_count;
        }
    }
    for r in records {
        if let TraceRecord::Trajectory {
            trajectory,
            thinking_tokens,
            budget,
            ..
        } = r
        {
            let sum = used.get(trajectory.as_str()).copied().unwrap_or(0);
            if sum != *thinking_tokens {
                return Err(format!("{trajectory}: steps sum to {sum}, record says {thinking_tokens}"));
            }
            if sum > *budget {
                return Err(format!("{trajectory}: {sum} thinking tokens over budget {budget}"));
            }
        }
    }
    Ok(())
}
