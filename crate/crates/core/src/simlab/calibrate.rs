//! Monte-Carlo check of the closed-form step latency, run through the real
//! engine on simulated backends.

use rayon::prelude::*;
use serde::Serialize;

use super::latency::expected_step_latency;
use super::suite::{chain_suite, SimSetup};
use crate::engine::run_trajectory;
use crate::error::EngineError;
use crate::types::EngineConfig;

#[derive(Debug, Clone, Serialize)]
pub struct StepLatencyCheck {
    pub alpha: f64,
    pub closed_form_s: f64,
    pub monte_carlo_s: f64,
    pub steps: usize,
    pub accepted_fraction: f64,
    pub relative_error: f64,
}

/// Mean latency of steps after the first, over at least `min_steps` steps of
/// chains of length `chain_len`.
///
/// The first step of a trajectory is left out because it also pays for
/// prefilling the problem statement.
pub fn monte_carlo_step_latency(
    alpha: f64,
    min_steps: usize,
    chain_len: usize,
    seed: u64,
) -> Result<StepLatencyCheck, EngineError> {
    let setup = SimSetup {
        seed,
        ..SimSetup::calibrated(alpha)
    };
    let closed_form_s = expected_step_latency(alpha, &setup.latency_setup())?;
    let per_traj = chain_len.saturating_sub(1).max(1);
    let n = min_steps.div_ceil(per_traj);
    let tasks = chain_suite(seed, n, 1_000_003, chain_len);
    let (small, base) = setup.backends();
    let parts: Vec<(f64, usize, usize)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let cfg = EngineConfig {
                seed: seed ^ (i as u64).wrapping_mul(0x9e37_79b9),
                ..EngineConfig::default()
            };
            let r = run_trajectory(&cfg, &task.render(), &small, &base)?;
            let steps = &r.state.retained_steps;
            let lat: f64 = steps.iter().skip(1).map(|s| s.latency.total()).sum();
            let acc = r
                .outcomes
                .iter()
                .skip(1)
                .filter(|o| o.action == crate::engine::StepAction::AcceptedSpeculation)
                .count();
            Ok((lat, steps.len().saturating_sub(1), acc))
        })
        .collect::<Result<_, EngineError>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let steps: usize = parts.iter().map(|p| p.1).sum();
    let accepted: usize = parts.iter().map(|p| p.2).sum();
    let monte_carlo_s = total / steps.max(1) as f64;
    Ok(StepLatencyCheck {
        alpha,
        closed_form_s,
        monte_carlo_s,
        steps,
        accepted_fraction: accepted as f64 / steps.max(1) as f64,
        relative_error: (monte_carlo_s - closed_form_s).abs() / closed_form_s,
    })
}
