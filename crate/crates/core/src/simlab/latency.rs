//! Parametric latency model and its closed-form per-step expectation.

use serde::{Deserialize, Serialize};

use super::model::SimModelSpec;
use crate::backend::template::VERIFY_TEMPLATE_V1;
use crate::backend::tokenize::count_tokens;
use crate::error::InvariantViolation;
use crate::types::{BackendProfile, Tokens};

pub fn step_latency(profile: &BackendProfile, decoded: Tokens, prefilled: Tokens) -> f64 {
    decoded as f64 * profile.decode_s_per_token + prefilled as f64 / profile.prefill_tokens_per_s
}

/// Tokens of a verification template after the candidate step.
pub fn verify_suffix_tokens(template: &str) -> Tokens {
    template
        .split("{candidate_step}")
        .nth(1)
        .map(count_tokens)
        .unwrap_or(0)
}

/// Inputs to the closed-form step latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySetup {
    pub small: BackendProfile,
    pub base: BackendProfile,
    /// Expected tokens of a speculated step.
    pub small_step_tokens: f64,
    /// Expected tokens of a base step.
    pub base_step_tokens: f64,
    /// Template tokens prefilled per verification besides the candidate.
    pub verify_overhead_tokens: f64,
}

impl LatencySetup {
    pub fn from_specs(small: &SimModelSpec, base: &SimModelSpec) -> Self {
        LatencySetup {
            small: small.profile.clone(),
            base: base.profile.clone(),
            small_step_tokens: small.expected_step_tokens(),
            base_step_tokens: base.expected_step_tokens(),
            verify_overhead_tokens: verify_suffix_tokens(VERIFY_TEMPLATE_V1) as f64,
        }
    }

    pub fn speculate_s(&self) -> f64 {
        self.small_step_tokens * self.small.decode_s_per_token
    }

    /// One decoded score token plus the candidate and template suffix.
    pub fn verify_s(&self) -> f64 {
        self.base.decode_s_per_token
            + (self.small_step_tokens + self.verify_overhead_tokens) / self.base.prefill_tokens_per_s
    }

    /// Base regeneration, plus the small model catching up on the replaced step.
    pub fn regenerate_s(&self) -> f64 {
        self.base_step_tokens * self.base.decode_s_per_token + self.base_step_tokens / self.small.prefill_tokens_per_s
    }
}

fn check_alpha(alpha: f64) -> Result<(), InvariantViolation> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(InvariantViolation::new(format!("acceptance rate {alpha} outside [0, 1]")))
    }
}

/// `T_spec + T_verify + (1 - alpha) * T_regen` for a step past the first.
pub fn expected_step_latency(alpha: f64, setup: &LatencySetup) -> Result<f64, InvariantViolation> {
    check_alpha(alpha)?;
    Ok(setup.speculate_s() + setup.verify_s() + (1.0 - alpha) * setup.regenerate_s())
}

/// Per-step latency of vanilla base decoding with a warm prefix cache.
pub fn expected_base_step_latency(setup: &LatencySetup) -> f64 {
    setup.base_step_tokens * setup.base.decode_s_per_token
}

pub fn expected_speedup(alpha: f64, setup: &LatencySetup) -> Result<f64, InvariantViolation> {
    Ok(expected_base_step_latency(setup) / expected_step_latency(alpha, setup)?)
}
