//! Domain types shared by every layer of the crate.
//!
//! Everything here is a plain value: no I/O, no backend handles. The engine
//! owns the only mutable piece, [`TrajectoryState`], and mutates it through
//! the checked methods below so the budget and phase invariants cannot be
//! broken from the outside.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::InvariantViolation;

/// Token counts as reported by a backend or the simulated tokenizer.
pub type Tokens = usize;

/// A single-digit utility judgement of a speculated step, 0 through 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct UtilityScore(u8);

impl UtilityScore {
    pub const MIN: UtilityScore = UtilityScore(0);
    pub const MAX: UtilityScore = UtilityScore(9);

    pub fn new(value: u8) -> Result<Self, InvariantViolation> {
        if value <= 9 {
            Ok(UtilityScore(value))
        } else {
            Err(InvariantViolation::new(format!(
                "utility score {value} outside [0, 9]"
            )))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for UtilityScore {
    type Error = InvariantViolation;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        UtilityScore::new(value)
    }
}

impl From<UtilityScore> for u8 {
    fn from(score: UtilityScore) -> u8 {
        score.0
    }
}

impl fmt::Display for UtilityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Minimum utility score for a speculated step to be kept.
///
/// `0` accepts everything and `10` sits strictly above the highest score, so
/// it rejects everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct AcceptanceThreshold(u8);

impl AcceptanceThreshold {
    pub const ACCEPT_ALL: AcceptanceThreshold = AcceptanceThreshold(0);
    pub const REJECT_ALL: AcceptanceThreshold = AcceptanceThreshold(10);

    pub fn new(value: u8) -> Result<Self, InvariantViolation> {
        if value <= 10 {
            Ok(AcceptanceThreshold(value))
        } else {
            Err(InvariantViolation::new(format!(
                "acceptance threshold {value} outside [0, 10]"
            )))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl Default for AcceptanceThreshold {
    fn default() -> Self {
        AcceptanceThreshold(7)
    }
}

impl TryFrom<u8> for AcceptanceThreshold {
    type Error = InvariantViolation;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        AcceptanceThreshold::new(value)
    }
}

impl From<AcceptanceThreshold> for u8 {
    fn from(threshold: AcceptanceThreshold) -> u8 {
        threshold.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

/// Accept iff `score >= threshold`.
pub fn decide_acceptance(score: UtilityScore, threshold: AcceptanceThreshold) -> Decision {
    if score.value() >= threshold.value() {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// Which model produced a retained step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepProducer {
    Speculator,
    Base,
    /// Base model output for a step routed past the speculator by first-n forcing.
    BaseForced,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub speculate_s: f64,
    pub verify_s: f64,
    pub fallback_s: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.speculate_s + self.verify_s + self.fallback_s
    }

    pub fn is_valid(&self) -> bool {
        [self.speculate_s, self.verify_s, self.fallback_s]
            .iter()
            .all(|c| c.is_finite() && *c >= 0.0)
    }
}

/// One self-contained unit of chain-of-thought text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: usize,
    pub text: String,
    pub token_count: Tokens,
    pub producer: StepProducer,
    /// Present exactly when the producer is the speculator.
    pub score: Option<UtilityScore>,
    pub accepted: bool,
    pub latency: LatencyBreakdown,
}

impl ReasoningStep {
    pub fn check(&self) -> Result<(), InvariantViolation> {
        let speculated = self.producer == StepProducer::Speculator;
        if speculated != self.score.is_some() {
            return Err(InvariantViolation::new(format!(
                "step {}: score presence does not match producer {:?}",
                self.index, self.producer
            )));
        }
        if !self.text.trim().is_empty() && self.token_count == 0 {
            return Err(InvariantViolation::new(format!(
                "step {}: non-empty text with zero tokens",
                self.index
            )));
        }
        if !self.latency.is_valid() {
            return Err(InvariantViolation::new(format!(
                "step {}: negative or non-finite latency component",
                self.index
            )));
        }
        Ok(())
    }
}

pub fn total_latency(step: &ReasoningStep) -> f64 {
    step.latency.total()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Thinking,
    Answering,
    Done,
}

/// The evolving chain of thought for one problem.
///
/// Only thinking-phase retained steps count against `budget`. Final-answer
/// tokens are not charged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub problem: String,
    pub retained_steps: Vec<ReasoningStep>,
    pub thinking_tokens_used: Tokens,
    pub phase: Phase,
    pub budget: Tokens,
    pub final_answer: Option<String>,
}

impl TrajectoryState {
    pub fn new(problem: impl Into<String>, budget: Tokens) -> Self {
        TrajectoryState {
            problem: problem.into(),
            retained_steps: Vec::new(),
            thinking_tokens_used: 0,
            phase: Phase::Thinking,
            budget,
            final_answer: None,
        }
    }

    pub fn remaining_budget(&self) -> Tokens {
        self.budget.saturating_sub(self.thinking_tokens_used)
    }

    /// Concatenated text of the retained steps.
    pub fn cot_text(&self) -> String {
        self.retained_steps.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn retain(&mut self, step: ReasoningStep) -> Result<(), InvariantViolation> {
        if self.phase != Phase::Thinking {
            return Err(InvariantViolation::new(format!(
                "cannot retain a step in phase {:?}",
                self.phase
            )));
        }
        if !step.accepted {
            return Err(InvariantViolation::new(format!(
                "step {} was not accepted",
                step.index
            )));
        }
        step.check()?;
        let used = self.thinking_tokens_used + step.token_count;
        if used > self.budget {
            return Err(InvariantViolation::new(format!(
                "step {} overflows the thinking budget ({used} > {})",
                step.index, self.budget
            )));
        }
        self.thinking_tokens_used = used;
        self.retained_steps.push(step);
        Ok(())
    }

    pub fn begin_answer(&mut self) -> Result<(), InvariantViolation> {
        if self.phase != Phase::Thinking {
            return Err(InvariantViolation::new(format!(
                "answer phase entered from {:?}",
                self.phase
            )));
        }
        self.phase = Phase::Answering;
        Ok(())
    }

    pub fn finish(&mut self, answer: String) -> Result<(), InvariantViolation> {
        if self.phase != Phase::Answering {
            return Err(InvariantViolation::new(format!(
                "trajectory finished from {:?}",
                self.phase
            )));
        }
        self.final_answer = Some(answer);
        self.phase = Phase::Done;
        Ok(())
    }

    /// Re-derives every invariant from scratch.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let sum: Tokens = self.retained_steps.iter().map(|s| s.token_count).sum();
        if sum != self.thinking_tokens_used {
            return Err(InvariantViolation::new(format!(
                "thinking_tokens_used {} != retained sum {sum}",
                self.thinking_tokens_used
            )));
        }
        if self.thinking_tokens_used > self.budget {
            return Err(InvariantViolation::new(format!(
                "thinking tokens {} exceed budget {}",
                self.thinking_tokens_used, self.budget
            )));
        }
        for (i, step) in self.retained_steps.iter().enumerate() {
            if !step.accepted {
                return Err(InvariantViolation::new(format!(
                    "retained step {i} is marked rejected"
                )));
            }
            if step.index != i {
                return Err(InvariantViolation::new(format!(
                    "retained step at position {i} has index {}",
                    step.index
                )));
            }
            step.check()?;
        }
        if (self.phase == Phase::Done) != self.final_answer.is_some() {
            return Err(InvariantViolation::new(
                "final answer present iff phase is Done".to_string(),
            ));
        }
        Ok(())
    }
}

fn default_stop_markers() -> Vec<String> {
    ["\n\n", ".\n", "?\n", "!\n"].iter().map(|s| s.to_string()).collect()
}

fn default_end_think() -> String {
    "</think>".to_string()
}

/// Every engine knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub threshold: AcceptanceThreshold,
    pub force_first_n: usize,
    pub token_budget: Tokens,
    pub temperature: f64,
    /// Tokens drafted per round when regenerations use token-level speculation.
    pub draft_length: usize,
    pub hierarchical: bool,
    pub seed: u64,
    pub max_step_tokens: Tokens,
    pub step_stop_markers: Vec<String>,
    pub end_think_marker: String,
    pub max_answer_tokens: Tokens,
    /// Extra scoring attempts after an unparseable score. Zero maps a parse
    /// failure straight to rejection.
    pub score_retries: u32,
    /// Overrides the built-in verification prompt.
    pub verify_template: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            threshold: AcceptanceThreshold::default(),
            force_first_n: 0,
            token_budget: 8192,
            temperature: 0.6,
            draft_length: 5,
            hierarchical: false,
            seed: 0,
            max_step_tokens: 256,
            step_stop_markers: default_stop_markers(),
            end_think_marker: default_end_think(),
            max_answer_tokens: 256,
            score_retries: 0,
            verify_template: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let fail = |msg: &str| Err(InvariantViolation::new(msg.to_string()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return fail("temperature must be finite and >= 0");
        }
        if self.draft_length == 0 {
            return fail("draft_length must be >= 1");
        }
        if self.token_budget == 0 {
            return fail("token_budget must be >= 1");
        }
        if self.max_step_tokens == 0 {
            return fail("max_step_tokens must be >= 1");
        }
        if self.max_answer_tokens == 0 {
            return fail("max_answer_tokens must be >= 1");
        }
        if self.end_think_marker.is_empty() {
            return fail("end_think_marker must be non-empty");
        }
        if self.step_stop_markers.iter().any(|m| m.is_empty()) {
            return fail("step_stop_markers must not contain empty strings");
        }
        if let Some(t) = &self.verify_template {
            crate::backend::template::check_template(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Small,
    Base,
}

/// A backend's identity and its latency parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub name: String,
    pub role: Role,
    pub decode_s_per_token: f64,
    pub prefill_tokens_per_s: f64,
}

/// Base-to-small decode cost ratio used by the default profiles (32B / 1.5B).
pub const DEFAULT_DECODE_RATIO: f64 = 21.3;

impl BackendProfile {
    pub fn new(
        name: impl Into<String>,
        role: Role,
        decode_s_per_token: f64,
        prefill_tokens_per_s: f64,
    ) -> Result<Self, InvariantViolation> {
        let profile = BackendProfile {
            name: name.into(),
            role,
            decode_s_per_token,
            prefill_tokens_per_s,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn default_base() -> Self {
        BackendProfile {
            name: "sim-base".into(),
            role: Role::Base,
            decode_s_per_token: 0.05,
            prefill_tokens_per_s: 2000.0,
        }
    }

    pub fn default_small() -> Self {
        BackendProfile {
            name: "sim-small".into(),
            role: Role::Small,
            decode_s_per_token: 0.05 / DEFAULT_DECODE_RATIO,
            prefill_tokens_per_s: 2000.0 * DEFAULT_DECODE_RATIO,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.decode_s_per_token) || !ok(self.prefill_tokens_per_s) {
            return Err(InvariantViolation::new(format!(
                "profile {}: rates must be finite and > 0",
                self.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(v: u8) -> UtilityScore {
        UtilityScore::new(v).unwrap()
    }

    fn thr(v: u8) -> AcceptanceThreshold {
        AcceptanceThreshold::new(v).unwrap()
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(decide_acceptance(score(8), thr(7)), Decision::Accept);
        assert_eq!(decide_acceptance(score(7), thr(7)), Decision::Accept);
        assert_eq!(decide_acceptance(score(0), thr(0)), Decision::Accept);
        assert_eq!(decide_acceptance(score(9), thr(10)), Decision::Reject);
        assert_eq!(decide_acceptance(score(6), thr(7)), Decision::Reject);
    }

    #[test]
    fn range_checks() {
        assert!(UtilityScore::new(10).is_err());
        assert!(AcceptanceThreshold::new(11).is_err());
        assert!(serde_json::from_str::<UtilityScore>("12").is_err());
        assert_eq!(serde_json::from_str::<AcceptanceThreshold>("10").unwrap(), thr(10));
    }

    fn step(lat: (f64, f64, f64)) -> ReasoningStep {
        ReasoningStep {
            index: 0,
            text: "a b".into(),
            token_count: 2,
            producer: StepProducer::Base,
            score: None,
            accepted: true,
            latency: LatencyBreakdown {
                speculate_s: lat.0,
                verify_s: lat.1,
                fallback_s: lat.2,
            },
        }
    }

    #[test]
    fn total_latency_examples() {
        assert!((total_latency(&step((0.5, 0.05, 0.0))) - 0.55).abs() < 1e-12);
        assert_eq!(total_latency(&step((0.0, 0.0, 0.0))), 0.0);
    }

    #[test]
    fn budget_and_phase_enforced() {
        let mut state = TrajectoryState::new("p", 3);
        state.retain(step((0.0, 0.0, 0.0))).unwrap();
        let mut big = step((0.0, 0.0, 0.0));
        big.index = 1;
        assert!(state.retain(big).is_err());
        let mut rejected = step((0.0, 0.0, 0.0));
        rejected.accepted = false;
        assert!(state.retain(rejected).is_err());
        assert!(state.finish("x".into()).is_err());
        state.begin_answer().unwrap();
        assert!(state.begin_answer().is_err());
        assert!(state.retain(step((0.0, 0.0, 0.0))).is_err());
        state.finish("x".into()).unwrap();
        state.validate().unwrap();
    }

    #[test]
    fn score_presence_matches_producer() {
        let mut s = step((0.0, 0.0, 0.0));
        s.score = Some(score(3));
        assert!(s.check().is_err());
        s.producer = StepProducer::Speculator;
        s.check().unwrap();
    }

    #[test]
    fn default_config_values() {
        let c = EngineConfig::default();
        assert_eq!(c.threshold.value(), 7);
        assert_eq!(c.token_budget, 8192);
        assert_eq!(c.temperature, 0.6);
        assert_eq!(c.draft_length, 5);
        c.validate().unwrap();
        let p = BackendProfile::default_base();
        let s = BackendProfile::default_small();
        assert!((p.decode_s_per_token / s.decode_s_per_token - 21.3).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn total_latency_is_component_sum(a in 0.0f64..1e3, b in 0.0f64..1e3, c in 0.0f64..1e3) {
            let s = step((a, b, c));
            let expected = [a, b, c].iter().fold(0.0, |acc, x| acc + x);
            prop_assert!((total_latency(&s) - expected).abs() <= 1e-9 * expected.max(1.0));
        }

        #[test]
        fn acceptance_is_monotone(s1 in 0u8..=9, s2 in 0u8..=9, t1 in 0u8..=10, t2 in 0u8..=10) {
            let (hi, lo) = (s1.max(s2), s1.min(s2));
            if decide_acceptance(score(lo), thr(t1)) == Decision::Accept {
                prop_assert_eq!(decide_acceptance(score(hi), thr(t1)), Decision::Accept);
            }
            let (thi, tlo) = (t1.max(t2), t1.min(t2));
            if decide_acceptance(score(s1), thr(thi)) == Decision::Accept {
                prop_assert_eq!(decide_acceptance(score(s1), thr(tlo)), Decision::Accept);
            }
        }

        #[test]
        fn step_json_roundtrip(idx in 0usize..1000, text in "[a-z \n]{0,40}", tokens in 0usize..100,
                               sc in proptest::option::of(0u8..=9), a in 0.0f64..10.0) {
            let s = ReasoningStep {
                index: idx,
                text,
                token_count: tokens,
                producer: if sc.is_some() { StepProducer::Speculator } else { StepProducer::Base },
                score: sc.map(score),
                accepted: true,
                latency: LatencyBreakdown { speculate_s: a, verify_s: a / 3.0, fallback_s: 0.0 },
            };
            let json = serde_json::to_string(&s).unwrap();
            let back: ReasoningStep = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
        }
    }

    #[test]
    fn config_and_state_roundtrip() {
        let c = EngineConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<EngineConfig>(&json).unwrap(), c);
        let mut st = TrajectoryState::new("q", 10);
        st.retain(step((0.1, 0.2, 0.3))).unwrap();
        let json = serde_json::to_string(&st).unwrap();
        let back: TrajectoryState = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        let p = BackendProfile::default_small();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<BackendProfile>(&json).unwrap(), p);
    }
}
