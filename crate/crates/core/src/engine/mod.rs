//! The speculate / verify / accept-or-regenerate loop.
//!
//! One trajectory is strictly sequential: the small model proposes a step,
//! the base model scores it in a single prefill pass, and a rejected step is
//! regenerated by the base model from the same retained prefix. The rejected
//! text never reaches the prompt of any later call.

pub mod segment;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::backend::template::{answer_prompt, generation_prompt, VERIFY_TEMPLATE_V1};
use crate::backend::{generate_step, verify_step, Backend, FinishReason, GenerationRequest, GenerationResult, PrefixCache, VerificationRequest};
use crate::error::{BackendError, CallSite, EngineError};
use crate::simlab::step_latency;
use crate::specdecode::{regenerate_with_specdecode, DraftRound};
use crate::types::{
    decide_acceptance, Decision, EngineConfig, LatencyBreakdown, ReasoningStep, Role, StepProducer, Tokens,
    TrajectoryState, UtilityScore,
};

pub use segment::segment_step;
pub use trace::TraceRecord;

/// The five inference schemes compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    BaseOnly,
    SmallOnly,
    SpecDecode,
    SpecReason,
    SpecReasonDecode,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::BaseOnly,
        Scheme::SmallOnly,
        Scheme::SpecDecode,
        Scheme::SpecReason,
        Scheme::SpecReasonDecode,
    ];

    /// Whether the scheme speculates whole steps.
    pub fn speculates(self) -> bool {
        matches!(self, Scheme::SpecReason | Scheme::SpecReasonDecode)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::BaseOnly => "BaseOnly",
            Scheme::SmallOnly => "SmallOnly",
            Scheme::SpecDecode => "SpecDecode",
            Scheme::SpecReason => "SpecReason",
            Scheme::SpecReasonDecode => "SpecReasonDecode",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scheme {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepAction {
    AcceptedSpeculation,
    RejectedThenRegenerated,
    ForcedBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: ReasoningStep,
    pub action: StepAction,
}

/// One token-level speculation round inside a base step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub step_index: usize,
    pub round: usize,
    pub drafted: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub scheme: Scheme,
    pub state: TrajectoryState,
    pub outcomes: Vec<StepOutcome>,
    /// Speculated candidates that were rejected, with the latency they cost.
    pub rejected_steps: Vec<ReasoningStep>,
    pub rounds: Vec<RoundRecord>,
    /// Final answer call plus any calls that only discovered thinking was over.
    pub answer_latency_s: f64,
    pub budget_exhausted: bool,
    pub score_parse_failures: usize,
}

impl TrajectoryResult {
    pub fn latency_s(&self) -> f64 {
        self.state.retained_steps.iter().map(|s| s.latency.total()).sum::<f64>() + self.answer_latency_s
    }

    pub fn cot_text(&self) -> String {
        self.state.cot_text()
    }

    /// Share of retained steps written by the speculator; `None` for schemes
    /// that do not speculate steps.
    pub fn accepted_fraction(&self) -> Option<f64> {
        if !self.scheme.speculates() {
            return None;
        }
        let n = self.outcomes.len();
        let acc = self
            .outcomes
            .iter()
            .filter(|o| o.action == StepAction::AcceptedSpeculation)
            .count();
        Some(if n == 0 { 0.0 } else { acc as f64 / n as f64 })
    }

    pub fn count(&self, action: StepAction) -> usize {
        self.outcomes.iter().filter(|o| o.action == action).count()
    }

    pub fn final_answer(&self) -> &str {
        self.state.final_answer.as_deref().unwrap_or("")
    }

    /// Every speculated candidate appears exactly once: as an accepted
    /// retained step or in the rejected list.
    pub fn check_audit(&self) -> Result<(), crate::error::InvariantViolation> {
        for (o, s) in self.outcomes.iter().zip(&self.state.retained_steps) {
            if o.step != *s {
                return Err(crate::error::InvariantViolation::new(format!(
                    "outcome {} does not match retained step",
                    s.index
                )));
            }
            let spec_accept = s.producer == StepProducer::Speculator && s.accepted;
            if (o.action == StepAction::AcceptedSpeculation) != spec_accept {
                return Err(crate::error::InvariantViolation::new(format!(
                    "step {}: action {:?} with producer {:?}",
                    s.index, o.action, s.producer
                )));
            }
        }
        if self.outcomes.len() != self.state.retained_steps.len() {
            return Err(crate::error::InvariantViolation::new("outcome count differs from retained steps".into()));
        }
        if self.rejected_steps.iter().any(|r| r.accepted) {
            return Err(crate::error::InvariantViolation::new("rejected list holds an accepted step".into()));
        }
        let regenerated = self.count(StepAction::RejectedThenRegenerated);
        if regenerated > self.rejected_steps.len() {
            return Err(crate::error::InvariantViolation::new(
                "regenerated step without a rejected candidate".into(),
            ));
        }
        Ok(())
    }
}

pub fn force_first_n(config: &EngineConfig, step_index: usize) -> bool {
    step_index < config.force_first_n
}

/// Run one SpecReason trajectory; `config.hierarchical` selects token-level
/// speculation inside regenerations.
pub fn run_trajectory(
    config: &EngineConfig,
    problem: &str,
    small: &dyn Backend,
    base: &dyn Backend,
) -> Result<TrajectoryResult, EngineError> {
    let scheme = if config.hierarchical {
        Scheme::SpecReasonDecode
    } else {
        Scheme::SpecReason
    };
    run_scheme(scheme, config, problem, small, base)
}

pub fn run_scheme(
    scheme: Scheme,
    config: &EngineConfig,
    problem: &str,
    small: &dyn Backend,
    base: &dyn Backend,
) -> Result<TrajectoryResult, EngineError> {
    config.validate().map_err(EngineError::Config)?;
    if small.profile().role != Role::Small {
        return Err(EngineError::RoleMismatch {
            backend: small.profile().name.clone(),
            slot: "small",
        });
    }
    if base.profile().role != Role::Base {
        return Err(EngineError::RoleMismatch {
            backend: base.profile().name.clone(),
            slot: "base",
        });
    }
    Loop::new(scheme, config, problem, small, base).run()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Who {
    Small,
    Base,
}

struct Call {
    result: GenerationResult,
    latency_s: f64,
}

struct Loop<'a> {
    scheme: Scheme,
    cfg: &'a EngineConfig,
    problem: &'a str,
    small: &'a dyn Backend,
    base: &'a dyn Backend,
    small_cache: PrefixCache,
    base_cache: PrefixCache,
    template: &'a str,
    state: TrajectoryState,
    outcomes: Vec<StepOutcome>,
    rejected: Vec<ReasoningStep>,
    rounds: Vec<RoundRecord>,
    answer_latency_s: f64,
    budget_exhausted: bool,
    score_parse_failures: usize,
}

fn at(step: usize, site: CallSite) -> impl FnOnce(BackendError) -> EngineError {
    move |source| EngineError::Backend { step, site, source }
}

impl<'a> Loop<'a> {
    fn new(
        scheme: Scheme,
        cfg: &'a EngineConfig,
        problem: &'a str,
        small: &'a dyn Backend,
        base: &'a dyn Backend,
    ) -> Self {
        Loop {
            scheme,
            cfg,
            problem,
            small,
            base,
            small_cache: PrefixCache::new(),
            base_cache: PrefixCache::new(),
            template: cfg.verify_template.as_deref().unwrap_or(VERIFY_TEMPLATE_V1),
            state: TrajectoryState::new(problem, cfg.token_budget),
            outcomes: Vec::new(),
            rejected: Vec::new(),
            rounds: Vec::new(),
            answer_latency_s: 0.0,
            budget_exhausted: false,
            score_parse_failures: 0,
        }
    }

    fn backend(&self, who: Who) -> &'a dyn Backend {
        match who {
            Who::Small => self.small,
            Who::Base => self.base,
        }
    }

    fn charge(backend: &dyn Backend, result: &GenerationResult, new_prompt: Tokens) -> f64 {
        if backend.measures_latency() {
            result.measured_latency_s
        } else {
            step_latency(backend.profile(), result.decoded_tokens(), new_prompt)
        }
    }

    fn call(&mut self, who: Who, req: &GenerationRequest, cap: Tokens) -> Result<Call, BackendError> {
        let backend = self.backend(who);
        let cache = match who {
            Who::Small => &mut self.small_cache,
            Who::Base => &mut self.base_cache,
        };
        let new = cache.new_tokens(backend, &req.prompt);
        let result = generate_step(backend, req, cap)?;
        cache.insert(format!("{}{}", req.prompt, result.text));
        Ok(Call {
            latency_s: Self::charge(backend, &result, new),
            result,
        })
    }

    fn step_request(&self, max_tokens: Tokens) -> GenerationRequest {
        GenerationRequest {
            prompt: generation_prompt(self.problem, &self.state.cot_text()),
            max_tokens,
            temperature: self.cfg.temperature,
            stop: self.cfg.step_stop_markers.clone(),
            end_marker: Some(self.cfg.end_think_marker.clone()),
            want_top_logprobs: false,
            seed_hint: Some(self.cfg.seed),
        }
    }

    /// A base-model step, through token-level speculation when asked for.
    fn base_step(&mut self, req: &GenerationRequest, index: usize, site: CallSite, speculative: bool) -> Result<Call, EngineError> {
        if speculative && !self.base.measures_latency() {
            let regen = regenerate_with_specdecode(
                self.small,
                self.base,
                &mut self.small_cache,
                &mut self.base_cache,
                req,
                self.cfg.max_step_tokens,
                self.cfg.draft_length,
            )
            .map_err(at(index, site))?;
            self.record_rounds(index, &regen.rounds);
            return Ok(Call {
                result: regen.result,
                latency_s: regen.latency_s,
            });
        }
        // served models do their own token-level speculation, if configured
        self.call(Who::Base, req, self.cfg.max_step_tokens).map_err(at(index, site))
    }

    fn record_rounds(&mut self, index: usize, rounds: &[DraftRound]) {
        for (i, r) in rounds.iter().enumerate() {
            self.rounds.push(RoundRecord {
                step_index: index,
                round: i,
                drafted: r.drafted.len(),
                accepted: r.accepted_prefix_len,
            });
        }
    }

    fn verify(&mut self, index: usize, candidate: &str) -> Result<(Option<UtilityScore>, f64), EngineError> {
        let vreq = VerificationRequest {
            problem: self.problem.to_string(),
            cot_prefix: self.state.cot_text(),
            candidate_step: candidate.to_string(),
        };
        let mut latency = 0.0;
        for _ in 0..=self.cfg.score_retries {
            let v = verify_step(self.base, &vreq, self.template, Some(self.cfg.seed)).map_err(at(index, CallSite::Verify))?;
            let new = self.base_cache.new_tokens(self.base, &v.prompt);
            latency += Self::charge(self.base, &v.result, new);
            self.base_cache.insert(format!("{}{}", v.prompt, v.result.text));
            match v.score {
                Ok(s) => return Ok((Some(s), latency)),
                Err(_) => self.score_parse_failures += 1,
            }
        }
        Ok((None, latency))
    }

    fn retain(&mut self, step: ReasoningStep, action: StepAction) -> Result<(), EngineError> {
        self.state.retain(step.clone())?;
        self.outcomes.push(StepOutcome { step, action });
        Ok(())
    }

    fn make_step(index: usize, res: &GenerationResult, producer: StepProducer, score: Option<UtilityScore>, latency: LatencyBreakdown) -> ReasoningStep {
        ReasoningStep {
            index,
            text: res.text.clone(),
            token_count: res.token_count,
            producer,
            score,
            accepted: true,
            latency,
        }
    }

    /// Whether thinking is over after a retained step.
    fn after_step(&mut self, res: &GenerationResult, max_tokens: Tokens) -> bool {
        if res.finish_reason == FinishReason::EndThink {
            return true;
        }
        let cut_by_budget = res.finish_reason == FinishReason::Length && max_tokens < self.cfg.max_step_tokens;
        if cut_by_budget || self.state.remaining_budget() == 0 {
            self.budget_exhausted = true;
            return true;
        }
        false
    }

    fn run(mut self) -> Result<TrajectoryResult, EngineError> {
        loop {
            let index = self.state.retained_steps.len();
            let remaining = self.state.remaining_budget();
            if remaining == 0 {
                self.budget_exhausted = true;
                break;
            }
            let max_tokens = self.cfg.max_step_tokens.min(remaining);
            let req = self.step_request(max_tokens);
            let done = match self.scheme {
                Scheme::BaseOnly | Scheme::SpecDecode => {
                    let c = self.base_step(&req, index, CallSite::Regenerate, self.scheme == Scheme::SpecDecode)?;
                    self.plain_step(index, c, StepProducer::Base, StepAction::ForcedBase, max_tokens)?
                }
                Scheme::SmallOnly => {
                    let c = self.call(Who::Small, &req, self.cfg.max_step_tokens).map_err(at(index, CallSite::Speculate))?;
                    self.plain_step(index, c, StepProducer::Speculator, StepAction::ForcedBase, max_tokens)?
                }
                Scheme::SpecReason | Scheme::SpecReasonDecode if force_first_n(self.cfg, index) => {
                    let c = self.base_step(&req, index, CallSite::Forced, false)?;
                    self.plain_step(index, c, StepProducer::BaseForced, StepAction::ForcedBase, max_tokens)?
                }
                Scheme::SpecReason | Scheme::SpecReasonDecode => self.speculative_step(index, &req, max_tokens)?,
            };
            if done {
                break;
            }
        }
        self.state.begin_answer()?;
        let (who, site) = if self.scheme == Scheme::SmallOnly {
            (Who::Small, CallSite::Answer)
        } else {
            (Who::Base, CallSite::Answer)
        };
        let req = GenerationRequest {
            prompt: answer_prompt(self.problem, &self.state.cot_text(), &self.cfg.end_think_marker),
            max_tokens: self.cfg.max_answer_tokens,
            temperature: self.cfg.temperature,
            stop: Vec::new(),
            end_marker: Some(self.cfg.end_think_marker.clone()),
            want_top_logprobs: false,
            seed_hint: Some(self.cfg.seed),
        };
        let index = self.state.retained_steps.len();
        let c = self.call(who, &req, self.cfg.max_answer_tokens).map_err(at(index, site))?;
        self.answer_latency_s += c.latency_s;
        self.state.finish(c.result.text)?;
        self.state.validate()?;
        let result = TrajectoryResult {
            scheme: self.scheme,
            state: self.state,
            outcomes: self.outcomes,
            rejected_steps: self.rejected,
            rounds: self.rounds,
            answer_latency_s: self.answer_latency_s,
            budget_exhausted: self.budget_exhausted,
            score_parse_failures: self.score_parse_failures,
        };
        result.check_audit()?;
        Ok(result)
    }

    /// Retain an unassisted step. Returns whether thinking is over.
    fn plain_step(&mut self, index: usize, c: Call, producer: StepProducer, action: StepAction, max_tokens: Tokens) -> Result<bool, EngineError> {
        if c.result.text.is_empty() {
            self.answer_latency_s += c.latency_s;
            return Ok(true);
        }
        let latency = LatencyBreakdown {
            fallback_s: c.latency_s,
            ..Default::default()
        };
        let step = Self::make_step(index, &c.result, producer, None, latency);
        self.retain(step, action)?;
        Ok(self.after_step(&c.result, max_tokens))
    }

    fn speculative_step(&mut self, index: usize, req: &GenerationRequest, max_tokens: Tokens) -> Result<bool, EngineError> {
        let spec = self.call(Who::Small, req, self.cfg.max_step_tokens).map_err(at(index, CallSite::Speculate))?;
        if spec.result.text.is_empty() {
            // the speculator closed the thinking section
            self.answer_latency_s += spec.latency_s;
            return Ok(true);
        }
        let (score, verify_s) = self.verify(index, &spec.result.text)?;
        let decision = score.map_or(Decision::Reject, |s| decide_acceptance(s, self.cfg.threshold));
        let mut latency = LatencyBreakdown {
            speculate_s: spec.latency_s,
            verify_s,
            fallback_s: 0.0,
        };
        if decision == Decision::Accept {
            let step = Self::make_step(index, &spec.result, StepProducer::Speculator, score, latency);
            self.retain(step, StepAction::AcceptedSpeculation)?;
            return Ok(self.after_step(&spec.result, max_tokens));
        }
        let mut audit = Self::make_step(index, &spec.result, StepProducer::Speculator, score, latency);
        audit.accepted = false;
        self.rejected.push(audit);
        let regen = self.base_step(req, index, CallSite::Regenerate, self.scheme == Scheme::SpecReasonDecode)?;
        latency.fallback_s = regen.latency_s;
        if regen.result.text.is_empty() {
            self.answer_latency_s += latency.total();
            return Ok(true);
        }
        let step = Self::make_step(index, &regen.result, StepProducer::Base, None, latency);
        self.retain(step, StepAction::RejectedThenRegenerated)?;
        Ok(self.after_step(&regen.result, max_tokens))
    }
}

#[cfg(test)]
mod tests;
