//! Deterministic simulated backend over chain tasks.
//!
//! Every output is a pure function of the backend seed and the request: the
//! RNG for a call is keyed by the request kind, the seed hint and the latest
//! claimed chain state in the prompt. Two trajectories that reach the same
//! chain-of-thought get the same next step regardless of which model slot
//! asked or in what order calls happened.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::template::{THINK_OPEN, VERIFY_TAIL};
use super::tokenize::{count_tokens, truncate_tokens};
use super::{Backend, FinishReason, GenerationRequest, GenerationResult};
use crate::engine::segment::cut_step;
use crate::error::BackendError;
use crate::simlab::model::{claim_is_correct, last_claim, latest_state, simulate_step_with, ClaimKind, StepCoins};
use crate::simlab::{hash_str, mix, simulate_judge_score, substream, unit_interval, ChainTask, SimJudgeSpec, SimModelSpec};
use crate::specdecode::{PerturbedDraft, TokenModel};
use crate::types::{BackendProfile, Role};

const KIND_STEP: u64 = 1;
const KIND_JUDGE: u64 = 2;
const KIND_ANSWER: u64 = 3;
const KIND_DRAFT: u64 = 4;
const KIND_ERROR: u64 = 5;
const KIND_REFLECT: u64 = 6;

const DEFAULT_END: &str = "</think>";

#[derive(Debug, Clone)]
pub struct SimBackend {
    spec: SimModelSpec,
    judge: Option<SimJudgeSpec>,
    seed: u64,
    draft_agreement: f64,
    /// Parsed problem statements; parsing dominates call cost otherwise.
    tasks: Arc<Mutex<HashMap<String, ChainTask>>>,
}

const TASK_CACHE_LIMIT: usize = 4096;

/// What a prompt asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum SimRequest<'a> {
    Step { task: ChainTask, cot: &'a str },
    Judge { task: ChainTask, cot_prefix: &'a str, candidate: &'a str },
    Answer { task: ChainTask, cot: &'a str },
}

impl SimBackend {
    pub fn new(spec: SimModelSpec, seed: u64) -> Self {
        SimBackend {
            spec,
            judge: None,
            seed,
            draft_agreement: 0.8,
            tasks: Arc::default(),
        }
    }

    fn parse_task(&self, problem: &str) -> Option<ChainTask> {
        let mut cache = self.tasks.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = cache.get(problem) {
            return Some(t.clone());
        }
        let task = ChainTask::parse(problem)?;
        if cache.len() >= TASK_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(problem.to_string(), task.clone());
        Some(task)
    }

    pub fn with_judge(mut self, judge: SimJudgeSpec) -> Self {
        self.judge = Some(judge);
        self
    }

    /// Per-position probability that this model's token-level draft matches
    /// the target.
    pub fn with_draft_agreement(mut self, q: f64) -> Self {
        self.draft_agreement = q;
        self
    }

    pub fn spec(&self) -> &SimModelSpec {
        &self.spec
    }

    fn salt(&self) -> u64 {
        match self.spec.profile.role {
            Role::Small => 0x5111,
            Role::Base => 0xba5e,
        }
    }

    /// Key for the RNG of a step generated after `cot`.
    pub fn step_key(&self, seed_hint: Option<u64>, cot: &str, state: (usize, u64)) -> [u64; 7] {
        [
            self.seed,
            self.salt(),
            KIND_STEP,
            seed_hint.unwrap_or(0),
            cot.matches("\n\n").count() as u64,
            state.0 as u64,
            state.1,
        ]
    }

    /// Error and reflection draws for the step after chain index `i`. They
    /// depend on the position only, never on claimed values.
    pub fn step_coins(&self, seed_hint: Option<u64>, i: usize) -> StepCoins {
        let h = seed_hint.unwrap_or(0);
        StepCoins {
            error_u: unit_interval(&[self.seed, self.salt(), KIND_ERROR, h, i as u64 + 1]),
            reflect_u: unit_interval(&[self.seed, self.salt(), KIND_REFLECT, h, i as u64]),
        }
    }

    pub fn classify<'a>(&self, req: &'a GenerationRequest) -> Result<SimRequest<'a>, BackendError> {
        let (problem, body) = req
            .prompt
            .split_once(THINK_OPEN)
            .ok_or_else(|| BackendError::InvalidRequest("prompt has no thinking section".into()))?;
        let task = self
            .parse_task(problem)
            .ok_or_else(|| BackendError::InvalidRequest("simulated backends only understand chain tasks".into()))?;
        let end = req.end_marker.as_deref().unwrap_or(DEFAULT_END);
        if req.prompt.trim_end().ends_with(VERIFY_TAIL) {
            let think = body.rfind(end).map_or(body, |p| &body[..p]);
            let trimmed = think.trim_end();
            let (cot_prefix, candidate) = match trimmed.rfind("\n\n") {
                Some(p) => trimmed.split_at(p + 2),
                None => ("", trimmed),
            };
            return Ok(SimRequest::Judge {
                task,
                cot_prefix,
                candidate,
            });
        }
        if body.trim_end().ends_with(end) {
            let cot = &body[..body.rfind(end).expect("checked above")];
            return Ok(SimRequest::Answer { task, cot });
        }
        Ok(SimRequest::Step { task, cot: body })
    }

    fn judge(&self, req: &GenerationRequest, task: &ChainTask, cot_prefix: &str, candidate: &str) -> Result<GenerationResult, BackendError> {
        let judge = self.judge.as_ref().ok_or_else(|| BackendError::Unsupported {
            backend: self.spec.profile.name.clone(),
            what: "scoring".into(),
        })?;
        let prior = latest_state(task, cot_prefix);
        let claim = last_claim(candidate);
        let correct = claim.is_some_and(|c| claim_is_correct(task, prior, &c));
        // keyed by position and claim kind so a position is judged alike on
        // every path that reaches it
        let (ci, ck) = claim.map_or((u64::MAX, 0), |c| (c.index as u64, 1 + u64::from(c.kind == ClaimKind::Correction)));
        let mut rng = substream(&[self.seed, self.salt(), KIND_JUDGE, req.seed_hint.unwrap_or(0), ci, ck]);
        let score = simulate_judge_score(judge, correct, &mut rng);
        let digit = score.to_string();
        let mut top = BTreeMap::new();
        top.insert(digit.clone(), -0.01);
        Ok(GenerationResult {
            text: digit,
            token_count: 1,
            finish_reason: if req.max_tokens == 1 {
                FinishReason::Length
            } else {
                FinishReason::Stop
            },
            top_logprobs: req.want_top_logprobs.then_some(top),
            measured_latency_s: 0.0,
        })
    }

    fn answer(&self, req: &GenerationRequest, task: &ChainTask, cot: &str) -> GenerationResult {
        let (i, mut v) = latest_state(task, cot);
        let mut rng = substream(&[
            self.seed,
            self.salt(),
            KIND_ANSWER,
            req.seed_hint.unwrap_or(0),
            i as u64,
            v,
        ]);
        for k in i..task.len() {
            v = task.apply(k, v);
            if rng.random_bool(self.spec.rush_error_prob) {
                v = (v + rng.random_range(1..task.modulus)) % task.modulus;
            }
        }
        let full = format!("The final answer is {v}.");
        truncated(&full, req.max_tokens, FinishReason::Stop)
    }

    fn step(&self, req: &GenerationRequest, task: &ChainTask, cot: &str) -> Result<GenerationResult, BackendError> {
        let state = latest_state(task, cot);
        if state.0 >= task.len() {
            return Ok(GenerationResult {
                text: String::new(),
                token_count: 0,
                finish_reason: FinishReason::EndThink,
                top_logprobs: None,
                measured_latency_s: 0.0,
            });
        }
        let mut rng = substream(&self.step_key(req.seed_hint, cot, state));
        let coins = self.step_coins(req.seed_hint, state.0);
        let step = simulate_step_with(&self.spec, task, state.0, state.1, coins, &mut rng)
            .map_err(|e| BackendError::InvalidRequest(e.message().to_string()))?;
        let (text, finish) = cut_step(&step.text, &req.stop, None, req.max_tokens);
        Ok(GenerationResult {
            text: text.to_string(),
            token_count: count_tokens(text),
            finish_reason: finish,
            top_logprobs: None,
            measured_latency_s: 0.0,
        })
    }
}

fn truncated(text: &str, max_tokens: usize, natural: FinishReason) -> GenerationResult {
    let (text, finish) = if count_tokens(text) > max_tokens {
        (truncate_tokens(text, max_tokens), FinishReason::Length)
    } else {
        (text, natural)
    };
    GenerationResult {
        text: text.to_string(),
        token_count: count_tokens(text),
        finish_reason: finish,
        top_logprobs: None,
        measured_latency_s: 0.0,
    }
}

impl Backend for SimBackend {
    fn profile(&self) -> &BackendProfile {
        &self.spec.profile
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        if req.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        match self.classify(req)? {
            SimRequest::Judge {
                task,
                cot_prefix,
                candidate,
            } => self.judge(req, &task, cot_prefix, candidate),
            SimRequest::Answer { task, cot } => Ok(self.answer(req, &task, cot)),
            SimRequest::Step { task, cot } => self.step(req, &task, cot),
        }
    }

    fn exposes_token_level(&self) -> bool {
        true
    }

    fn token_drafter<'a>(
        &'a self,
        req: &GenerationRequest,
        target: &'a dyn TokenModel,
    ) -> Option<Box<dyn TokenModel + 'a>> {
        let key = mix(&[self.seed, self.salt(), KIND_DRAFT, req.seed_hint.unwrap_or(0), hash_str(&req.prompt)]);
        Some(Box::new(PerturbedDraft::new(target, self.draft_agreement, key)))
    }
}
