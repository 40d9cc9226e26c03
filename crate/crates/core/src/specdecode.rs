//! Token-level speculative decoding with greedy verification, and its use
//! inside base-model regenerations.
//!
//! Each round the draft proposes up to `gamma` tokens, the target checks them
//! in one pass and keeps the longest prefix that matches its own argmax, then
//! contributes one token of its own. Output is identical to target-only greedy
//! decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backend::tokenize::units;
use crate::backend::{generate_step, Backend, FinishReason, GenerationRequest, GenerationResult, PrefixCache};
use crate::error::{BackendError, InvariantViolation};
use crate::simlab::{mix, step_latency, unit_interval};
use crate::types::{BackendProfile, Tokens};

pub type Token = u32;

/// A deterministic next-token oracle.
pub trait TokenModel {
    fn greedy_next(&self, ctx: &[Token]) -> Token;
}

impl<T: TokenModel + ?Sized> TokenModel for &T {
    fn greedy_next(&self, ctx: &[Token]) -> Token {
        (**self).greedy_next(ctx)
    }
}

impl<T: TokenModel + ?Sized> TokenModel for Box<T> {
    fn greedy_next(&self, ctx: &[Token]) -> Token {
        (**self).greedy_next(ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopRule {
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<Token>,
}

impl StopRule {
    fn is_stop(&self, t: Token) -> bool {
        self.stop_tokens.contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftRound {
    pub drafted: Vec<Token>,
    pub accepted_prefix_len: usize,
    /// The target's own token after the accepted prefix. Absent only when an
    /// accepted drafted stop token already ended generation.
    pub bonus_token: Option<Token>,
}

impl DraftRound {
    pub fn appended(&self) -> usize {
        self.accepted_prefix_len + usize::from(self.bonus_token.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<Token>,
    pub rounds: Vec<DraftRound>,
}

/// Reference: target-only greedy decoding.
pub fn greedy_decode(target: &dyn TokenModel, prefix: &[Token], stop: &StopRule) -> Vec<Token> {
    let mut ctx = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < stop.max_new_tokens {
        let t = target.greedy_next(&ctx);
        ctx.push(t);
        out.push(t);
        if stop.is_stop(t) {
            break;
        }
    }
    out
}

pub fn speculative_decode(
    draft: &dyn TokenModel,
    target: &dyn TokenModel,
    prefix: &[Token],
    gamma: usize,
    stop: &StopRule,
) -> Result<Decoded, InvariantViolation> {
    if gamma == 0 {
        return Err(InvariantViolation::new("draft length must be >= 1".into()));
    }
    let mut ctx = prefix.to_vec();
    let base_len = ctx.len();
    let mut rounds = Vec::new();
    let mut done = stop.max_new_tokens == 0;
    while !done {
        let produced = ctx.len() - base_len;
        let remaining = stop.max_new_tokens - produced;
        // leave room for the target's own token
        let k = gamma.min(remaining - 1);
        let mut probe = ctx.clone();
        let mut drafted = Vec::with_capacity(k);
        for _ in 0..k {
            let t = draft.greedy_next(&probe);
            probe.push(t);
            drafted.push(t);
            if stop.is_stop(t) {
                break;
            }
        }
        let mut accepted = 0;
        let mut bonus = None;
        for (j, &t) in drafted.iter().enumerate() {
            let want = target.greedy_next(&ctx);
            if want != t {
                bonus = Some(want);
                break;
            }
            ctx.push(t);
            accepted = j + 1;
        }
        let stopped_in_draft = accepted > 0 && accepted == drafted.len() && stop.is_stop(drafted[accepted - 1]);
        if bonus.is_none() && !stopped_in_draft {
            bonus = Some(target.greedy_next(&ctx));
        }
        if let Some(b) = bonus {
            ctx.push(b);
        }
        done = stopped_in_draft
            || bonus.is_some_and(|b| stop.is_stop(b))
            || ctx.len() - base_len >= stop.max_new_tokens;
        rounds.push(DraftRound {
            drafted,
            accepted_prefix_len: accepted,
            bonus_token: bonus,
        });
    }
    Ok(Decoded {
        tokens: ctx.split_off(base_len),
        rounds,
    })
}

/// Round cost: the draft decodes its tokens, the target prefills them and
/// decodes one token.
pub fn round_latency(round: &DraftRound, draft: &BackendProfile, target: &BackendProfile) -> f64 {
    let k = round.drafted.len();
    step_latency(draft, k, 0) + step_latency(target, 1, k)
}

/// A synthetic language model over a small vocabulary: the next token is a
/// hash of the seed and the last three context tokens.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticLm {
    pub seed: u64,
    pub vocab: u32,
}

impl SyntheticLm {
    pub fn new(seed: u64, vocab: u32) -> Self {
        SyntheticLm { seed, vocab: vocab.max(2) }
    }
}

impl TokenModel for SyntheticLm {
    fn greedy_next(&self, ctx: &[Token]) -> Token {
        let tail: Vec<u64> = ctx.iter().rev().take(3).map(|&t| u64::from(t)).collect();
        let mut key = vec![self.seed, ctx.len() as u64 % 7];
        key.extend(tail);
        (mix(&key) % u64::from(self.vocab)) as Token
    }
}

/// Replays a fixed continuation after a prefix of known length.
#[derive(Debug, Clone)]
pub struct ScriptedTarget {
    pub prefix_len: usize,
    pub script: Vec<Token>,
    pub after_end: Token,
}

impl TokenModel for ScriptedTarget {
    fn greedy_next(&self, ctx: &[Token]) -> Token {
        ctx.len()
            .checked_sub(self.prefix_len)
            .and_then(|i| self.script.get(i).copied())
            .unwrap_or(self.after_end)
    }
}

/// Agrees with `target` at each position with probability `agreement`.
pub struct PerturbedDraft<'a> {
    target: &'a dyn TokenModel,
    agreement: f64,
    key: u64,
    vocab: Option<u32>,
}

impl<'a> PerturbedDraft<'a> {
    /// Disagreements produce `Token::MAX`, which no script uses.
    pub fn new(target: &'a dyn TokenModel, agreement: f64, key: u64) -> Self {
        PerturbedDraft {
            target,
            agreement,
            key,
            vocab: None,
        }
    }

    /// Disagreements produce a different in-vocabulary token.
    pub fn in_vocab(target: &'a dyn TokenModel, agreement: f64, key: u64, vocab: u32) -> Self {
        PerturbedDraft {
            target,
            agreement,
            key,
            vocab: Some(vocab.max(2)),
        }
    }
}

impl TokenModel for PerturbedDraft<'_> {
    fn greedy_next(&self, ctx: &[Token]) -> Token {
        let t = self.target.greedy_next(ctx);
        let last = ctx.last().map_or(u64::MAX, |&x| u64::from(x));
        let key = [self.key, ctx.len() as u64, last];
        if unit_interval(&key) < self.agreement {
            return t;
        }
        match self.vocab {
            Some(v) => {
                let shift = 1 + (mix(&[self.key ^ 0x5bd1, ctx.len() as u64]) % u64::from(v - 1)) as u32;
                (t + shift) % v
            }
            None => Token::MAX,
        }
    }
}

/// Id reserved for the final unit of a step that ended at a boundary.
pub const STEP_END: Token = 0;

/// Intern a step's whitespace units as tokens. The last unit becomes
/// [`STEP_END`] when the step ended naturally.
pub fn tokenize_step(text: &str, finish: FinishReason) -> Vec<Token> {
    let us = units(text);
    let mut ids: HashMap<&str, Token> = HashMap::new();
    let mut out: Vec<Token> = us
        .iter()
        .map(|u| {
            let next = ids.len() as Token + 1;
            *ids.entry(u).or_insert(next)
        })
        .collect();
    if finish != FinishReason::Length {
        if let Some(last) = out.last_mut() {
            *last = STEP_END;
        }
    }
    out
}

/// A base step produced through token-level speculation.
#[derive(Debug, Clone)]
pub struct SpecRegeneration {
    pub result: GenerationResult,
    pub rounds: Vec<DraftRound>,
    pub latency_s: f64,
}

/// Generate the base model's step for `req`, charging latency by draft/verify
/// rounds instead of one decode per token.
///
/// The step text is the base backend's own output; the draft only changes how
/// many target passes it takes to produce it.
#[allow(clippy::too_many_arguments)]
pub fn regenerate_with_specdecode(
    small: &dyn Backend,
    base: &dyn Backend,
    small_cache: &mut PrefixCache,
    base_cache: &mut PrefixCache,
    req: &GenerationRequest,
    max_step_tokens: Tokens,
    gamma: usize,
) -> Result<SpecRegeneration, BackendError> {
    let unsupported = |b: &dyn Backend| BackendError::Unsupported {
        backend: b.profile().name.clone(),
        what: "token-level speculative decoding".into(),
    };
    if !base.exposes_token_level() {
        return Err(unsupported(base));
    }
    let small_new = small_cache.new_tokens(small, &req.prompt);
    let base_new = base_cache.new_tokens(base, &req.prompt);
    let result = generate_step(base, req, max_step_tokens)?;
    let script = tokenize_step(&result.text, result.finish_reason);
    let target = ScriptedTarget {
        prefix_len: 0,
        script: script.clone(),
        after_end: STEP_END,
    };
    let draft = small.token_drafter(req, &target).ok_or_else(|| unsupported(small))?;
    let stop = StopRule {
        max_new_tokens: script.len(),
        stop_tokens: if result.finish_reason == FinishReason::Length {
            Vec::new()
        } else {
            vec![STEP_END]
        },
    };
    let decoded = speculative_decode(&*draft, &target, &[], gamma, &stop)
        .map_err(|e| BackendError::InvalidRequest(e.message().to_string()))?;
    if decoded.tokens != script {
        return Err(BackendError::Misbehavior(
            "speculative decoding diverged from the target".into(),
        ));
    }
    let mut latency_s = step_latency(small.profile(), 0, small_new) + step_latency(base.profile(), 0, base_new);
    latency_s += decoded
        .rounds
        .iter()
        .map(|r| round_latency(r, small.profile(), base.profile()))
        .sum::<f64>();
    if result.finish_reason == FinishReason::EndThink {
        latency_s += base.profile().decode_s_per_token;
    }
    let seq = format!("{}{}", req.prompt, result.text);
    small_cache.insert(seq.clone());
    base_cache.insert(seq);
    Ok(SpecRegeneration {
        result,
        rounds: decoded.rounds,
        latency_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Disagree<'a>(&'a dyn TokenModel);
    impl TokenModel for Disagree<'_> {
        fn greedy_next(&self, ctx: &[Token]) -> Token {
            self.0.greedy_next(ctx) ^ 1
        }
    }

    fn rule(n: usize) -> StopRule {
        StopRule {
            max_new_tokens: n,
            stop_tokens: vec![],
        }
    }

    #[test]
    fn perfect_draft_round_count() {
        let lm = SyntheticLm::new(3, 64);
        for (gamma, len) in [(5usize, 30usize), (5, 31), (1, 10), (8, 100)] {
            let d = speculative_decode(&lm, &lm, &[1, 2], gamma, &rule(len)).unwrap();
            assert_eq!(d.tokens, greedy_decode(&lm, &[1, 2], &rule(len)));
            assert_eq!(d.rounds.len(), len.div_ceil(gamma + 1), "gamma {gamma} len {len}");
        }
    }

    #[test]
    fn hostile_draft_still_lossless() {
        let lm = SyntheticLm::new(9, 64);
        let bad = Disagree(&lm);
        let d = speculative_decode(&bad, &lm, &[4], 5, &rule(20)).unwrap();
        assert!(d.rounds.iter().all(|r| r.accepted_prefix_len == 0));
        assert_eq!(d.tokens, greedy_decode(&lm, &[4], &rule(20)));
        assert_eq!(d.rounds.len(), 20);
    }

    #[test]
    fn stop_token_in_draft_ends_generation() {
        let target = ScriptedTarget {
            prefix_len: 0,
            script: vec![5, 6, 7, STEP_END],
            after_end: STEP_END,
        };
        let stop = StopRule {
            max_new_tokens: 10,
            stop_tokens: vec![STEP_END],
        };
        let d = speculative_decode(&target, &target, &[], 8, &stop).unwrap();
        assert_eq!(d.tokens, vec![5, 6, 7, STEP_END]);
        assert_eq!(d.rounds.len(), 1);
        assert_eq!(d.rounds[0].bonus_token, None);
    }

    #[test]
    fn tokenize_marks_step_end() {
        assert_eq!(tokenize_step("a a b\n\n", FinishReason::Stop), vec![1, 1, STEP_END]);
        assert_eq!(tokenize_step("a a b", FinishReason::Length), vec![1, 1, 2]);
    }

    #[test]
    fn zero_gamma_rejected() {
        let lm = SyntheticLm::new(0, 64);
        assert!(speculative_decode(&lm, &lm, &[], 0, &rule(3)).is_err());
    }

    proptest! {
        #[test]
        fn lossless_on_synthetic_vocab(seed in any::<u64>(), prefix in proptest::collection::vec(0u32..64, 0..12),
                                       gamma in 1usize..=8, q in 0.0f64..=1.0, len in 1usize..80,
                                       stop_tok in proptest::option::of(0u32..64)) {
            let target = SyntheticLm::new(seed, 64);
            let draft = PerturbedDraft::in_vocab(&target, q, seed ^ 1, 64);
            let stop = StopRule { max_new_tokens: len, stop_tokens: stop_tok.into_iter().collect() };
            let d = speculative_decode(&draft, &target, &prefix, gamma, &stop).unwrap();
            prop_assert_eq!(&d.tokens, &greedy_decode(&target, &prefix, &stop));
            for r in &d.rounds {
                prop_assert!(r.accepted_prefix_len <= gamma);
                prop_assert!(r.appended() >= 1);
            }
            let total: usize = d.rounds.iter().map(|r| r.appended()).sum();
            prop_assert_eq!(total, d.tokens.len());
        }
    }
}
