//! Simulated small and base reasoners over [`ChainTask`]s.
//!
//! A simulated step is one line claiming the next chain state followed by
//! filler words and a blank line. Errors are off-by-a-nonzero-offset claims.
//! A model that sees a wrong prior claim may instead write a correction back
//! to the true state, which is how self-reflection shows up here.

use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::task::{ground_truth, ChainTask};
use crate::error::InvariantViolation;
use crate::types::BackendProfile;

/// Whitespace tokens in the claim part of an advancing step.
pub const ADVANCE_CORE_TOKENS: usize = 11;

const FILLER: &[&str] = &[
    "so", "then", "the", "value", "follows", "carefully", "next", "we", "keep", "going", "okay",
    "that", "gives", "this", "step", "checks", "out", "right", "now", "moving", "on", "again",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimModelSpec {
    /// Chance that an advancing step claims a wrong value.
    pub error_prob: f64,
    /// Mean filler tokens per step.
    pub verbosity: f64,
    pub profile: BackendProfile,
    /// Chance of writing a correction when the prior claim is wrong.
    pub reflection_prob: f64,
    /// Per-step error when the answer phase has to finish an unfinished chain
    /// without writing the steps out.
    #[serde(default = "default_rush_error")]
    pub rush_error_prob: f64,
}

fn default_rush_error() -> f64 {
    0.25
}

impl SimModelSpec {
    pub fn default_small() -> Self {
        SimModelSpec {
            error_prob: 0.3,
            verbosity: 5.0,
            profile: BackendProfile::default_small(),
            reflection_prob: 0.2,
            rush_error_prob: default_rush_error(),
        }
    }

    pub fn default_base() -> Self {
        SimModelSpec {
            error_prob: 0.0,
            verbosity: 10.0,
            profile: BackendProfile::default_base(),
            reflection_prob: 0.5,
            rush_error_prob: default_rush_error(),
        }
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.error_prob) || !unit(self.reflection_prob) || !unit(self.rush_error_prob) {
            return Err(InvariantViolation::new(format!(
                "{}: probabilities must lie in [0, 1]",
                self.profile.name
            )));
        }
        if !(self.verbosity.is_finite() && self.verbosity >= 1.0) {
            return Err(InvariantViolation::new(format!(
                "{}: verbosity must be >= 1",
                self.profile.name
            )));
        }
        self.profile.validate()
    }

    /// Expected tokens of an advancing step.
    pub fn expected_step_tokens(&self) -> f64 {
        ADVANCE_CORE_TOKENS as f64 + self.verbosity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClaimKind {
    Advance,
    Correction,
}

/// The chain state a step asserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub kind: ClaimKind,
    pub index: usize,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    pub text: String,
    pub claim: Claim,
    /// Whether the claim is right given the prior claim it builds on.
    pub correct: bool,
}

/// Uniform draws deciding whether a step errs and whether a model reflects.
///
/// Kept apart from the text RNG so a caller can tie them to a chain position:
/// then the same position makes the same decisions on every path through it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoins {
    pub error_u: f64,
    pub reflect_u: f64,
}

impl StepCoins {
    pub fn draw(rng: &mut impl Rng) -> Self {
        StepCoins {
            error_u: rng.random(),
            reflect_u: rng.random(),
        }
    }
}

/// Generate the step that follows a prior claim of `s_i = prior_claimed`.
pub fn simulate_step_text(
    spec: &SimModelSpec,
    task: &ChainTask,
    i: usize,
    prior_claimed: u64,
    rng: &mut impl Rng,
) -> Result<SimStep, InvariantViolation> {
    let coins = StepCoins::draw(rng);
    simulate_step_with(spec, task, i, prior_claimed, coins, rng)
}

/// [`simulate_step_text`] with externally drawn coins.
pub fn simulate_step_with(
    spec: &SimModelSpec,
    task: &ChainTask,
    i: usize,
    prior_claimed: u64,
    coins: StepCoins,
    rng: &mut impl Rng,
) -> Result<SimStep, InvariantViolation> {
    if i >= task.len() {
        return Err(InvariantViolation::new(format!(
            "no step after s_{i} in a chain of length {}",
            task.len()
        )));
    }
    let truth = ground_truth(task, i)?;
    let (mut text, claim, correct) = if prior_claimed != truth && coins.reflect_u < spec.reflection_prob {
        let claim = Claim {
            kind: ClaimKind::Correction,
            index: i,
            value: truth,
        };
        (format!("Wait, let me recheck: s{i} = {truth}."), claim, true)
    } else {
        let (a, b) = task.coefficients[i];
        let m = task.modulus;
        let right = task.apply(i, prior_claimed);
        let (value, correct) = if coins.error_u < spec.error_prob {
            let offset = rng.random_range(1..m);
            ((right + offset) % m, false)
        } else {
            (right, true)
        };
        let n = i + 1;
        let claim = Claim {
            kind: ClaimKind::Advance,
            index: n,
            value,
        };
        (
            format!("Step {n}: s{n} = ({a}*{prior_claimed} + {b}) mod {m} = {value}."),
            claim,
            correct,
        )
    };
    let fillers = Poisson::new(spec.verbosity)
        .map_err(|e| InvariantViolation::new(format!("verbosity: {e}")))?
        .sample(rng) as usize;
    for _ in 0..fillers {
        text.push(' ');
        text.push_str(FILLER.choose(rng).expect("non-empty filler list"));
    }
    text.push_str("\n\n");
    Ok(SimStep { text, claim, correct })
}

static CLAIM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"Step (\d+): s\d+ = \(\d+\*\d+ \+ \d+\) mod \d+ = (\d+)\.|Wait, let me recheck: s(\d+) = (\d+)\.")
        .unwrap()
});

/// The last complete claim in a piece of text.
pub fn last_claim(text: &str) -> Option<Claim> {
    let caps = CLAIM.captures_iter(text).last()?;
    if let (Some(i), Some(v)) = (caps.get(1), caps.get(2)) {
        return Some(Claim {
            kind: ClaimKind::Advance,
            index: i.as_str().parse().ok()?,
            value: v.as_str().parse().ok()?,
        });
    }
    Some(Claim {
        kind: ClaimKind::Correction,
        index: caps.get(3)?.as_str().parse().ok()?,
        value: caps.get(4)?.as_str().parse().ok()?,
    })
}

/// The most recent claim in a chain of thought, scanning backwards by
/// paragraph. Falls back to `s0` from the task.
pub fn latest_state(task: &ChainTask, cot: &str) -> (usize, u64) {
    cot.rsplit("\n\n")
        .find_map(last_claim)
        .map(|c| (c.index, c.value))
        .unwrap_or((0, task.start))
}

/// Local correctness of a claim made right after `prior = (i, s_i claimed)`.
pub fn claim_is_correct(task: &ChainTask, prior: (usize, u64), claim: &Claim) -> bool {
    let (i, value) = prior;
    match claim.kind {
        ClaimKind::Advance => claim.index == i + 1 && i < task.len() && claim.value == task.apply(i, value),
        ClaimKind::Correction => {
            claim.index == i && ground_truth(task, i).is_ok_and(|t| t == claim.value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tokenize::count_tokens;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> ChainTask {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ChainTask::random(&mut rng, 97, 20)
    }

    fn spec(p: f64, r: f64) -> SimModelSpec {
        SimModelSpec {
            error_prob: p,
            reflection_prob: r,
            ..SimModelSpec::default_small()
        }
    }

    #[test]
    fn perfect_model_is_always_right() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = t.start;
        for i in 0..t.len() {
            let s = simulate_step_text(&spec(0.0, 0.0), &t, i, state, &mut rng).unwrap();
            assert!(s.correct);
            state = s.claim.value;
        }
        assert_eq!(state, t.answer());
    }

    #[test]
    fn always_wrong_without_reflection() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = t.start;
        for i in 0..t.len() {
            let s = simulate_step_text(&spec(1.0, 0.0), &t, i, state, &mut rng).unwrap();
            assert!(!s.correct);
            assert_ne!(s.claim.value, ground_truth(&t, i + 1).unwrap());
            // feed the truth back so every step is judged against a correct prior
            state = ground_truth(&t, i + 1).unwrap();
        }
    }

    #[test]
    fn reflection_corrects_wrong_prior() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wrong = (ground_truth(&t, 4).unwrap() + 1) % 97;
        let s = simulate_step_text(&spec(0.0, 1.0), &t, 4, wrong, &mut rng).unwrap();
        assert_eq!(s.claim.kind, ClaimKind::Correction);
        assert_eq!(s.claim.value, ground_truth(&t, 4).unwrap());
        assert!(claim_is_correct(&t, (4, wrong), &s.claim));
    }

    #[test]
    fn one_line_per_step_and_parseable() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = simulate_step_text(&spec(0.3, 0.0), &t, 0, t.start, &mut rng).unwrap();
        assert_eq!(s.text.matches("\n\n").count(), 1);
        assert!(s.text.ends_with("\n\n"));
        assert!(!s.text.trim_end().contains('\n'));
        assert_eq!(last_claim(&s.text), Some(s.claim));
        assert!(count_tokens(&s.text) >= ADVANCE_CORE_TOKENS);
        assert!(simulate_step_text(&spec(0.3, 0.0), &t, t.len(), 0, &mut rng).is_err());
    }

    #[test]
    fn latest_state_skips_broken_paragraphs() {
        let t = task();
        let cot = "Step 1: s1 = (3*5 + 1) mod 97 = 16. ok\n\nWait, let me recheck: s1 = 40. hm\n\nStep 2: s2 = (1*";
        assert_eq!(latest_state(&t, cot), (1, 40));
        assert_eq!(latest_state(&t, ""), (0, t.start));
    }

    #[test]
    fn per_step_error_rate_monte_carlo() {
        // p = 0.3, r = 0, N = 20, 10^4 seeds: empirical rate within 0.3 +- 0.01
        let t = task();
        let s = spec(0.3, 0.0);
        let mut wrong = 0usize;
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..t.len() {
                let prior = ground_truth(&t, i).unwrap();
                let step = simulate_step_text(&s, &t, i, prior, &mut rng).unwrap();
                wrong += usize::from(!step.correct);
                total += 1;
            }
        }
        let rate = wrong as f64 / total as f64;
        assert!((rate - 0.3).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn filler_mean_matches_verbosity() {
        let t = task();
        let s = spec(0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let tokens: usize = (0..n)
            .map(|k| {
                let i = k % t.len();
                let prior = ground_truth(&t, i).unwrap();
                count_tokens(&simulate_step_text(&s, &t, i, prior, &mut rng).unwrap().text)
            })
            .sum();
        let mean = tokens as f64 / n as f64;
        assert!((mean - s.expected_step_tokens()).abs() < 0.1, "{mean}");
    }
}
