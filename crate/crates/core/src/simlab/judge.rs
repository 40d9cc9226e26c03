use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::InvariantViolation;
use crate::types::UtilityScore;

/// Simulated verifier: exact on correct steps, noisy on wrong ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimJudgeSpec {
    pub correct_score: UtilityScore,
    pub wrong_score_max: u8,
    /// Probability that a wrong step is scored as if it were correct.
    pub noise: f64,
}

impl Default for SimJudgeSpec {
    fn default() -> Self {
        SimJudgeSpec {
            correct_score: UtilityScore::MAX,
            wrong_score_max: 3,
            noise: 0.05,
        }
    }
}

impl SimJudgeSpec {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.wrong_score_max >= self.correct_score.value() {
            return Err(InvariantViolation::new(
                "judge wrong_score_max must be below correct_score".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(InvariantViolation::new("judge noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn simulate_judge_score(judge: &SimJudgeSpec, correct: bool, rng: &mut impl Rng) -> UtilityScore {
    if correct || rng.random_bool(judge.noise) {
        judge.correct_score
    } else {
        UtilityScore::new(rng.random_range(0..=judge.wrong_score_max)).expect("below correct_score")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn correct_steps_always_top_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for noise in [0.0, 0.5, 1.0] {
            let j = SimJudgeSpec { noise, ..Default::default() };
            for _ in 0..100 {
                assert_eq!(simulate_judge_score(&j, true, &mut rng).value(), 9);
            }
        }
    }

    #[test]
    fn wrong_steps_without_noise_stay_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = SimJudgeSpec { noise: 0.0, ..Default::default() };
        for _ in 0..1000 {
            assert!(simulate_judge_score(&j, false, &mut rng).value() <= 3);
        }
    }

    #[test]
    fn noise_rate_monte_carlo() {
        // 10^4 samples at noise 0.1: fraction scored 9 within 0.1 +- 0.01
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = SimJudgeSpec { noise: 0.1, ..Default::default() };
        let hits = (0..10_000)
            .filter(|_| simulate_judge_score(&j, false, &mut rng).value() == 9)
            .count();
        let frac = hits as f64 / 10_000.0;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn invalid_judges() {
        let j = SimJudgeSpec { wrong_score_max: 9, ..Default::default() };
        assert!(j.validate().is_err());
        let j = SimJudgeSpec { noise: 1.5, ..Default::default() };
        assert!(j.validate().is_err());
    }
}
