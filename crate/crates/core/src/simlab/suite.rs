//! Ready-made simulated model pairs and task suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::judge::SimJudgeSpec;
use super::latency::LatencySetup;
use super::model::SimModelSpec;
use super::task::ChainTask;
use crate::backend::sim::SimBackend;
use crate::error::InvariantViolation;

/// A small/base pair plus the base model's judging behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSetup {
    pub small: SimModelSpec,
    pub base: SimModelSpec,
    pub judge: SimJudgeSpec,
    /// Per-token agreement of the small model's draft with the base model.
    pub draft_agreement: f64,
    pub seed: u64,
}

impl Default for SimSetup {
    fn default() -> Self {
        SimSetup {
            small: SimModelSpec::default_small(),
            base: SimModelSpec::default_base(),
            judge: SimJudgeSpec::default(),
            draft_agreement: 0.8,
            seed: 0,
        }
    }
}

impl SimSetup {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        self.small.validate()?;
        self.base.validate()?;
        self.judge.validate()?;
        if !(0.0..=1.0).contains(&self.draft_agreement) {
            return Err(InvariantViolation::new("draft_agreement must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// A setup whose speculated steps pass verification with probability
    /// `alpha`: a perfect judge, an error-free base and no reflection.
    pub fn calibrated(alpha: f64) -> Self {
        let mut s = SimSetup::default();
        s.small.error_prob = 1.0 - alpha;
        s.small.reflection_prob = 0.0;
        s.base.error_prob = 0.0;
        s.base.reflection_prob = 0.0;
        s.judge.noise = 0.0;
        s
    }

    pub fn backends(&self) -> (SimBackend, SimBackend) {
        let small = SimBackend::new(self.small.clone(), self.seed).with_draft_agreement(self.draft_agreement);
        let base = SimBackend::new(self.base.clone(), self.seed).with_judge(self.judge.clone());
        (small, base)
    }

    pub fn latency_setup(&self) -> LatencySetup {
        LatencySetup::from_specs(&self.small, &self.base)
    }
}

/// `count` random chains of length `len` modulo `modulus`.
pub fn chain_suite(seed: u64, count: usize, modulus: u64, len: usize) -> Vec<ChainTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| ChainTask::random(&mut rng, modulus, len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimSetup::default().validate().unwrap();
        SimSetup::calibrated(0.38).validate().unwrap();
        assert!(SimSetup::default().small.verbosity < SimSetup::default().base.verbosity);
    }

    #[test]
    fn suite_is_seeded() {
        assert_eq!(chain_suite(1, 3, 97, 5), chain_suite(1, 3, 97, 5));
        assert_ne!(chain_suite(1, 3, 97, 5), chain_suite(2, 3, 97, 5));
    }
}
