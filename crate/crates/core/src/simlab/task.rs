//! Modular-arithmetic reasoning chains with exact ground truth.

use std::sync::LazyLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::InvariantViolation;

/// `s_{i+1} = (a_i * s_i + b_i) mod m`, starting from `s_0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainTask {
    #[serde(alias = "m")]
    pub modulus: u64,
    #[serde(alias = "s0")]
    pub start: u64,
    pub coefficients: Vec<(u64, u64)>,
}

impl ChainTask {
    pub fn new(modulus: u64, start: u64, coefficients: Vec<(u64, u64)>) -> Result<Self, InvariantViolation> {
        let task = ChainTask {
            modulus,
            start,
            coefficients,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.modulus < 2 {
            return Err(InvariantViolation::new("chain modulus must be >= 2".into()));
        }
        if self.start >= self.modulus {
            return Err(InvariantViolation::new(format!(
                "start {} not in [0, {})",
                self.start, self.modulus
            )));
        }
        if self.coefficients.is_empty() {
            return Err(InvariantViolation::new("chain needs at least one step".into()));
        }
        Ok(())
    }

    pub fn random(rng: &mut impl Rng, modulus: u64, len: usize) -> Self {
        let coefficients = (0..len)
            .map(|_| (rng.random_range(1..modulus), rng.random_range(0..modulus)))
            .collect();
        ChainTask {
            modulus,
            start: rng.random_range(0..modulus),
            coefficients,
        }
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Apply step `i` (0-based) to `state`.
    pub fn apply(&self, i: usize, state: u64) -> u64 {
        let (a, b) = self.coefficients[i];
        let m = u128::from(self.modulus);
        ((u128::from(a) * u128::from(state) + u128::from(b)) % m) as u64
    }

    pub fn answer(&self) -> u64 {
        (0..self.len()).fold(self.start, |s, i| self.apply(i, s))
    }

    pub fn render(&self) -> String {
        let pairs: Vec<String> = self
            .coefficients
            .iter()
            .map(|(a, b)| format!("({a}, {b})"))
            .collect();
        format!(
            "Let m = {} and s0 = {}. For i = 1, ..., {n} compute s_i = (a_i * s_(i-1) + b_i) mod m \
             using the coefficient pairs (a_i, b_i): {}. Report s_{n}.",
            self.modulus,
            self.start,
            pairs.join(", "),
            n = self.len()
        )
    }

    pub fn parse(problem: &str) -> Option<Self> {
        static HEAD: LazyLock<Regex> =
            LazyLock::new(|| Regex::new(r"Let m = (\d+) and s0 = (\d+)\.").unwrap());
        static PAIR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\((\d+), (\d+)\)").unwrap());
        let head = HEAD.captures(problem)?;
        let modulus = head[1].parse().ok()?;
        let start = head[2].parse().ok()?;
        let rest = &problem[head.get(0)?.end()..];
        let body = &rest[..rest.find(" Report s_")?];
        let coefficients = PAIR
            .captures_iter(body)
            .map(|c| Some((c[1].parse().ok()?, c[2].parse().ok()?)))
            .collect::<Option<Vec<_>>>()?;
        ChainTask::new(modulus, start, coefficients).ok()
    }
}

/// Exact state `s_i` for `0 <= i <= N`.
pub fn ground_truth(task: &ChainTask, i: usize) -> Result<u64, InvariantViolation> {
    if i > task.len() {
        return Err(InvariantViolation::new(format!(
            "state index {i} beyond chain length {}",
            task.len()
        )));
    }
    let mut s = task.start;
    for k in 0..i {
        s = task.apply(k, s);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_chain() {
        let t = ChainTask::new(97, 5, vec![(1, 0); 6]).unwrap();
        for i in 0..=6 {
            assert_eq!(ground_truth(&t, i).unwrap(), 5);
        }
    }

    #[test]
    fn small_hand_example() {
        // 3 -> 7 -> 15 mod 10 = 5 -> 11 mod 10 = 1
        let t = ChainTask::new(10, 3, vec![(2, 1); 3]).unwrap();
        let got: Vec<u64> = (1..=3).map(|i| ground_truth(&t, i).unwrap()).collect();
        assert_eq!(got, vec![7, 5, 1]);
        assert!(ground_truth(&t, 4).is_err());
    }

    #[test]
    fn invalid_tasks() {
        assert!(ChainTask::new(1, 0, vec![(1, 1)]).is_err());
        assert!(ChainTask::new(5, 5, vec![(1, 1)]).is_err());
        assert!(ChainTask::new(5, 1, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn final_state_matches_brute_force(m in 2u64..1_000_000, s0 in 0u64..1_000_000,
                                           coefs in proptest::collection::vec((0u64..1_000_000, 0u64..1_000_000), 1..30)) {
            let t = ChainTask::new(m, s0 % m, coefs.clone()).unwrap();
            // independent loop over plain u128 arithmetic
            let mut s = u128::from(s0 % m);
            for (a, b) in &coefs {
                s = (u128::from(*a) * s + u128::from(*b)) % u128::from(m);
            }
            prop_assert_eq!(u128::from(ground_truth(&t, t.len()).unwrap()), s);
            prop_assert_eq!(u128::from(t.answer()), s);
        }

        #[test]
        fn render_parse_roundtrip(m in 2u64..10_000, seed in any::<u64>(), len in 1usize..50) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = ChainTask::random(&mut rng, m, len);
            prop_assert_eq!(ChainTask::parse(&t.render()), Some(t));
        }
    }
}
