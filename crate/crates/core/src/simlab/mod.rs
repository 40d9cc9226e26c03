//! Desk-scale stand-ins for the models and tasks: modular-arithmetic chains
//! with exact ground truth, simulated small/base/judge behaviour and the
//! parametric latency model.

pub mod calibrate;
pub mod judge;
pub mod latency;
pub mod model;
pub mod suite;
pub mod task;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use judge::{simulate_judge_score, SimJudgeSpec};
pub use latency::{expected_base_step_latency, expected_speedup, expected_step_latency, step_latency, LatencySetup};
pub use model::{simulate_step_text, Claim, ClaimKind, SimModelSpec, SimStep};
pub use suite::SimSetup;
pub use task::{ground_truth, ChainTask};

/// Mix a key into 64 bits. Order-sensitive.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_str(s: &str) -> u64 {
    let words: Vec<u64> = s
        .as_bytes()
        .chunks(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(b)
        })
        .collect();
    mix(&[mix(&words), s.len() as u64])
}

/// A private RNG stream for one keyed call.
pub fn substream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Uniform in [0, 1) from a key.
pub fn unit_interval(parts: &[u64]) -> f64 {
    (mix(parts) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
        assert_eq!(mix(&[1, 2]), mix(&[1, 2]));
        assert_ne!(hash_str("ab"), hash_str("ab\0"));
    }

    #[test]
    fn unit_interval_mean() {
        let n = 100_000u64;
        let mean: f64 = (0..n).map(|i| unit_interval(&[7, i])).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
    }
}
