//! Step-level speculative reasoning.
//!
//! A small model drafts each reasoning step, the base model scores the draft
//! with a single digit in one prefill pass, and drafts scoring below the
//! acceptance threshold are regenerated by the base model. The crate holds the
//! control loop ([`engine`]), the backend contract with HTTP and simulated
//! implementations ([`backend`]), token-level speculative decoding
//! ([`specdecode`]), a deterministic simulator with exact ground truth
//! ([`simlab`]) and a seed-aligned benchmark runner ([`bench`]).
//!
//! ```
//! use specreason::engine::run_trajectory;
//! use specreason::simlab::{suite::chain_suite, SimSetup};
//! use specreason::types::EngineConfig;
//!
//! let task = &chain_suite(1, 1, 97, 8)[0];
//! let (small, base) = SimSetup::default().backends();
//! let result = run_trajectory(&EngineConfig::default(), &task.render(), &small, &base).unwrap();
//! assert!(result.state.thinking_tokens_used <= 8192);
//! println!("{}", result.final_answer());
//! ```

pub mod backend;
pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod simlab;
pub mod specdecode;
pub mod types;

pub use backend::Backend;
pub use engine::{run_scheme, run_trajectory, Scheme, TrajectoryResult};
pub use error::{BackendError, BenchError, ConfigError, EngineError, InvariantViolation};
pub use types::{AcceptanceThreshold, EngineConfig, UtilityScore};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/step-speculation.md")]
    mod step_speculation {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/token-speculation.md")]
    mod token_speculation {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
