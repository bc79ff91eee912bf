//! Simulation engine and protocol library for exact-majority population
//! protocols under the uniform random pairwise scheduler.
//!
//! The crate provides:
//!
//! * [`engine`] — the population, the scheduler, the sequential interaction
//!   loop, metrics and trace collection;
//! * [`protocol`] — the protocol abstraction, the four-state always-correct
//!   backup, the epidemic broadcast primitive and the fast+slow extended
//!   composition;
//! * [`majority`] — the canceling-doubling protocol with logarithmic phases
//!   and five-part phase structure;
//! * [`fastmajority1`] — the epoch-based protocol with sub-logarithmic
//!   phases and out-of-sync token recovery;
//! * [`fastmajority2`] — the worker/clock split with modular clock counters;
//! * [`analysis`] — invariant monitors, the critical-phase calculator and
//!   exact small-population Markov oracles;
//! * [`harness`] — seed sweeps, aggregation and machine-readable output.

pub mod analysis;
pub mod engine;
pub mod fastmajority1;
pub mod fastmajority2;
pub mod harness;
pub mod majority;
pub mod protocol;

pub use engine::{InputInstance, RunMetrics, RunOptions, RunOutcome};
pub use protocol::{Opinion, Protocol};
