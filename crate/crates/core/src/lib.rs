//! Numeric and algorithmic core of `rldist`.
//!
//! Everything here is pure computation over owned buffers: the MLP kernel and
//! first-order update rules, the reference environments, the columnar
//! [`SampleBatch`](batch::SampleBatch), policy graphs with their trajectory
//! postprocessors, the prioritized replay buffer and the evolution-strategies
//! estimator. The crate is `no_std` and only needs `alloc`; threads, IO and the
//! actor runtime live in the `rldist` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod batch;
pub mod envs;
pub mod es;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod tensor;

pub use batch::SampleBatch;
pub use tensor::{Matrix, MlpParams};
