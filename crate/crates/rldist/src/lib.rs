pub mod algorithms;
pub mod cli;
pub mod evaluation;
pub mod framing;
pub mod optimizers;
pub mod taskrt;
pub mod tune;

pub use rldist_core as core;
