//! Policy graphs: the act / postprocess / gradients / weights / utilities
//! bundle an algorithm declares, plus the trajectory postprocessors they share.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::batch::{BatchError, SampleBatch};
use crate::envs::{Action, ActionSpace};
use crate::rng::SeededRng;
use crate::tensor::{Matrix, TensorError};

mod categorical;
pub mod dqn;
pub mod pg;
pub mod postprocessing;
pub mod ppo;

pub use dqn::{dqn_loss, DqnConfig, DqnGraph};
pub use pg::{pg_loss, PgConfig, PgGraph};
pub use postprocessing::{compute_gae, n_step_returns, AdvantageConfig};
pub use ppo::{ppo_clip_loss, PpoConfig, PpoGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unsupported action space {0:?}")]
    UnsupportedActionSpace(ActionSpace),
    #[error("expected {expected} per-row generators, got {found}")]
    RngCount { expected: usize, found: usize },
    #[error("unknown utility `{0}`")]
    UnknownUtility(String),
}

impl From<PolicyError> for String {
    fn from(e: PolicyError) -> String {
        alloc::format!("{e}")
    }
}

/// Result of `act` on a batch of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<Action>,
    /// Next recurrent state, one row per observation (width 0 for every
    /// graph in this crate).
    pub h_next: Vec<Vec<f64>>,
    /// Auxiliary outputs `y¹…y^N`, row-aligned with the observations.
    pub aux: BTreeMap<String, Vec<f64>>,
}

/// Loss value, flat gradient and per-row outputs such as TD errors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub stats: BTreeMap<String, f64>,
    pub row_outputs: BTreeMap<String, Vec<f64>>,
}

/// A utility either reports statistics or mutates weights, never both.
#[derive(Debug, Clone, PartialEq)]
pub enum UtilityOutcome {
    Stats(BTreeMap<String, f64>),
    WeightsUpdated,
}

/// The algorithm-specific half of a trainer. Implementations are confined
/// to one actor at a time.
pub trait PolicyGraph: Send {
    fn obs_dim(&self) -> usize;

    fn action_space(&self) -> &ActionSpace;

    /// Width of the recurrent state; zero for feed-forward graphs.
    fn state_dim(&self) -> usize {
        0
    }

    /// Names of the auxiliary outputs `act` produces, in a fixed order.
    fn aux_output_names(&self) -> &'static [&'static str];

    /// Computes actions for every observation row. `rngs` holds one generator
    /// per row; `explore = false` selects greedy actions.
    fn act(&mut self, obs: &Matrix, rngs: &mut [SeededRng], explore: bool) -> Result<ActOutput, PolicyError>;

    /// Trajectory postprocessor. `peers` are the time-aligned batches of the
    /// other agents in a multi-agent episode.
    fn postprocess(&self, batch: SampleBatch, peers: &[SampleBatch]) -> Result<SampleBatch, PolicyError>;

    /// Loss and flat gradient; a pure function of the weights and `batch`.
    fn gradients(&self, batch: &SampleBatch) -> Result<GradientOutput, PolicyError>;

    fn get_weights(&self) -> Vec<f64>;

    fn set_weights(&mut self, weights: &[f64]) -> Result<(), PolicyError>;

    /// `(rows, cols)` of each weight tensor in `get_weights` order, stored
    /// row-major. The default treats the whole vector as one row.
    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        vec![(1, self.get_weights().len())]
    }

    fn utility_names(&self) -> &'static [&'static str] {
        &[]
    }

    fn call_utility(&mut self, name: &str, _arg: f64) -> Result<UtilityOutcome, PolicyError> {
        Err(PolicyError::UnknownUtility(name.into()))
    }

    fn clone_graph(&self) -> Box<dyn PolicyGraph>;
}

pub(crate) fn check_rngs(rows: usize, rngs: &[SeededRng]) -> Result<(), PolicyError> {
    if rngs.len() < rows {
        Err(PolicyError::RngCount {
            expected: rows,
            found: rngs.len(),
        })
    } else {
        Ok(())
    }
}

/// Linearly annealed exploration rate, clamped at `eps_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub decay_steps: u64,
}

impl ExplorationSchedule {
    pub fn epsilon_at(&self, t: u64) -> f64 {
        if self.decay_steps == 0 || t >= self.decay_steps {
            return self.eps_end;
        }
        let frac = t as f64 / self.decay_steps as f64;
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self {
            eps_start: 1.0,
            eps_end: 0.02,
            decay_steps: 10_000,
        }
    }
}

/// Per-worker exploration rates `base^(1 + 7·i/(n−1))`; a single worker gets
/// `base`.
pub fn apex_epsilons(n: usize, base: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            libm::pow(base, 1.0 + frac * 7.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = ExplorationSchedule {
            eps_start: 1.0,
            eps_end: 0.1,
            decay_steps: 100,
        };
        assert_eq!(s.epsilon_at(0), 1.0);
        assert_eq!(s.epsilon_at(100), 0.1);
        assert_eq!(s.epsilon_at(5000), 0.1);
        assert!((s.epsilon_at(50) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn apex_epsilon_formula() {
        let e = apex_epsilons(2, 0.4);
        assert_eq!(e[0], 0.4);
        assert!((e[1] - libm::pow(0.4, 8.0)).abs() < 1e-18);
        assert_eq!(apex_epsilons(1, 0.4), alloc::vec![0.4]);
        let four = apex_epsilons(4, 0.4);
        assert!(four.windows(2).all(|w| w[0] > w[1]));
    }
}
