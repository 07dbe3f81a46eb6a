//! Advantage estimation and n-step returns.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            lambda: 0.95,
        }
    }
}

fn same_len(op: &'static str, expected: usize, found: usize) -> Result<(), TensorError> {
    if expected == found {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, expected, found })
    }
}

/// Generalized advantage estimation by backward recurrence.
///
/// `δ_t = r_t + γ·V_{t+1}·(1−done_t) − V_t`, where `V_{t+1}` is the next row's
/// value or `bootstrap_value` after the last row. Advantages accumulate with
/// `γλ` and reset at every `done`. Returns `(advantages, value_targets)` with
/// `value_targets = advantages + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    cfg: AdvantageConfig,
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let n = rewards.len();
    same_len("compute_gae", n, values.len())?;
    same_len("compute_gae", n, dones.len())?;
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + cfg.gamma * next_value * not_done - values[t];
        running = delta + cfg.gamma * cfg.lambda * not_done * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// One n-step window starting at some row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NStepWindow {
    /// `Σ_{k<m} γ^k r_{t+k}`
    pub reward: f64,
    /// `γ^m`, or 0 when the episode ended inside the window.
    pub discount: f64,
    /// Index of the last row inside the window (`t+m−1`).
    pub last: usize,
}

/// Windows of up to `n` rows, cut at the first `done` and at the end of the
/// data.
pub fn n_step_windows(rewards: &[f64], dones: &[bool], n: usize, gamma: f64) -> Result<Vec<NStepWindow>, TensorError> {
    assert!(n >= 1, "n-step horizon must be at least 1");
    let len = rewards.len();
    same_len("n_step_returns", len, dones.len())?;
    Ok((0..len)
        .map(|t| {
            let mut reward = 0.0;
            let mut scale = 1.0;
            let mut last = t;
            let mut terminated = false;
            for k in 0..n {
                let i = t + k;
                if i >= len {
                    break;
                }
                reward += scale * rewards[i];
                scale *= gamma;
                last = i;
                if dones[i] {
                    terminated = true;
                    break;
                }
            }
            NStepWindow {
                reward,
                discount: if terminated { 0.0 } else { scale },
                last,
            }
        })
        .collect())
}

/// `targets_t = Σ_{k<n} γ^k r_{t+k} + γ^n·bootstrap_next[t+n−1]`, truncated at
/// `done` (no bootstrap) and at the end of the data (bootstrap from the last
/// row). `bootstrap_next[j]` is the value of the state reached after row `j`.
pub fn n_step_returns(
    rewards: &[f64],
    dones: &[bool],
    bootstrap_next: &[f64],
    n: usize,
    gamma: f64,
) -> Result<Vec<f64>, TensorError> {
    same_len("n_step_returns", rewards.len(), bootstrap_next.len())?;
    Ok(n_step_windows(rewards, dones, n, gamma)?
        .into_iter()
        .map(|w| w.reward + w.discount * bootstrap_next[w.last])
        .collect())
}
