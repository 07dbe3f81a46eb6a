//! Q-learning graph: ε-greedy acting, n-step postprocessing, Huber loss on
//! TD errors against a periodically synced target network.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::batch::{columns, SampleBatch};
use crate::envs::{Action, ActionSpace};
use crate::policy::categorical::discrete_actions;
use crate::policy::postprocessing::n_step_windows;
use crate::policy::{check_rngs, ActOutput, ExplorationSchedule, GradientOutput, PolicyError, PolicyGraph, UtilityOutcome};
use crate::rng::{seeded, SeededRng};
use crate::tensor::{argmax, huber, Matrix, MlpParams};

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub n_step: usize,
    pub huber_delta: f64,
    pub exploration: ExplorationSchedule,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            gamma: 0.99,
            n_step: 3,
            huber_delta: 1.0,
            exploration: ExplorationSchedule::default(),
        }
    }
}

/// Mean Huber loss of `Q(o,a) − (r + discount·max_a' Q_target(o', a'))`, its
/// gradient w.r.t. the online network and the per-row TD errors.
///
/// `rewards` and `new_obs` are expected to be n-step transformed, with the
/// bootstrap multiplier in the `discount` column.
pub fn dqn_loss(
    q: &MlpParams,
    target: &MlpParams,
    batch: &SampleBatch,
    huber_delta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), PolicyError> {
    let discount = batch
        .column(columns::DISCOUNT)
        .map_err(|_| PolicyError::MissingColumn(columns::DISCOUNT.into()))?;
    let next_q = target.predict(&batch.new_obs_matrix())?;
    let (qs, cache) = q.forward(&batch.obs_matrix())?;
    let n = batch.len().max(1) as f64;
    let mut upstream = Matrix::zeros(qs.rows(), qs.cols());
    let mut td = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for r in 0..batch.len() {
        let a = batch.actions[r * batch.action_dim] as usize;
        let best_next = next_q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = batch.rewards[r] + discount[r] * best_next;
        let err = qs.get(r, a) - y;
        let (l, d) = huber(err, huber_delta);
        loss += l;
        upstream.set(r, a, d / n);
        td.push(err);
    }
    let grads = q.backward(&cache, &upstream)?;
    Ok((loss / n, grads.flatten(), td))
}

#[derive(Debug, Clone)]
pub struct DqnGraph {
    q: MlpParams,
    target: MlpParams,
    cfg: DqnConfig,
    action_space: ActionSpace,
    timestep: u64,
    epsilon_override: Option<f64>,
}

impl DqnGraph {
    pub fn new(obs_dim: usize, action_space: &ActionSpace, cfg: DqnConfig, seed: u64) -> Result<Self, PolicyError> {
        let n = discrete_actions(action_space)?;
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(n);
        let q = MlpParams::new(&sizes, &mut seeded(seed));
        Ok(Self {
            target: q.clone(),
            q,
            cfg,
            action_space: action_space.clone(),
            timestep: 0,
            epsilon_override: None,
        })
    }

    pub fn config(&self) -> &DqnConfig {
        &self.cfg
    }

    pub fn q_params(&self) -> &MlpParams {
        &self.q
    }

    pub fn target_weights(&self) -> Vec<f64> {
        self.target.flatten()
    }

    /// `θ_target ← θ`
    pub fn target_sync(&mut self) {
        self.target = self.q.clone();
    }

    /// Pins ε instead of following the schedule.
    pub fn set_epsilon(&mut self, eps: Option<f64>) {
        self.epsilon_override = eps;
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_override
            .unwrap_or_else(|| self.cfg.exploration.epsilon_at(self.timestep))
    }
}

impl PolicyGraph for DqnGraph {
    fn obs_dim(&self) -> usize {
        self.q.input_dim()
    }

    fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    fn aux_output_names(&self) -> &'static [&'static str] {
        &[]
    }

    fn act(&mut self, obs: &Matrix, rngs: &mut [SeededRng], explore: bool) -> Result<ActOutput, PolicyError> {
        check_rngs(obs.rows(), rngs)?;
        let qs = self.q.predict(obs)?;
        let eps = self.epsilon();
        let n = qs.cols();
        let actions = rngs
            .iter_mut()
            .take(obs.rows())
            .enumerate()
            .map(|(r, rng)| {
                let random = explore && rng.random::<f64>() < eps;
                Action::Discrete(if random {
                    rng.random_range(0..n)
                } else {
                    argmax(qs.row(r))
                })
            })
            .collect();
        Ok(ActOutput {
            actions,
            h_next: vec![Vec::new(); obs.rows()],
            aux: BTreeMap::new(),
        })
    }

    /// Rewrites each episode segment into n-step form: `rewards` becomes the
    /// discounted window sum, `new_obs` the observation after the window,
    /// `discount` the bootstrap multiplier. Initial priorities go in `td_error`.
    fn postprocess(&self, mut batch: SampleBatch, _peers: &[SampleBatch]) -> Result<SampleBatch, PolicyError> {
        let len = batch.len();
        let mut rewards = vec![0.0; len];
        let mut discount = vec![0.0; len];
        let mut new_obs = vec![0.0; batch.new_obs.len()];
        let mut dones = vec![false; len];
        let d = batch.obs_dim;
        for seg in batch.episode_segments() {
            let windows = n_step_windows(
                &batch.rewards[seg.clone()],
                &batch.dones[seg.clone()],
                self.cfg.n_step,
                self.cfg.gamma,
            )?;
            for (k, w) in windows.into_iter().enumerate() {
                let t = seg.start + k;
                let last = seg.start + w.last;
                rewards[t] = w.reward;
                discount[t] = w.discount;
                dones[t] = batch.dones[last];
                new_obs[t * d..(t + 1) * d].copy_from_slice(batch.new_obs_row(last));
            }
        }
        batch.rewards = rewards;
        batch.dones = dones;
        batch.new_obs = new_obs;
        batch.set_column(columns::DISCOUNT, discount)?;
        let (_, _, td) = dqn_loss(&self.q, &self.target, &batch, self.cfg.huber_delta)?;
        batch.set_column(columns::TD_ERROR, td)?;
        Ok(batch)
    }

    fn gradients(&self, batch: &SampleBatch) -> Result<GradientOutput, PolicyError> {
        let (loss, grads, td) = dqn_loss(&self.q, &self.target, batch, self.cfg.huber_delta)?;
        let mut row_outputs = BTreeMap::new();
        row_outputs.insert(columns::TD_ERROR.to_string(), td);
        let mut stats = BTreeMap::new();
        stats.insert("td_loss".to_string(), loss);
        Ok(GradientOutput {
            loss,
            grads,
            stats,
            row_outputs,
        })
    }

    fn get_weights(&self) -> Vec<f64> {
        self.q.flatten()
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.q.shapes()
    }

    fn set_weights(&mut self, weights: &[f64]) -> Result<(), PolicyError> {
        Ok(self.q.load_flat(weights)?)
    }

    fn utility_names(&self) -> &'static [&'static str] {
        &["update_target", "set_timestep", "set_epsilon"]
    }

    /// `update_target` syncs the target network; `set_timestep` advances the
    /// exploration schedule; `set_epsilon` pins ε (a negative argument
    /// restores the schedule).
    fn call_utility(&mut self, name: &str, arg: f64) -> Result<UtilityOutcome, PolicyError> {
        match name {
            "update_target" => {
                self.target_sync();
                Ok(UtilityOutcome::WeightsUpdated)
            }
            "set_timestep" | "set_epsilon" => {
                if name == "set_timestep" {
                    self.timestep = arg.max(0.0) as u64;
                } else {
                    self.epsilon_override = (arg >= 0.0).then_some(arg);
                }
                let mut s = BTreeMap::new();
                s.insert("epsilon".to_string(), self.epsilon());
                Ok(UtilityOutcome::Stats(s))
            }
            other => Err(PolicyError::UnknownUtility(other.into())),
        }
    }

    fn clone_graph(&self) -> Box<dyn PolicyGraph> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Transition;
    use crate::tensor::Layer;

    fn linear_q(w: [f64; 2]) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                weight: Matrix::from_vec(1, 2, w.to_vec()).unwrap(),
                bias: vec![0.0, 0.0],
            }],
        }
    }

    fn transition(obs: f64, action: usize, reward: f64, next: f64, discount: f64) -> SampleBatch {
        let mut b = SampleBatch::new(1, 1);
        b.push(Transition {
            obs: &[obs],
            action: &[action as f64],
            reward,
            done: discount == 0.0,
            new_obs: &[next],
            eps_id: 0,
            agent_id: 0,
            t_index: 0,
        });
        b.set_column(columns::DISCOUNT, vec![discount]).unwrap();
        b
    }

    #[test]
    fn exact_q_gives_zero_loss() {
        let q = linear_q([2.0, -1.0]);
        // Q(1, a=0) = 2 ; target = r since terminal
        let b = transition(1.0, 0, 2.0, 5.0, 0.0);
        let (loss, g, td) = dqn_loss(&q, &q, &b, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(td, vec![0.0]);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn scalar_huber_oracle() {
        let q = linear_q([0.5, 1.5]);
        let target = linear_q([1.0, 3.0]);
        // Q(2, a=1) = 3; y = 0.25 + 0.9 * max(1*4, 3*4) = 11.05 ; err = -8.05
        let b = transition(2.0, 1, 0.25, 4.0, 0.9);
        let (loss, g, td) = dqn_loss(&q, &target, &b, 1.0).unwrap();
        let err: f64 = 3.0 - 11.05;
        assert!((td[0] - err).abs() < 1e-12);
        assert!((loss - (err.abs() - 0.5)).abs() < 1e-12);
        // d/dw_1 = huber'(err) * obs = -1 * 2
        assert!((g[1] + 2.0).abs() < 1e-12);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn target_sync_copies_bitwise_and_is_idempotent() {
        let space = ActionSpace::Discrete(4);
        let mut g = DqnGraph::new(3, &space, DqnConfig::default(), 7).unwrap();
        let w: Vec<f64> = g.get_weights().iter().map(|x| x + 0.125).collect();
        g.set_weights(&w).unwrap();
        assert_ne!(g.target_weights(), g.get_weights());
        assert_eq!(g.call_utility("update_target", 0.0), Ok(UtilityOutcome::WeightsUpdated));
        assert_eq!(g.target_weights(), g.get_weights());
        g.target_sync();
        assert_eq!(g.target_weights(), g.get_weights());
    }

    #[test]
    fn epsilon_follows_schedule_and_override() {
        let space = ActionSpace::Discrete(2);
        let mut g = DqnGraph::new(1, &space, DqnConfig::default(), 0).unwrap();
        assert_eq!(g.epsilon(), 1.0);
        g.call_utility("set_timestep", 20_000.0).unwrap();
        assert_eq!(g.epsilon(), 0.02);
        g.call_utility("set_epsilon", 0.3).unwrap();
        assert_eq!(g.epsilon(), 0.3);
        g.call_utility("set_epsilon", -1.0).unwrap();
        assert_eq!(g.epsilon(), 0.02);
        assert!(g.call_utility("nope", 0.0).is_err());
    }

    #[test]
    fn missing_discount_column() {
        let q = linear_q([0.0, 0.0]);
        let mut b = transition(1.0, 0, 0.0, 0.0, 0.5);
        b.extra.clear();
        assert!(matches!(dqn_loss(&q, &q, &b, 1.0), Err(PolicyError::MissingColumn(_))));
    }
}
