//! Categorical policy gradient with a learned value baseline.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::batch::{columns, SampleBatch};
use crate::envs::ActionSpace;
use crate::policy::categorical::{discrete_actions, entropy_grad, logp_grad, policy_term, ActorCritic};
use crate::policy::{ActOutput, AdvantageConfig, GradientOutput, PolicyError, PolicyGraph, UtilityOutcome};
use crate::rng::SeededRng;
use crate::tensor::{Matrix, MlpParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PgConfig {
    pub hidden: Vec<usize>,
    pub advantage: AdvantageConfig,
    /// Weight of the value-function squared error.
    pub vf_coeff: f64,
    pub entropy_coeff: f64,
    /// Add the peers' rewards to the agent's own before estimating advantages.
    pub shared_reward: bool,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            advantage: AdvantageConfig {
                gamma: 0.99,
                lambda: 0.95,
            },
            vf_coeff: 0.5,
            entropy_coeff: 0.0,
            shared_reward: false,
        }
    }
}

/// `−mean(log π(a|o) · advantage)` and its gradient w.r.t. the logits network.
pub fn pg_loss(policy: &MlpParams, batch: &SampleBatch) -> Result<(f64, Vec<f64>), PolicyError> {
    let adv = batch
        .column(columns::ADVANTAGES)
        .map_err(|_| PolicyError::MissingColumn(columns::ADVANTAGES.into()))?;
    policy_term(policy, batch, &|r, logits| {
        let a = batch.actions[r * batch.action_dim] as usize;
        let (lp, d) = logp_grad(logits, a);
        (-lp * adv[r], d.into_iter().map(|x| -x * adv[r]).collect())
    })
}

#[derive(Debug, Clone)]
pub struct PgGraph {
    net: ActorCritic,
    cfg: PgConfig,
}

impl PgGraph {
    pub fn new(obs_dim: usize, action_space: &ActionSpace, cfg: PgConfig, seed: u64) -> Result<Self, PolicyError> {
        let n = discrete_actions(action_space)?;
        Ok(Self {
            net: ActorCritic::new(obs_dim, n, &cfg.hidden, seed),
            cfg,
        })
    }

    pub fn config(&self) -> &PgConfig {
        &self.cfg
    }

    pub fn policy_params(&self) -> &MlpParams {
        &self.net.policy
    }
}

impl PolicyGraph for PgGraph {
    fn obs_dim(&self) -> usize {
        self.net.policy.input_dim()
    }

    fn action_space(&self) -> &ActionSpace {
        &self.net.action_space
    }

    fn aux_output_names(&self) -> &'static [&'static str] {
        &[columns::LOGP, columns::VF_PREDS]
    }

    fn act(&mut self, obs: &Matrix, rngs: &mut [SeededRng], explore: bool) -> Result<ActOutput, PolicyError> {
        self.net.act(obs, rngs, explore)
    }

    fn postprocess(&self, batch: SampleBatch, peers: &[SampleBatch]) -> Result<SampleBatch, PolicyError> {
        self.net
            .gae_postprocess(batch, peers, self.cfg.advantage, self.cfg.shared_reward)
    }

    fn gradients(&self, batch: &SampleBatch) -> Result<GradientOutput, PolicyError> {
        let (pi_loss, mut grads) = if self.cfg.entropy_coeff == 0.0 {
            pg_loss(&self.net.policy, batch)?
        } else {
            let adv = batch
                .column(columns::ADVANTAGES)
                .map_err(|_| PolicyError::MissingColumn(columns::ADVANTAGES.into()))?;
            let c = self.cfg.entropy_coeff;
            policy_term(&self.net.policy, batch, &|r, logits| {
                let a = batch.actions[r * batch.action_dim] as usize;
                let (lp, d) = logp_grad(logits, a);
                let (h, dh) = entropy_grad(logits, c);
                let grad = d.iter().zip(&dh).map(|(x, e)| -x * adv[r] + e).collect();
                (-lp * adv[r] - c * h, grad)
            })?
        };
        let (vf_loss, vf_grads) = self.net.value_term(batch, self.cfg.vf_coeff)?;
        grads.extend(vf_grads);
        let mut stats = BTreeMap::new();
        stats.insert("policy_loss".to_string(), pi_loss);
        stats.insert("vf_loss".to_string(), vf_loss);
        Ok(GradientOutput {
            loss: pi_loss + vf_loss,
            grads,
            stats,
            row_outputs: BTreeMap::new(),
        })
    }

    fn get_weights(&self) -> Vec<f64> {
        self.net.weights()
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.net.shapes()
    }

    fn set_weights(&mut self, weights: &[f64]) -> Result<(), PolicyError> {
        self.net.set_weights(weights)
    }

    fn utility_names(&self) -> &'static [&'static str] {
        &["train_stats"]
    }

    fn call_utility(&mut self, name: &str, _arg: f64) -> Result<UtilityOutcome, PolicyError> {
        match name {
            "train_stats" => {
                let mut s = BTreeMap::new();
                s.insert("num_params".to_string(), self.net.weights().len() as f64);
                Ok(UtilityOutcome::Stats(s))
            }
            other => Err(PolicyError::UnknownUtility(other.into())),
        }
    }

    fn clone_graph(&self) -> Box<dyn PolicyGraph> {
        Box::new(self.clone())
    }
}
