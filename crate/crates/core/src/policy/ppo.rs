//! Clipped-surrogate proximal policy optimization.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::batch::{columns, SampleBatch};
use crate::envs::ActionSpace;
use crate::policy::categorical::{discrete_actions, entropy_grad, logp_grad, policy_term, ActorCritic};
use crate::policy::{ActOutput, AdvantageConfig, GradientOutput, PolicyError, PolicyGraph};
use crate::rng::SeededRng;
use crate::tensor::{Matrix, MlpParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub advantage: AdvantageConfig,
    pub clip: f64,
    pub vf_coeff: f64,
    pub entropy_coeff: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            advantage: AdvantageConfig::default(),
            clip: 0.2,
            vf_coeff: 0.5,
            entropy_coeff: 0.0,
        }
    }
}

fn require<'a>(batch: &'a SampleBatch, name: &str) -> Result<&'a [f64], PolicyError> {
    batch
        .column(name)
        .map_err(|_| PolicyError::MissingColumn(name.into()))
}

/// `−mean(min(ρ·A, clip(ρ, 1−c, 1+c)·A))` with `ρ = exp(logp − logp_old)`,
/// where `logp_old` is the `logp` column recorded at sampling time. An
/// optional entropy bonus is subtracted with weight `entropy_coeff`.
pub fn ppo_clip_loss(
    policy: &MlpParams,
    batch: &SampleBatch,
    clip: f64,
    entropy_coeff: f64,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let adv = require(batch, columns::ADVANTAGES)?;
    let logp_old = require(batch, columns::LOGP)?;
    policy_term(policy, batch, &|r, logits| {
        let a = batch.actions[r * batch.action_dim] as usize;
        let (lp, dlp) = logp_grad(logits, a);
        let ratio = libm::exp(lp - logp_old[r]);
        let unclipped = ratio * adv[r];
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv[r];
        let (surrogate, mut grad) = if unclipped <= clipped {
            (unclipped, dlp.iter().map(|d| -adv[r] * ratio * d).collect::<Vec<_>>())
        } else {
            (clipped, vec![0.0; dlp.len()])
        };
        let mut loss = -surrogate;
        if entropy_coeff != 0.0 {
            let (h, dh) = entropy_grad(logits, entropy_coeff);
            loss -= entropy_coeff * h;
            for (g, e) in grad.iter_mut().zip(dh) {
                *g += e;
            }
        }
        (loss, grad)
    })
}

#[derive(Debug, Clone)]
pub struct PpoGraph {
    net: ActorCritic,
    cfg: PpoConfig,
}

impl PpoGraph {
    pub fn new(obs_dim: usize, action_space: &ActionSpace, cfg: PpoConfig, seed: u64) -> Result<Self, PolicyError> {
        let n = discrete_actions(action_space)?;
        Ok(Self {
            net: ActorCritic::new(obs_dim, n, &cfg.hidden, seed),
            cfg,
        })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn policy_params(&self) -> &MlpParams {
        &self.net.policy
    }
}

impl PolicyGraph for PpoGraph {
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
        self.net.gae_postprocess(batch, peers, self.cfg.advantage, false)
    }

    fn gradients(&self, batch: &SampleBatch) -> Result<GradientOutput, PolicyError> {
        let (surrogate, mut grads) = ppo_clip_loss(&self.net.policy, batch, self.cfg.clip, self.cfg.entropy_coeff)?;
        let (vf_loss, vf_grads) = self.net.value_term(batch, self.cfg.vf_coeff)?;
        grads.extend(vf_grads);
        let mut stats = BTreeMap::new();
        stats.insert("policy_loss".to_string(), surrogate);
        stats.insert("vf_loss".to_string(), vf_loss);
        Ok(GradientOutput {
            loss: surrogate + vf_loss,
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

    fn clone_graph(&self) -> Box<dyn PolicyGraph> {
        Box::new(self.clone())
    }
}
