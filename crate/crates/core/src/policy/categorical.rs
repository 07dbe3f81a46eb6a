//! Shared actor-critic machinery for the categorical graphs (PG and PPO).

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::batch::{columns, SampleBatch};
use crate::envs::{Action, ActionSpace};
use crate::policy::postprocessing::{compute_gae, AdvantageConfig};
use crate::policy::{check_rngs, ActOutput, PolicyError};
use crate::rng::{seeded, SeededRng};
use crate::tensor::{argmax, log_softmax, sample_categorical, Matrix, MlpParams};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ActorCritic {
    pub policy: MlpParams,
    pub value: MlpParams,
    pub action_space: ActionSpace,
}

/// Contribution of one row to the policy loss: `(loss, ∂loss/∂logits)`.
pub(crate) type RowTerm<'a> = &'a dyn Fn(usize, &[f64]) -> (f64, Vec<f64>);

impl ActorCritic {
    pub fn new(obs_dim: usize, n_actions: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_actions);
        let policy = MlpParams::new(&sizes, &mut rng);
        *sizes.last_mut().expect("non-empty") = 1;
        let value = MlpParams::new(&sizes, &mut rng);
        Self {
            policy,
            value,
            action_space: ActionSpace::Discrete(n_actions),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.policy.flatten();
        self.value.write_flat(&mut w);
        w
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = self.policy.shapes();
        s.extend(self.value.shapes());
        s
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<(), PolicyError> {
        let split = self.policy.num_params();
        if w.len() != split + self.value.num_params() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "set_weights",
                expected: split + self.value.num_params(),
                found: w.len(),
            }
            .into());
        }
        self.policy.load_flat(&w[..split])?;
        self.value.load_flat(&w[split..])?;
        Ok(())
    }

    pub fn values(&self, obs: &Matrix) -> Result<Vec<f64>, PolicyError> {
        Ok(self.value.predict(obs)?.into_vec())
    }

    pub fn act(&self, obs: &Matrix, rngs: &mut [SeededRng], explore: bool) -> Result<ActOutput, PolicyError> {
        check_rngs(obs.rows(), rngs)?;
        let logits = self.policy.predict(obs)?;
        let mut actions = Vec::with_capacity(obs.rows());
        let mut logp = Vec::with_capacity(obs.rows());
        for (r, rng) in rngs.iter_mut().enumerate().take(obs.rows()) {
            let lp = log_softmax(logits.row(r));
            let a = if explore {
                let probs: Vec<f64> = lp.iter().map(|l| libm::exp(*l)).collect();
                sample_categorical(&probs, rng)
            } else {
                argmax(logits.row(r))
            };
            logp.push(lp[a]);
            actions.push(Action::Discrete(a));
        }
        let mut aux = BTreeMap::new();
        aux.insert(columns::LOGP.to_string(), logp);
        aux.insert(columns::VF_PREDS.to_string(), self.values(obs)?);
        Ok(ActOutput {
            actions,
            h_next: vec![Vec::new(); obs.rows()],
            aux,
        })
    }

    /// Adds `advantages` and `value_targets` per episode segment. With
    /// `shared_reward`, peer rewards are added to the agent's own first.
    pub fn gae_postprocess(
        &self,
        mut batch: SampleBatch,
        peers: &[SampleBatch],
        cfg: AdvantageConfig,
        shared_reward: bool,
    ) -> Result<SampleBatch, PolicyError> {
        if shared_reward {
            for p in peers {
                if p.len() != batch.len() {
                    return Err(crate::batch::BatchError::SchemaMismatch("peer batch not time-aligned".into()).into());
                }
                for (r, pr) in batch.rewards.iter_mut().zip(&p.rewards) {
                    *r += pr;
                }
            }
        }
        let values = batch.column(columns::VF_PREDS)?.to_vec();
        let mut adv = vec![0.0; batch.len()];
        let mut targets = vec![0.0; batch.len()];
        for seg in batch.episode_segments() {
            let last = seg.end - 1;
            let bootstrap = if batch.dones[last] {
                0.0
            } else {
                let next = Matrix::from_vec(1, batch.obs_dim, batch.new_obs_row(last).to_vec())?;
                self.values(&next)?[0]
            };
            let (a, t) = compute_gae(
                &batch.rewards[seg.clone()],
                &values[seg.clone()],
                &batch.dones[seg.clone()],
                bootstrap,
                cfg,
            )?;
            adv[seg.clone()].copy_from_slice(&a);
            targets[seg].copy_from_slice(&t);
        }
        batch.set_column(columns::ADVANTAGES, adv)?;
        batch.set_column(columns::VALUE_TARGETS, targets)?;
        Ok(batch)
    }

    /// `coeff · mean((V − value_target)²)` and its gradient w.r.t. value
    /// parameters.
    pub fn value_term(&self, batch: &SampleBatch, coeff: f64) -> Result<(f64, Vec<f64>), PolicyError> {
        let targets = batch.column(columns::VALUE_TARGETS)?;
        let obs = batch.obs_matrix();
        let (v, cache) = self.value.forward(&obs)?;
        let n = batch.len().max(1) as f64;
        let mut upstream = Matrix::zeros(v.rows(), 1);
        let mut loss = 0.0;
        for r in 0..v.rows() {
            let diff = v.get(r, 0) - targets[r];
            loss += diff * diff;
            upstream.set(r, 0, coeff * 2.0 * diff / n);
        }
        let grads = self.value.backward(&cache, &upstream)?;
        Ok((coeff * loss / n, grads.flatten()))
    }
}

/// Mean of `term` over rows, plus its gradient w.r.t. the parameters of the
/// logits network.
pub(crate) fn policy_term(policy: &MlpParams, batch: &SampleBatch, term: RowTerm<'_>) -> Result<(f64, Vec<f64>), PolicyError> {
    let obs = batch.obs_matrix();
    let (logits, cache) = policy.forward(&obs)?;
    let n = batch.len().max(1) as f64;
    let mut upstream = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for r in 0..logits.rows() {
        let (l, d) = term(r, logits.row(r));
        loss += l;
        for (c, v) in d.into_iter().enumerate() {
            upstream.set(r, c, v / n);
        }
    }
    let grads = policy.backward(&cache, &upstream)?;
    Ok((loss / n, grads.flatten()))
}

/// `∂/∂logits` of `−c·H(softmax(logits))`, with the entropy itself.
pub(crate) fn entropy_grad(logits: &[f64], coeff: f64) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let p: Vec<f64> = lp.iter().map(|l| libm::exp(*l)).collect();
    let h: f64 = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
    let d = p.iter().zip(&lp).map(|(p, l)| coeff * p * (l + h)).collect();
    (h, d)
}

/// `∂ log softmax(logits)[a] / ∂logits = onehot(a) − softmax(logits)`.
pub(crate) fn logp_grad(logits: &[f64], a: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let d = lp
        .iter()
        .enumerate()
        .map(|(j, l)| if j == a { 1.0 } else { 0.0 } - libm::exp(*l))
        .collect();
    (lp[a], d)
}

pub(crate) fn discrete_actions(space: &ActionSpace) -> Result<usize, PolicyError> {
    match space {
        ActionSpace::Discrete(n) => Ok(*n),
        other => Err(PolicyError::UnsupportedActionSpace(other.clone())),
    }
}
