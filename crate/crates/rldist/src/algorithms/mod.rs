//! Trainers: graphs, evaluators and a policy optimizer bound together by a
//! config, advanced one iteration at a time.

use std::collections::BTreeMap;
use std::sync::Arc;

use rldist_core::envs::{EnvError, EnvSpec};
use rldist_core::tensor::TensorError;
use rldist_core::policy::{
    AdvantageConfig, DqnConfig, DqnGraph, PgConfig, PgGraph, PolicyError, PolicyGraph, PpoConfig, PpoGraph,
};
use serde::Serialize;
use thiserror::Error;

use crate::evaluation::{EpisodeStats, EvalError, GraphBuilder};
use crate::framing::FrameError;
use crate::optimizers::{OptimizerError, OptimizerStats};
use crate::taskrt::{ActorRef, ResourceClaim, Runtime, RuntimeError};

mod checkpoint;
pub mod config;
pub mod es;
pub mod ppo_es;
mod standard;

pub use checkpoint::{TrainerCheckpoint, WeightCheckpoint};
pub use config::{Resolved, TrainerConfig, Violation};
pub use es::{EsOptimizer, EsTrainer};
pub use ppo_es::{ppo_es_outer_step, PpoEsPopulation, PpoEsTrainer};
pub use standard::OptimizerTrainer;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<Violation>),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<TrainError> for String {
    fn from(e: TrainError) -> String {
        e.to_string()
    }
}

/// One record of the metrics stream. Fields ending in `wall_time` are
/// timings; everything else is reproducible from config and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationResult {
    pub iter: u64,
    pub timesteps_total: u64,
    pub timesteps_this_iter: u64,
    pub episodes_total: u64,
    pub episodes_this_iter: u64,
    /// Mean return of the episodes finished this iteration, or the previous
    /// value when none finished; `None` until the first episode ends.
    pub episode_reward_mean: Option<f64>,
    pub episode_len_mean: Option<f64>,
    pub optimizer: OptimizerStats,
    /// Algorithm-specific scalars.
    pub info: BTreeMap<String, f64>,
    pub wall_time: f64,
}

/// Counters shared by every trainer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub iteration: u64,
    pub timesteps_total: u64,
    pub episodes_total: u64,
    pub reward_mean: Option<f64>,
    pub len_mean: Option<f64>,
}

impl Progress {
    /// Folds one iteration's episodes and sample count into the totals and
    /// builds the record.
    pub fn advance(
        &mut self,
        timesteps: u64,
        episodes: &EpisodeStats,
        optimizer: OptimizerStats,
        info: BTreeMap<String, f64>,
        wall_time: f64,
    ) -> IterationResult {
        let n = episodes.returns.len();
        let means = (n > 0).then(|| {
            (
                episodes.returns.iter().sum::<f64>() / n as f64,
                episodes.lengths.iter().map(|&l| l as f64).sum::<f64>() / n as f64,
            )
        });
        self.record(timesteps, n as u64, means, optimizer, info, wall_time)
    }

    /// [`advance`](Self::advance) from precomputed episode count and means.
    pub fn record(
        &mut self,
        timesteps: u64,
        episodes: u64,
        means: Option<(f64, f64)>,
        optimizer: OptimizerStats,
        info: BTreeMap<String, f64>,
        wall_time: f64,
    ) -> IterationResult {
        self.iteration += 1;
        self.timesteps_total += timesteps;
        self.episodes_total += episodes;
        if let Some((r, l)) = means {
            self.reward_mean = Some(r);
            self.len_mean = Some(l);
        }
        IterationResult {
            iter: self.iteration,
            timesteps_total: self.timesteps_total,
            timesteps_this_iter: timesteps,
            episodes_total: self.episodes_total,
            episodes_this_iter: episodes,
            episode_reward_mean: self.reward_mean,
            episode_len_mean: self.len_mean,
            optimizer,
            info,
            wall_time,
        }
    }
}

/// The generic trainer contract. Tune and the PPO-ES outer loop drive
/// trainers only through this trait.
pub trait Trainable: Send {
    fn config(&self) -> &TrainerConfig;

    /// Exactly one optimizer step plus its scheduled utility calls.
    fn train(&mut self) -> Result<IterationResult, TrainError>;

    fn progress(&self) -> &Progress;

    fn get_weights(&self) -> Vec<f64>;

    fn set_weights(&mut self, w: &[f64]) -> Result<(), TrainError>;

    fn weight_shapes(&self) -> Vec<(usize, usize)>;

    /// Mean greedy return over `episodes` fresh episodes.
    fn evaluate(&mut self, episodes: usize) -> Result<f64, TrainError>;

    /// Hyperparameters that can change between iterations.
    fn hyperparameters(&self) -> BTreeMap<String, f64>;

    fn set_hyperparameter(&mut self, name: &str, value: f64) -> Result<(), TrainError>;

    fn checkpoint(&self) -> Result<TrainerCheckpoint, TrainError> {
        Ok(TrainerCheckpoint {
            weights: WeightCheckpoint::new(self.weight_shapes(), self.get_weights())?,
            config: self.config().clone(),
            progress: Progress {
                reward_mean: None,
                len_mean: None,
                ..self.progress().clone()
            },
        })
    }

    /// Loads weights and counters. Optimizer moments start fresh.
    fn restore(&mut self, ckpt: &TrainerCheckpoint) -> Result<(), TrainError>;
}

/// Builds the trainer a config names. Called inside an actor, every actor
/// the trainer spawns becomes that actor's child.
pub fn build_trainer(rt: &Runtime, cfg: &TrainerConfig) -> Result<Box<dyn Trainable>, TrainError> {
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(TrainError::Config(violations));
    }
    Ok(match cfg.algorithm.as_str() {
        "es" => Box::new(EsTrainer::new(rt.clone(), cfg.clone())?),
        "ppo_es" => Box::new(PpoEsTrainer::new(rt.clone(), cfg.clone())?),
        _ => Box::new(OptimizerTrainer::new(rt.clone(), cfg.clone())?),
    })
}

/// Builds with an explicit environment instead of the config's env name.
pub fn build_trainer_with_env(
    rt: &Runtime,
    cfg: &TrainerConfig,
    env: crate::evaluation::EnvFactory,
) -> Result<Box<dyn Trainable>, TrainError> {
    let violations: Vec<_> = cfg.validate().into_iter().filter(|v| v.key != "env").collect();
    if !violations.is_empty() {
        return Err(TrainError::Config(violations));
    }
    Ok(match cfg.algorithm.as_str() {
        "es" => Box::new(EsTrainer::with_env(rt.clone(), cfg.clone(), env)?),
        "ppo_es" => return Err(TrainError::Unsupported("ppo_es builds its population from env names".into())),
        _ => Box::new(OptimizerTrainer::with_env(rt.clone(), cfg.clone(), env)?),
    })
}

/// Graph constructor for an algorithm's resolved hyperparameters.
pub fn graph_builder(algorithm: &str, r: &Resolved) -> GraphBuilder {
    let advantage = AdvantageConfig {
        gamma: r.gamma,
        lambda: r.lambda,
    };
    match algorithm {
        "ppo" | "ppo_es" => {
            let cfg = PpoConfig {
                hidden: r.hidden.clone(),
                advantage,
                clip: r.clip,
                vf_coeff: r.vf_coeff,
                entropy_coeff: r.entropy_coeff,
            };
            Arc::new(move |spec: &EnvSpec, seed| {
                Ok(Box::new(PpoGraph::new(spec.obs_dim, &spec.action_space, cfg.clone(), seed)?) as Box<dyn PolicyGraph>)
            })
        }
        "dqn" | "apex" => {
            let cfg = DqnConfig {
                hidden: r.hidden.clone(),
                gamma: r.gamma,
                n_step: r.n_step,
                huber_delta: r.huber_delta,
                exploration: r.exploration,
            };
            Arc::new(move |spec: &EnvSpec, seed| {
                Ok(Box::new(DqnGraph::new(spec.obs_dim, &spec.action_space, cfg.clone(), seed)?) as Box<dyn PolicyGraph>)
            })
        }
        _ => {
            let cfg = PgConfig {
                hidden: r.hidden.clone(),
                advantage,
                vf_coeff: r.vf_coeff,
                entropy_coeff: r.entropy_coeff,
                shared_reward: r.shared_reward,
            };
            Arc::new(move |spec: &EnvSpec, seed| {
                Ok(Box::new(PgGraph::new(spec.obs_dim, &spec.action_space, cfg.clone(), seed)?) as Box<dyn PolicyGraph>)
            })
        }
    }
}

/// A trainer hosted in its own actor, running its driver loop there.
pub struct TrainerActor {
    pub trainer: Box<dyn Trainable>,
}

pub type TrainerRef = ActorRef<TrainerActor>;

/// Spawns an actor that builds the trainer for `cfg` on start. Its
/// evaluators become children of the trainer actor.
pub fn spawn_trainer(rt: &Runtime, cfg: TrainerConfig) -> Result<TrainerRef, RuntimeError> {
    rt.spawn_actor(ResourceClaim::default(), move |ctx| {
        let trainer = build_trainer(ctx.runtime(), &cfg).map_err(String::from)?;
        Ok(TrainerActor { trainer })
    })
}
