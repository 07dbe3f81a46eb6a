use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rldist_core::rng::mix;
use rldist_core::tensor::AdamConfig;

use super::{graph_builder, IterationResult, Progress, Resolved, TrainError, Trainable, TrainerCheckpoint, TrainerConfig};
use crate::evaluation::{spawn_evaluators, BatchMode, EnvFactory, EvaluatorConfig, GraphBuilder, PolicyEvaluator};
use crate::optimizers::{
    ApexConfig, ApexOptimizer, AsyncOptimizer, LocalMultipassOptimizer, ParamServerOptimizer, PolicyOptimizer,
    ReplayConfig, ReplayOptimizer, SyncOptimizer, UpdateRule,
};
use crate::taskrt::Runtime;

const EVAL_SEED_STREAM: u64 = 0xE7A1;

pub(super) fn update_rule(r: &Resolved) -> UpdateRule {
    if r.adam {
        UpdateRule::Adam(AdamConfig::new(r.lr))
    } else {
        UpdateRule::Sgd { stepsize: r.lr }
    }
}

pub(super) fn evaluator_config(cfg: &TrainerConfig, r: &Resolved) -> EvaluatorConfig {
    EvaluatorConfig {
        num_envs: r.num_envs,
        batch_steps: r.batch_steps,
        mode: if r.complete_episodes {
            BatchMode::CompleteEpisodes
        } else {
            BatchMode::TruncateEpisodes
        },
        seed: cfg.seed,
        env_step_latency: Duration::from_secs_f64(r.env_step_latency_ms / 1000.0),
        ..EvaluatorConfig::default()
    }
}

/// Greedy evaluation of `graph`'s weights on fresh episodes seeded from the
/// trainer seed and iteration.
pub(super) fn evaluate_weights(
    env: &EnvFactory,
    graph: Box<dyn rldist_core::policy::PolicyGraph>,
    seed: u64,
    iteration: u64,
    episodes: usize,
) -> Result<f64, TrainError> {
    let cfg = EvaluatorConfig {
        seed: mix(mix(seed, EVAL_SEED_STREAM), iteration),
        ..EvaluatorConfig::default()
    };
    let mut ev = PolicyEvaluator::new(env.clone(), graph, cfg)?;
    let returns = ev.evaluate(episodes, false)?;
    Ok(returns.iter().sum::<f64>() / returns.len().max(1) as f64)
}

/// PG, PPO, DQN, A3C and Ape-X: a policy graph plus whichever optimizer the
/// config selects.
pub struct OptimizerTrainer {
    cfg: TrainerConfig,
    resolved: Resolved,
    env: EnvFactory,
    optimizer: Box<dyn PolicyOptimizer>,
    progress: Progress,
    samples_seen: u64,
    target_syncs: Vec<u64>,
}

impl std::fmt::Debug for OptimizerTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptimizerTrainer")
            .field("algorithm", &self.cfg.algorithm)
            .field("optimizer", &self.optimizer.name())
            .field("progress", &self.progress)
            .finish()
    }
}

impl OptimizerTrainer {
    pub fn new(rt: Runtime, cfg: TrainerConfig) -> Result<Self, TrainError> {
        let env = EnvFactory::by_name(&cfg.env)?;
        Self::with_env(rt, cfg, env)
    }

    pub fn with_env(rt: Runtime, cfg: TrainerConfig, env: EnvFactory) -> Result<Self, TrainError> {
        let r = cfg.resolve();
        let builder = graph_builder(&cfg.algorithm, &r);
        let optimizer = build_optimizer(&rt, &cfg, &r, &env, &builder)?;
        Ok(Self {
            resolved: r,
            cfg,
            env,
            optimizer,
            progress: Progress::default(),
            samples_seen: 0,
            target_syncs: Vec::new(),
        })
    }

    pub fn optimizer(&self) -> &dyn PolicyOptimizer {
        self.optimizer.as_ref()
    }

    pub fn optimizer_mut(&mut self) -> &mut dyn PolicyOptimizer {
        self.optimizer.as_mut()
    }

    /// Iterations on which the target network was synced.
    pub fn target_syncs(&self) -> &[u64] {
        &self.target_syncs
    }

    fn uses_target(&self) -> bool {
        matches!(self.cfg.algorithm.as_str(), "dqn" | "apex")
    }
}

fn build_optimizer(
    rt: &Runtime,
    cfg: &TrainerConfig,
    r: &Resolved,
    env: &EnvFactory,
    builder: &GraphBuilder,
) -> Result<Box<dyn PolicyOptimizer>, TrainError> {
    let base = evaluator_config(cfg, r);
    let evaluators = spawn_evaluators(rt, cfg.num_evaluators, env, builder, &base)?;
    let local = builder(&env.spec(), cfg.seed)?;
    let rule = update_rule(r);
    let rt = rt.clone();
    let seed = mix(cfg.seed, 0x0B7);
    let replay = ReplayConfig {
        capacity: r.buffer_size,
        alpha: r.prioritized_alpha,
        train_batch_size: r.train_batch_size,
        learning_starts: r.learning_starts,
        rounds: r.rounds,
        train_steps_per_round: r.train_steps_per_round,
    };
    Ok(match r.optimizer.as_str() {
        "sync" => {
            let opt = SyncOptimizer::new(rt, local, evaluators, rule);
            if r.keep_fraction < 1.0 || r.straggler_timeout_s.is_some() {
                Box::new(
                    opt.with_straggler_mitigation(r.keep_fraction, r.straggler_timeout_s.map(Duration::from_secs_f64)),
                )
            } else {
                Box::new(opt)
            }
        }
        "multipass" => Box::new(
            LocalMultipassOptimizer::new(rt, local, evaluators, rule, r.epochs, r.minibatch_size, seed)?
                .with_memory_budget(r.memory_budget_mb * 1024 * 1024),
        ),
        "async" => Box::new(AsyncOptimizer::new(
            rt,
            local,
            evaluators,
            rule,
            r.grads_per_step,
            r.max_in_flight,
        )?),
        "param_server" => Box::new(ParamServerOptimizer::new(rt, local, evaluators, rule, r.shards, r.rounds)?),
        "replay" => Box::new(ReplayOptimizer::new(rt, local, evaluators, rule, replay, seed)?),
        "apex" => Box::new(ApexOptimizer::new(
            rt,
            local,
            evaluators,
            rule,
            ApexConfig {
                replay,
                num_replay_actors: r.replay_actors,
                learner_steps: r.learner_steps,
                broadcast_interval: r.broadcast_interval,
                epsilon_base: r.epsilon_base,
            },
            seed,
        )?),
        other => return Err(TrainError::Unsupported(format!("optimizer `{other}`"))),
    })
}

impl Trainable for OptimizerTrainer {
    fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    fn train(&mut self) -> Result<IterationResult, TrainError> {
        let started = Instant::now();
        let mut info = BTreeMap::new();
        if self.cfg.algorithm == "dqn" {
            // exploration follows the sampled-timestep count
            let t = self.progress.timesteps_total;
            self.optimizer
                .base_mut()
                .foreach_policy(move |g| g.call_utility("set_timestep", t as f64).map(|_| ()))?;
            info.insert("epsilon".into(), self.resolved.exploration.epsilon_at(t));
        }
        let stats = self.optimizer.step()?;
        let iteration = self.progress.iteration + 1;
        if self.uses_target() {
            let every = self.resolved.target_interval;
            let synced = every > 0 && iteration % every == 0;
            if synced {
                self.optimizer
                    .base_mut()
                    .local_graph_mut()
                    .call_utility("update_target", 0.0)?;
                self.target_syncs.push(iteration);
            }
            info.insert("target_synced".into(), if synced { 1.0 } else { 0.0 });
        }
        let episodes = self.optimizer.base_mut().take_episodes();
        let timesteps = stats.samples_collected - self.samples_seen;
        self.samples_seen = stats.samples_collected;
        Ok(self
            .progress
            .advance(timesteps, &episodes, stats, info, started.elapsed().as_secs_f64()))
    }

    fn progress(&self) -> &Progress {
        &self.progress
    }

    fn get_weights(&self) -> Vec<f64> {
        self.optimizer.base().local_graph().get_weights()
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<(), TrainError> {
        self.optimizer.set_weights(w)?;
        Ok(())
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.optimizer.base().local_graph().weight_shapes()
    }

    fn evaluate(&mut self, episodes: usize) -> Result<f64, TrainError> {
        evaluate_weights(
            &self.env,
            self.optimizer.base().local_graph().clone_graph(),
            self.cfg.seed,
            self.progress.iteration,
            episodes,
        )
    }

    fn hyperparameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("lr".to_string(), self.resolved.lr)])
    }

    fn set_hyperparameter(&mut self, name: &str, value: f64) -> Result<(), TrainError> {
        if name != "lr" {
            return Err(TrainError::Unsupported(format!("hyperparameter `{name}`")));
        }
        if self.optimizer.name() == "param_server" {
            return Err(TrainError::Unsupported("lr changes on shard actors".into()));
        }
        if !(value > 0.0 && value.is_finite()) {
            return Err(TrainError::Config(vec![super::Violation::new("graph.lr", "must be positive")]));
        }
        self.optimizer.base_mut().applier_mut().set_stepsize(value);
        self.resolved.lr = value;
        self.cfg.graph.lr = Some(value);
        Ok(())
    }

    fn restore(&mut self, ckpt: &TrainerCheckpoint) -> Result<(), TrainError> {
        self.set_weights(&ckpt.weights.data)?;
        self.optimizer.base_mut().applier_mut().reset();
        self.progress = ckpt.progress.clone();
        if self.uses_target() {
            self.optimizer
                .base_mut()
                .local_graph_mut()
                .call_utility("update_target", 0.0)?;
        }
        Ok(())
    }
}
