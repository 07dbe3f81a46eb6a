//! PPO-ES: an ES-style outer loop over a population of PPO trainers, each
//! hosted in its own actor and driven only through [`Trainable`].

use std::collections::BTreeMap;
use std::time::Instant;

use rldist_core::es::noise;
use rldist_core::policy::PolicyGraph;
use rldist_core::rng::mix;

use super::standard::evaluate_weights;
use super::{
    graph_builder, spawn_trainer, IterationResult, Progress, Resolved, TrainError, Trainable, TrainerCheckpoint,
    TrainerConfig, TrainerRef,
};
use crate::evaluation::EnvFactory;
use crate::optimizers::OptimizerStats;
use crate::taskrt::Runtime;

/// What one member reports after its inner iterations.
#[derive(Debug, Clone)]
struct InnerReport {
    weights: Vec<f64>,
    score: f64,
    timesteps: u64,
    episodes: u64,
    reward_sum: f64,
    len_sum: f64,
}

/// Result of one outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub scores: Vec<f64>,
    /// Member whose weights became the new elite, if any improved on it.
    pub recentered_on: Option<usize>,
    pub best_score: f64,
    pub timesteps: u64,
    pub episodes: u64,
    pub reward_mean: Option<f64>,
    pub len_mean: Option<f64>,
}

/// Index of the highest score when it beats `best_so_far`; ties go to the
/// lowest index.
pub fn select_elite(scores: &[f64], best_so_far: f64) -> Option<usize> {
    let mut arg: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if arg.is_none_or(|a| s > scores[a]) {
            arg = Some(i);
        }
    }
    arg.filter(|&a| scores[a] > best_so_far)
}

/// Population of trainer actors plus the elite weights they are perturbed
/// around.
pub struct PpoEsPopulation {
    members: Vec<TrainerRef>,
    parent: Vec<f64>,
    best_score: f64,
    seed: u64,
    outer_steps: u64,
    inner_iterations: usize,
    eval_episodes: usize,
}

impl std::fmt::Debug for PpoEsPopulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PpoEsPopulation")
            .field("members", &self.members.len())
            .field("best_score", &self.best_score)
            .field("outer_steps", &self.outer_steps)
            .finish()
    }
}

impl PpoEsPopulation {
    /// Member `i` runs `member` with seed `mix(seed, i + 1)`. The parent
    /// starts at member 0's initial weights.
    pub fn new(
        rt: &Runtime,
        member: &TrainerConfig,
        size: usize,
        seed: u64,
        inner_iterations: usize,
        eval_episodes: usize,
    ) -> Result<Self, TrainError> {
        if size < 2 {
            return Err(TrainError::Unsupported("population needs at least two members".into()));
        }
        let members = (0..size as u64)
            .map(|i| {
                let mut cfg = member.clone();
                cfg.seed = mix(seed, i + 1);
                spawn_trainer(rt, cfg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let parent = members[0].invoke("get_weights", |t, _| Ok::<_, String>(t.trainer.get_weights())).get()?;
        Ok(Self {
            members,
            parent,
            best_score: f64::NEG_INFINITY,
            seed,
            outer_steps: 0,
            inner_iterations,
            eval_episodes,
        })
    }

    pub fn members(&self) -> &[TrainerRef] {
        &self.members
    }

    pub fn parent(&self) -> &[f64] {
        &self.parent
    }

    pub fn best_score(&self) -> f64 {
        self.best_score
    }

    pub fn set_parent(&mut self, w: Vec<f64>) {
        self.parent = w;
        self.best_score = f64::NEG_INFINITY;
    }
}

/// Perturbs every member around the parent, runs the inner iterations in
/// parallel and keeps the best weights seen so far as the next parent.
pub fn ppo_es_outer_step(pop: &mut PpoEsPopulation, sigma_outer: f64) -> Result<OuterStep, TrainError> {
    let n = pop.members.len() as u64;
    let (k, episodes) = (pop.inner_iterations, pop.eval_episodes);
    let futures: Vec<_> = pop
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let eps = noise(mix(pop.seed, pop.outer_steps * n + i as u64), pop.parent.len());
            let w: Vec<f64> = pop.parent.iter().zip(eps).map(|(p, e)| p + sigma_outer * e).collect();
            m.invoke("inner", move |t, _| -> Result<InnerReport, TrainError> {
                let t = &mut t.trainer;
                t.set_weights(&w)?;
                let before = t.progress().clone();
                let (mut reward_sum, mut len_sum) = (0.0, 0.0);
                for _ in 0..k {
                    let r = t.train()?;
                    if r.episodes_this_iter > 0 {
                        let c = r.episodes_this_iter as f64;
                        reward_sum += r.episode_reward_mean.unwrap_or(0.0) * c;
                        len_sum += r.episode_len_mean.unwrap_or(0.0) * c;
                    }
                }
                let after = t.progress().clone();
                Ok(InnerReport {
                    score: t.evaluate(episodes)?,
                    weights: t.get_weights(),
                    timesteps: after.timesteps_total - before.timesteps_total,
                    episodes: after.episodes_total - before.episodes_total,
                    reward_sum,
                    len_sum,
                })
            })
        })
        .collect();
    let reports = futures.into_iter().map(|f| f.get()).collect::<Result<Vec<_>, _>>()?;
    pop.outer_steps += 1;
    let scores: Vec<f64> = reports.iter().map(|r| r.score).collect();
    let recentered_on = select_elite(&scores, pop.best_score);
    if let Some(i) = recentered_on {
        pop.parent = reports[i].weights.clone();
        pop.best_score = scores[i];
    }
    let episodes: u64 = reports.iter().map(|r| r.episodes).sum();
    let means = (episodes > 0).then(|| {
        (
            reports.iter().map(|r| r.reward_sum).sum::<f64>() / episodes as f64,
            reports.iter().map(|r| r.len_sum).sum::<f64>() / episodes as f64,
        )
    });
    Ok(OuterStep {
        scores,
        recentered_on,
        best_score: pop.best_score,
        timesteps: reports.iter().map(|r| r.timesteps).sum(),
        episodes,
        reward_mean: means.map(|m| m.0),
        len_mean: means.map(|m| m.1),
    })
}

/// PPO-ES as a trainer: one outer step per iteration. The metrics record's
/// `episode_reward_mean` is the population-best evaluation score.
pub struct PpoEsTrainer {
    cfg: TrainerConfig,
    resolved: Resolved,
    env: EnvFactory,
    graph: Box<dyn PolicyGraph>,
    population: PpoEsPopulation,
    progress: Progress,
    stats: OptimizerStats,
}

impl std::fmt::Debug for PpoEsTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PpoEsTrainer")
            .field("population", &self.population)
            .field("progress", &self.progress)
            .finish()
    }
}

impl PpoEsTrainer {
    pub fn new(rt: Runtime, cfg: TrainerConfig) -> Result<Self, TrainError> {
        let r = cfg.resolve();
        let env = EnvFactory::by_name(&cfg.env)?;
        let graph = graph_builder("ppo", &r)(&env.spec(), cfg.seed)?;
        let mut member = cfg.clone();
        member.algorithm = "ppo".into();
        member.population = Default::default();
        let population = PpoEsPopulation::new(&rt, &member, r.population, cfg.seed, r.inner_iterations, r.eval_episodes)?;
        Ok(Self {
            cfg,
            resolved: r,
            env,
            graph,
            population,
            progress: Progress::default(),
            stats: OptimizerStats::default(),
        })
    }

    pub fn population(&self) -> &PpoEsPopulation {
        &self.population
    }
}

impl Trainable for PpoEsTrainer {
    fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    fn train(&mut self) -> Result<IterationResult, TrainError> {
        let started = Instant::now();
        let step = ppo_es_outer_step(&mut self.population, self.resolved.sigma_outer)?;
        self.graph.set_weights(self.population.parent())?;
        self.stats.steps += 1;
        self.stats.samples_collected += step.timesteps;
        self.stats.wall_time += started.elapsed().as_secs_f64();
        let round_best = step.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let round_mean = step.scores.iter().sum::<f64>() / step.scores.len() as f64;
        let mut info = BTreeMap::from([
            ("population_best".to_string(), step.best_score),
            ("round_best".to_string(), round_best),
            ("round_mean".to_string(), round_mean),
            (
                "recentered_on".to_string(),
                step.recentered_on.map_or(-1.0, |i| i as f64),
            ),
        ]);
        if let Some(m) = step.reward_mean {
            info.insert("inner_reward_mean".into(), m);
        }
        Ok(self.progress.record(
            step.timesteps,
            step.episodes,
            Some((step.best_score, step.len_mean.unwrap_or(0.0))),
            self.stats.clone(),
            info,
            started.elapsed().as_secs_f64(),
        ))
    }

    fn progress(&self) -> &Progress {
        &self.progress
    }

    fn get_weights(&self) -> Vec<f64> {
        self.population.parent().to_vec()
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<(), TrainError> {
        self.graph.set_weights(w)?;
        self.population.set_parent(w.to_vec());
        Ok(())
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.graph.weight_shapes()
    }

    fn evaluate(&mut self, episodes: usize) -> Result<f64, TrainError> {
        evaluate_weights(
            &self.env,
            self.graph.clone_graph(),
            self.cfg.seed,
            self.progress.iteration,
            episodes,
        )
    }

    fn hyperparameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("lr".to_string(), self.resolved.lr),
            ("sigma_outer".to_string(), self.resolved.sigma_outer),
        ])
    }

    fn set_hyperparameter(&mut self, name: &str, value: f64) -> Result<(), TrainError> {
        match name {
            "sigma_outer" if value >= 0.0 => {
                self.resolved.sigma_outer = value;
                self.cfg.population.sigma_outer = Some(value);
            }
            "lr" => {
                let sets: Vec<_> = self
                    .population
                    .members()
                    .iter()
                    .map(|m| m.invoke("set_lr", move |t, _| t.trainer.set_hyperparameter("lr", value)))
                    .collect();
                for s in sets {
                    s.get()?;
                }
                self.resolved.lr = value;
                self.cfg.graph.lr = Some(value);
            }
            _ => return Err(TrainError::Unsupported(format!("hyperparameter `{name}` = {value}"))),
        }
        Ok(())
    }

    fn restore(&mut self, ckpt: &TrainerCheckpoint) -> Result<(), TrainError> {
        self.set_weights(&ckpt.weights.data)?;
        self.progress = ckpt.progress.clone();
        Ok(())
    }
}
