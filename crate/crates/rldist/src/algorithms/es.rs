//! Evolution strategies: antithetic perturbations evaluated on evaluator
//! actors, centered-rank shaping and an Adam ascent step on the driver.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rldist_core::es::{centered_ranks, noise, EsConfig, PerturbationTable};
use rldist_core::policy::PolicyGraph;
use rldist_core::rng::mix;
use rldist_core::tensor::{adam_step, AdamConfig, AdamState, TensorError};

use super::standard::{evaluate_weights, evaluator_config};
use super::{graph_builder, IterationResult, Progress, Resolved, TrainError, Trainable, TrainerCheckpoint, TrainerConfig};
use crate::evaluation::{spawn_evaluators, EnvFactory, EpisodeStats, EvaluatorRef};
use crate::optimizers::OptimizerStats;
use crate::taskrt::{ActorRef, ObjectRef, ResourceClaim, Runtime, TaskFuture};

/// Aggregators used once there are more than this many evaluators.
pub const TREE_FANOUT: usize = 4;

/// Driver-side ES state: θ, the Adam moments and the perturbation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EsOptimizer {
    theta: Vec<f64>,
    cfg: EsConfig,
    adam: AdamState,
    seed: u64,
    steps: u64,
}

impl EsOptimizer {
    pub fn new(theta: Vec<f64>, cfg: EsConfig, seed: u64) -> Self {
        let adam = AdamState::new(theta.len());
        Self {
            theta,
            cfg,
            adam,
            seed,
            steps: 0,
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn config(&self) -> &EsConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Replaces θ and clears the Adam moments.
    pub fn set_theta(&mut self, theta: Vec<f64>) {
        self.adam = AdamState::new(theta.len());
        self.theta = theta;
    }

    pub fn set_stepsize(&mut self, stepsize: f64) {
        self.cfg.adam.stepsize = stepsize;
    }

    /// Perturbations for the next update.
    pub fn table(&self) -> PerturbationTable {
        PerturbationTable::new(
            mix(self.seed, self.steps),
            self.cfg.num_perturbations,
            self.cfg.noise_stddev,
        )
    }

    /// Search-gradient estimate from raw fitness values, rank-shaped.
    pub fn estimate(&self, table: &PerturbationTable, fitness: &[f64]) -> Vec<f64> {
        table.gradient(&centered_ranks(fitness), self.theta.len())
    }

    /// Adam ascent along `grad`, with L2 decay toward zero.
    pub fn ascend(&mut self, grad: &[f64]) -> Result<(), TensorError> {
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let (theta, adam) = adam_step(&self.theta, &neg, &self.adam, &self.cfg.adam)?;
        self.theta = theta;
        self.adam = adam;
        self.steps += 1;
        Ok(())
    }

    /// One serial update on `objective`; returns the gradient estimate.
    pub fn step_with<F: FnMut(&[f64]) -> f64>(&mut self, mut objective: F) -> Result<Vec<f64>, TensorError> {
        let table = self.table();
        let fitness: Vec<f64> = (0..table.len())
            .map(|i| objective(&table.perturb(&self.theta, i)))
            .collect();
        let g = self.estimate(&table, &fitness);
        self.ascend(&g)?;
        Ok(g)
    }
}

/// Fitness of a set of perturbations plus the episodes behind them.
#[derive(Debug, Clone, Default)]
struct FitnessReport {
    fitness: Vec<(usize, f64)>,
    episodes: EpisodeStats,
}

fn evaluate_pairs(
    ev: &EvaluatorRef,
    theta: ObjectRef<Vec<f64>>,
    table: Arc<PerturbationTable>,
    pairs: Vec<usize>,
    episodes: usize,
) -> TaskFuture<FitnessReport> {
    ev.invoke("es_evaluate", move |e, ctx| -> Result<FitnessReport, String> {
        let theta = ctx.runtime().fetch(&theta).map_err(|x| x.to_string())?;
        let mut out = FitnessReport::default();
        for &k in &pairs {
            for i in [2 * k, 2 * k + 1] {
                e.set_weights(&table.perturb(&theta, i))?;
                let eps = e.evaluate_episodes(episodes, false)?;
                let f = eps.returns.iter().sum::<f64>() / episodes as f64;
                out.fitness.push((i, f));
                out.episodes.extend(eps);
            }
        }
        Ok(out)
    })
}

/// Intermediate node of the aggregation tree. Collects fitness from its
/// evaluators and reduces their share of the gradient sum.
pub struct EsAggregator {
    evaluators: Vec<(usize, EvaluatorRef)>,
}

impl EsAggregator {
    fn collect(
        &self,
        theta: &ObjectRef<Vec<f64>>,
        table: &Arc<PerturbationTable>,
        assignment: &[Vec<usize>],
        episodes: usize,
    ) -> Result<FitnessReport, String> {
        let futures: Vec<_> = self
            .evaluators
            .iter()
            .map(|(i, ev)| evaluate_pairs(ev, theta.clone(), table.clone(), assignment[*i].clone(), episodes))
            .collect();
        let mut out = FitnessReport::default();
        for f in futures {
            let r = f.get().map_err(|e| e.to_string())?;
            out.fitness.extend(r.fitness);
            out.episodes.extend(r.episodes);
        }
        Ok(out)
    }
}

/// `Σ_k (w₂ₖ − w₂ₖ₊₁)·noise(seed_k)` over the listed pairs.
fn partial_sum(table: &PerturbationTable, shaped: &[f64], pairs: &[usize], dim: usize) -> Vec<f64> {
    let mut g = vec![0.0; dim];
    for &k in pairs {
        let w = shaped[2 * k] - shaped[2 * k + 1];
        for (gi, e) in g.iter_mut().zip(noise(table.seeds[k], dim)) {
            *gi += w * e;
        }
    }
    g
}

pub struct EsTrainer {
    cfg: TrainerConfig,
    resolved: Resolved,
    rt: Runtime,
    env: EnvFactory,
    graph: Box<dyn PolicyGraph>,
    evaluators: Vec<EvaluatorRef>,
    aggregators: Vec<ActorRef<EsAggregator>>,
    es: EsOptimizer,
    progress: Progress,
    stats: OptimizerStats,
}

impl std::fmt::Debug for EsTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EsTrainer")
            .field("evaluators", &self.evaluators.len())
            .field("aggregators", &self.aggregators.len())
            .field("progress", &self.progress)
            .finish()
    }
}

impl EsTrainer {
    pub fn new(rt: Runtime, cfg: TrainerConfig) -> Result<Self, TrainError> {
        let env = EnvFactory::by_name(&cfg.env)?;
        Self::with_env(rt, cfg, env)
    }

    pub fn with_env(rt: Runtime, cfg: TrainerConfig, env: EnvFactory) -> Result<Self, TrainError> {
        let r = cfg.resolve();
        let builder = graph_builder("es", &r);
        let graph = builder(&env.spec(), cfg.seed)?;
        let evaluators = spawn_evaluators(&rt, cfg.num_evaluators, &env, &builder, &evaluator_config(&cfg, &r))?;
        let aggregators = if evaluators.len() > TREE_FANOUT {
            (0..TREE_FANOUT)
                .map(|j| {
                    let members: Vec<(usize, EvaluatorRef)> = evaluators
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % TREE_FANOUT == j)
                        .map(|(i, e)| (i, e.clone()))
                        .collect();
                    rt.spawn_actor(ResourceClaim::default(), move |_| {
                        Ok(EsAggregator {
                            evaluators: members.clone(),
                        })
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let es_cfg = EsConfig {
            noise_stddev: r.noise_stddev,
            num_perturbations: r.num_perturbations,
            adam: AdamConfig {
                stepsize: r.lr,
                l2_coeff: r.l2_coeff,
                ..AdamConfig::default()
            },
        };
        let es = EsOptimizer::new(graph.get_weights(), es_cfg, mix(cfg.seed, 0xE5));
        Ok(Self {
            cfg,
            resolved: r,
            rt,
            env,
            graph,
            evaluators,
            aggregators,
            es,
            progress: Progress::default(),
            stats: OptimizerStats::default(),
        })
    }

    pub fn es(&self) -> &EsOptimizer {
        &self.es
    }

    /// Number of intermediate aggregation actors; zero for a flat gather.
    pub fn aggregator_count(&self) -> usize {
        self.aggregators.len()
    }

    /// Pair indices evaluated by each evaluator: pair `k` goes to `k mod E`.
    fn assignment(&self, pairs: usize) -> Vec<Vec<usize>> {
        let e = self.evaluators.len();
        let mut out = vec![Vec::new(); e];
        for k in 0..pairs {
            out[k % e].push(k);
        }
        out
    }

    /// Gathers fitness, shapes it and estimates the gradient, through the
    /// aggregation tree when there is one.
    fn gradient(&mut self, table: PerturbationTable) -> Result<(Vec<f64>, Vec<f64>, EpisodeStats), TrainError> {
        let dim = self.es.theta().len();
        let table = Arc::new(table);
        let theta = self.rt.put(self.es.theta().to_vec());
        let assignment = Arc::new(self.assignment(table.seeds.len()));
        let episodes = self.resolved.episodes_per_perturbation;
        let reports: Vec<FitnessReport> = if self.aggregators.is_empty() {
            let futures: Vec<_> = self
                .evaluators
                .iter()
                .zip(assignment.iter())
                .map(|(ev, pairs)| evaluate_pairs(ev, theta.clone(), table.clone(), pairs.clone(), episodes))
                .collect();
            futures.into_iter().map(|f| f.get()).collect::<Result<_, _>>()?
        } else {
            let futures: Vec<_> = self
                .aggregators
                .iter()
                .map(|a| {
                    let (theta, table, assignment) = (theta.clone(), table.clone(), assignment.clone());
                    a.invoke("collect", move |agg, _| agg.collect(&theta, &table, &assignment, episodes))
                })
                .collect();
            futures.into_iter().map(|f| f.get()).collect::<Result<_, _>>()?
        };
        let mut fitness = vec![f64::NAN; table.len()];
        let mut eps = EpisodeStats::default();
        for r in reports {
            for (i, f) in r.fitness {
                fitness[i] = f;
            }
            eps.extend(r.episodes);
        }
        let shaped = Arc::new(centered_ranks(&fitness));
        let scale = 1.0 / (table.len() as f64 * table.noise_stddev);
        let mut grad = if self.aggregators.is_empty() {
            table.gradient(&shaped, dim)
        } else {
            let futures: Vec<_> = self
                .aggregators
                .iter()
                .map(|a| {
                    let (table, shaped, assignment) = (table.clone(), shaped.clone(), assignment.clone());
                    a.invoke("reduce", move |agg, _| {
                        let pairs: Vec<usize> = agg
                            .evaluators
                            .iter()
                            .flat_map(|(i, _)| assignment[*i].iter().copied())
                            .collect();
                        Ok::<_, String>(partial_sum(&table, &shaped, &pairs, dim))
                    })
                })
                .collect();
            let mut g = vec![0.0; dim];
            for f in futures {
                for (gi, p) in g.iter_mut().zip(f.get()?) {
                    *gi += p;
                }
            }
            g.iter_mut().for_each(|x| *x *= scale);
            g
        };
        if grad.iter().any(|g| !g.is_finite()) {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok((grad, fitness, eps))
    }
}

impl Trainable for EsTrainer {
    fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    fn train(&mut self) -> Result<IterationResult, TrainError> {
        let started = Instant::now();
        let table = self.es.table();
        let t = Instant::now();
        let (grad, fitness, eps) = self.gradient(table)?;
        self.stats.add_phase("evaluate", t);
        self.es.ascend(&grad)?;
        self.graph.set_weights(self.es.theta())?;
        let timesteps: u64 = eps.lengths.iter().map(|&l| l as u64).sum();
        self.stats.steps += 1;
        self.stats.samples_collected += timesteps;
        self.stats.grad_steps_applied += 1;
        self.stats.wall_time += started.elapsed().as_secs_f64();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        self.stats.learner = BTreeMap::from([("grad_norm".to_string(), norm)]);
        let info = BTreeMap::from([
            (
                "fitness_max".to_string(),
                fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            ("aggregators".to_string(), self.aggregators.len() as f64),
        ]);
        Ok(self
            .progress
            .advance(timesteps, &eps, self.stats.clone(), info, started.elapsed().as_secs_f64()))
    }

    fn progress(&self) -> &Progress {
        &self.progress
    }

    fn get_weights(&self) -> Vec<f64> {
        self.es.theta().to_vec()
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<(), TrainError> {
        self.graph.set_weights(w)?;
        self.es.set_theta(w.to_vec());
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
        BTreeMap::from([("lr".to_string(), self.resolved.lr)])
    }

    fn set_hyperparameter(&mut self, name: &str, value: f64) -> Result<(), TrainError> {
        if name != "lr" {
            return Err(TrainError::Unsupported(format!("hyperparameter `{name}`")));
        }
        self.es.set_stepsize(value);
        self.resolved.lr = value;
        self.cfg.graph.lr = Some(value);
        Ok(())
    }

    fn restore(&mut self, ckpt: &TrainerCheckpoint) -> Result<(), TrainError> {
        self.set_weights(&ckpt.weights.data)?;
        self.progress = ckpt.progress.clone();
        Ok(())
    }
}
