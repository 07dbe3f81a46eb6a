use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use rldist_core::policy::PolicyGraph;

use super::{GradientApplier, OptimizerBase, OptimizerError, OptimizerStats, PolicyOptimizer, UpdateRule};
use crate::evaluation::{EpisodeStats, EvalError, EvaluatorRef};
use crate::taskrt::{ActorRef, ResourceClaim, Runtime, TaskFuture};

/// Contiguous equal slices of `len` parameters; the last shard takes the
/// remainder.
pub fn shard_bounds(len: usize, shards: usize) -> Vec<Range<usize>> {
    assert!(shards >= 1 && shards <= len, "need 1 ≤ shards ≤ len");
    let size = len / shards;
    (0..shards)
        .map(|i| {
            let start = i * size;
            let end = if i + 1 == shards { len } else { start + size };
            start..end
        })
        .collect()
}

/// Holds one slice of θ and applies pushed gradients in arrival order.
#[derive(Debug)]
pub struct ShardActor {
    pub index: usize,
    pub start: usize,
    values: Vec<f64>,
    applier: GradientApplier,
    pushes: u64,
}

impl ShardActor {
    pub fn new(index: usize, start: usize, values: Vec<f64>, rule: UpdateRule) -> Self {
        Self {
            index,
            start,
            values,
            applier: GradientApplier::new(rule),
            pushes: 0,
        }
    }

    pub fn pull(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn push(&mut self, grads: &[f64]) -> Result<(), OptimizerError> {
        self.values = self.applier.apply(&self.values, grads)?;
        self.pushes += 1;
        Ok(())
    }

    pub fn set(&mut self, values: Vec<f64>) {
        self.values = values;
        self.applier.reset();
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }
}

type ShardRef = ActorRef<ShardActor>;

#[derive(Debug, Clone)]
struct RoundResult {
    samples: usize,
    stats: BTreeMap<String, f64>,
    episodes: EpisodeStats,
    /// Pulls queued right behind this evaluator's pushes, used as its weights
    /// for the next round.
    prefetched: Vec<TaskFuture<Vec<f64>>>,
}

fn pull(shard: &ShardRef) -> TaskFuture<Vec<f64>> {
    shard.invoke("pull", |s, _| Ok::<_, String>(s.pull()))
}

fn collect_pulls(pulls: &[TaskFuture<Vec<f64>>]) -> Result<Vec<f64>, OptimizerError> {
    let mut w = Vec::new();
    for (i, f) in pulls.iter().enumerate() {
        let part = f.get_arc().map_err(|_| OptimizerError::ShardUnavailable(i))?;
        w.extend_from_slice(&part);
    }
    Ok(w)
}

/// Evaluators pull weights from shard actors, compute gradients and push
/// per-shard slices back; shards apply pushes serially.
///
/// Each evaluator queues a pull right behind its pushes and uses it as the
/// next round's weights, so pulls overlap with the remaining pushes.
pub struct ParamServerOptimizer {
    base: OptimizerBase,
    shards: Vec<ShardRef>,
    bounds: Vec<Range<usize>>,
    rounds: usize,
    prefetched: Vec<Option<Vec<TaskFuture<Vec<f64>>>>>,
}

impl std::fmt::Debug for ParamServerOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamServerOptimizer")
            .field("base", &self.base)
            .field("bounds", &self.bounds)
            .field("rounds", &self.rounds)
            .finish()
    }
}

impl ParamServerOptimizer {
    pub fn new(
        rt: Runtime,
        local: Box<dyn PolicyGraph>,
        evaluators: Vec<EvaluatorRef>,
        rule: UpdateRule,
        num_shards: usize,
        rounds: usize,
    ) -> Result<Self, OptimizerError> {
        let theta = local.get_weights();
        if num_shards == 0 || num_shards > theta.len() {
            return Err(OptimizerError::Config(format!(
                "shard count {num_shards} must lie in 1..={}",
                theta.len()
            )));
        }
        let bounds = shard_bounds(theta.len(), num_shards);
        let shards = bounds
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let values = theta[r.clone()].to_vec();
                let start = r.start;
                rt.spawn_actor(ResourceClaim::default(), move |_| {
                    Ok(ShardActor::new(i, start, values.clone(), rule))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prefetched = vec![None; evaluators.len()];
        Ok(Self {
            base: OptimizerBase::new(rt, local, evaluators, rule),
            shards,
            bounds,
            rounds,
            prefetched,
        })
    }

    pub fn shards(&self) -> &[ShardRef] {
        &self.shards
    }

    pub fn bounds(&self) -> &[Range<usize>] {
        &self.bounds
    }

    /// Concatenation of every shard's values in index order.
    pub fn shard_values(&self) -> Result<Vec<f64>, OptimizerError> {
        let pulls: Vec<_> = self.shards.iter().map(pull).collect();
        collect_pulls(&pulls)
    }

    fn round(&mut self) -> Result<(), OptimizerError> {
        let futures: Vec<TaskFuture<RoundResult>> = self
            .base
            .evaluators
            .iter()
            .enumerate()
            .map(|(i, ev)| {
                let shards = self.shards.clone();
                let bounds = self.bounds.clone();
                let prefetched = self.prefetched[i].take();
                ev.invoke("param_server_round", move |e, _| -> Result<RoundResult, String> {
                    let pulls = prefetched.unwrap_or_else(|| shards.iter().map(pull).collect());
                    let w = collect_pulls(&pulls)?;
                    e.set_weights(&w)?;
                    let batch = e.sample()?;
                    let g = e.compute_gradients(&batch).map_err(EvalError::from)?;
                    let mut next = Vec::with_capacity(shards.len());
                    for (shard, r) in shards.iter().zip(&bounds) {
                        let slice = g.grads[r.clone()].to_vec();
                        shard.invoke("push", move |s, _| s.push(&slice));
                        next.push(pull(shard));
                    }
                    let mut stats = g.stats;
                    stats.insert("loss".into(), g.loss);
                    Ok(RoundResult {
                        samples: batch.len(),
                        stats,
                        episodes: e.take_episode_stats(),
                        prefetched: next,
                    })
                })
            })
            .collect();
        let mut ok = 0;
        let mut learner: BTreeMap<String, f64> = BTreeMap::new();
        for (i, f) in futures.into_iter().enumerate() {
            match f.get_arc() {
                Ok(r) => {
                    ok += 1;
                    self.base.stats.samples_collected += r.samples as u64;
                    self.base.stats.grad_steps_applied += 1;
                    self.base.record_episodes(&r.episodes);
                    for (k, v) in &r.stats {
                        *learner.entry(k.clone()).or_insert(0.0) += v;
                    }
                    self.prefetched[i] = Some(r.prefetched.clone());
                }
                Err(_) => self.base.stats.dropped_task_count += 1,
            }
        }
        if ok == 0 {
            return Err(OptimizerError::AllEvaluatorsFailed);
        }
        self.base.stats.learner = learner.into_iter().map(|(k, v)| (k, v / ok as f64)).collect();
        Ok(())
    }
}

impl PolicyOptimizer for ParamServerOptimizer {
    fn name(&self) -> &'static str {
        "param_server"
    }

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError> {
        let started = Instant::now();
        for _ in 0..self.rounds {
            let t = Instant::now();
            self.round()?;
            self.base.stats.add_phase("round", t);
        }
        let theta = self.shard_values()?;
        self.base.set_local_weights(&theta)?;
        Ok(self.base.finish_step(started))
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<(), OptimizerError> {
        self.base.set_local_weights(w)?;
        let sets: Vec<_> = self
            .shards
            .iter()
            .zip(&self.bounds)
            .map(|(s, r)| {
                let part = w[r.clone()].to_vec();
                s.invoke("set", move |s, _| {
                    s.set(part.clone());
                    Ok::<_, String>(())
                })
            })
            .collect();
        for (i, f) in sets.into_iter().enumerate() {
            f.get_arc().map_err(|_| OptimizerError::ShardUnavailable(i))?;
        }
        self.prefetched.iter_mut().for_each(|p| *p = None);
        Ok(())
    }

    fn base(&self) -> &OptimizerBase {
        &self.base
    }

    fn base_mut(&mut self) -> &mut OptimizerBase {
        &mut self.base
    }
}
