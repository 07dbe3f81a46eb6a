//! Policy optimizers: interchangeable distributed execution strategies over a
//! local policy graph and a set of evaluator actors.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rldist_core::batch::BatchError;
use rldist_core::policy::{PolicyError, PolicyGraph};
use rldist_core::replay::ReplayError;
use rldist_core::tensor::{adam_step, sgd_step, AdamConfig, AdamState, TensorError};
use serde::Serialize;
use thiserror::Error;

use crate::evaluation::{EpisodeStats, EvalError, EvaluatorRef, WeightsHandle, WireBatch};
use crate::framing::FrameError;
use crate::taskrt::{ObjectRef, Runtime, RuntimeError, TaskFuture};

mod apex;
mod asynchronous;
mod multipass;
mod param_server;
mod replay;
mod sync;

pub use apex::{ApexConfig, ApexOptimizer, Interval};
pub use asynchronous::{AsyncOptimizer, StalenessRecord};
pub use multipass::{LocalMultipassOptimizer, DEFAULT_MEMORY_BUDGET};
pub use param_server::{shard_bounds, ParamServerOptimizer, ShardActor};
pub use replay::{ReplayActor, ReplayBatch, ReplayConfig, ReplayOptimizer};
pub use sync::SyncOptimizer;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("every evaluator task failed")]
    AllEvaluatorsFailed,
    #[error("pooled batch needs {needed} bytes, budget is {budget}")]
    OutOfMemoryBudget { needed: usize, budget: usize },
    #[error("parameter shard {0} unavailable")]
    ShardUnavailable(usize),
    #[error("replay buffer is empty")]
    BufferEmpty,
    #[error("strategy `{0}` has fewer than two timed steps")]
    InsufficientHistory(String),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

impl From<OptimizerError> for String {
    fn from(e: OptimizerError) -> String {
        e.to_string()
    }
}

/// Cumulative counters and timings. Timing fields end in `wall_time`; every
/// other field is a deterministic function of config and seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OptimizerStats {
    pub steps: u64,
    pub samples_collected: u64,
    pub grad_steps_applied: u64,
    pub dropped_task_count: u64,
    pub weight_broadcasts: u64,
    /// Learner statistics from the most recent step (loss, td error, ...).
    pub learner: BTreeMap<String, f64>,
    pub wall_time: f64,
    pub phase_wall_time: BTreeMap<String, f64>,
}

impl OptimizerStats {
    pub fn add_phase(&mut self, phase: &str, since: Instant) {
        *self.phase_wall_time.entry(format!("{phase}_wall_time")).or_insert(0.0) += since.elapsed().as_secs_f64();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Sgd { stepsize: f64 },
    Adam(AdamConfig),
}

/// Turns gradients into parameter updates, holding optimizer state such as
/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientApplier {
    rule: UpdateRule,
    adam: Option<AdamState>,
}

impl GradientApplier {
    pub fn new(rule: UpdateRule) -> Self {
        Self { rule, adam: None }
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn set_stepsize(&mut self, stepsize: f64) {
        match &mut self.rule {
            UpdateRule::Sgd { stepsize: s } => *s = stepsize,
            UpdateRule::Adam(cfg) => cfg.stepsize = stepsize,
        }
    }

    /// Drops accumulated moments; the next step starts fresh.
    pub fn reset(&mut self) {
        self.adam = None;
    }

    pub fn apply(&mut self, params: &[f64], grads: &[f64]) -> Result<Vec<f64>, TensorError> {
        match self.rule {
            UpdateRule::Sgd { stepsize } => sgd_step(params, grads, stepsize),
            UpdateRule::Adam(cfg) => {
                let state = self.adam.take().unwrap_or_else(|| AdamState::new(params.len()));
                let (next, state) = adam_step(params, grads, &state, &cfg)?;
                self.adam = Some(state);
                Ok(next)
            }
        }
    }
}

/// State shared by every optimizer: the local graph, the evaluator actors,
/// the update rule and the current weights broadcast.
pub struct OptimizerBase {
    rt: Runtime,
    local: Box<dyn PolicyGraph>,
    evaluators: Vec<EvaluatorRef>,
    applier: GradientApplier,
    stats: OptimizerStats,
    episodes: EpisodeStats,
    version: u64,
    handle: Option<WeightsHandle>,
    driver_delay: Duration,
}

impl std::fmt::Debug for OptimizerBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptimizerBase")
            .field("evaluators", &self.evaluators.len())
            .field("version", &self.version)
            .field("stats", &self.stats)
            .finish()
    }
}

impl OptimizerBase {
    pub fn new(rt: Runtime, local: Box<dyn PolicyGraph>, evaluators: Vec<EvaluatorRef>, rule: UpdateRule) -> Self {
        Self {
            rt,
            local,
            evaluators,
            applier: GradientApplier::new(rule),
            stats: OptimizerStats::default(),
            episodes: EpisodeStats::default(),
            version: 0,
            handle: None,
            driver_delay: Duration::ZERO,
        }
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn local_graph(&self) -> &dyn PolicyGraph {
        self.local.as_ref()
    }

    pub fn local_graph_mut(&mut self) -> &mut dyn PolicyGraph {
        self.local.as_mut()
    }

    pub fn evaluators(&self) -> &[EvaluatorRef] {
        &self.evaluators
    }

    pub fn stats(&self) -> &OptimizerStats {
        &self.stats
    }

    pub fn applier_mut(&mut self) -> &mut GradientApplier {
        &mut self.applier
    }

    /// Simulated extra cost of every driver-side gradient computation.
    pub fn set_driver_delay(&mut self, delay: Duration) {
        self.driver_delay = delay;
    }

    pub fn weights_version(&self) -> u64 {
        self.version
    }

    pub fn take_episodes(&mut self) -> EpisodeStats {
        std::mem::take(&mut self.episodes)
    }

    /// The current weights in the object store, publishing them if the local
    /// graph changed since the last call.
    pub fn weights(&mut self) -> WeightsHandle {
        if let Some(h) = &self.handle {
            return h.clone();
        }
        self.version += 1;
        let h = WeightsHandle {
            version: self.version,
            weights: self.rt.put(self.local.get_weights()),
        };
        self.stats.weight_broadcasts += 1;
        self.handle = Some(h.clone());
        h
    }

    /// Publishes the current weights and queues a sync on every evaluator.
    /// Mailbox order guarantees the sync runs before any later task.
    pub fn broadcast(&mut self) {
        let t = Instant::now();
        let h = self.weights();
        for ev in &self.evaluators {
            let h = h.clone();
            ev.invoke("sync_weights", move |e, ctx| e.sync_weights(ctx.runtime(), &h));
        }
        self.stats.add_phase("broadcast", t);
    }

    pub fn set_local_weights(&mut self, w: &[f64]) -> Result<(), OptimizerError> {
        self.local.set_weights(w)?;
        self.handle = None;
        Ok(())
    }

    pub fn apply_gradients(&mut self, grads: &[f64]) -> Result<(), OptimizerError> {
        let t = Instant::now();
        let next = self.applier.apply(&self.local.get_weights(), grads)?;
        self.local.set_weights(&next)?;
        self.handle = None;
        self.stats.grad_steps_applied += 1;
        self.stats.add_phase("apply", t);
        Ok(())
    }

    /// Gradient of the local graph on a driver-side batch.
    pub fn local_gradients(
        &mut self,
        batch: &rldist_core::batch::SampleBatch,
    ) -> Result<rldist_core::policy::GradientOutput, OptimizerError> {
        let t = Instant::now();
        if !self.driver_delay.is_zero() {
            std::thread::sleep(self.driver_delay);
        }
        let out = self.local.gradients(batch)?;
        self.stats.add_phase("learner_grad", t);
        Ok(out)
    }

    fn record_episodes(&mut self, e: &EpisodeStats) {
        self.episodes.returns.extend_from_slice(&e.returns);
        self.episodes.lengths.extend_from_slice(&e.lengths);
    }

    fn finish_step(&mut self, started: Instant) -> OptimizerStats {
        self.stats.steps += 1;
        self.stats.wall_time += started.elapsed().as_secs_f64();
        self.stats.clone()
    }

    /// Runs `visitor` on the local graph and on every evaluator's graph.
    /// Meant for utilities (exploration rate, timestep), not weights.
    pub fn foreach_policy<F>(&mut self, visitor: F) -> Result<(), OptimizerError>
    where
        F: Fn(&mut dyn PolicyGraph) -> Result<(), PolicyError> + Clone + Send + Sync + 'static,
    {
        visitor(self.local.as_mut())?;
        let futures: Vec<_> = self
            .evaluators
            .iter()
            .map(|ev| {
                let v = visitor.clone();
                ev.invoke("foreach_policy", move |e, _| v(e.graph_mut()))
            })
            .collect();
        for f in futures {
            f.get_arc()?;
        }
        Ok(())
    }
}

/// The contract every strategy satisfies: built from a local graph and
/// evaluator actors, advanced by `step`.
pub trait PolicyOptimizer: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError>;

    fn base(&self) -> &OptimizerBase;

    fn base_mut(&mut self) -> &mut OptimizerBase;

    /// Replaces the weights everywhere the strategy keeps them.
    fn set_weights(&mut self, w: &[f64]) -> Result<(), OptimizerError> {
        self.base_mut().set_local_weights(w)?;
        self.base_mut().broadcast();
        Ok(())
    }

    fn stats(&self) -> &OptimizerStats {
        self.base().stats()
    }
}

/// Result of a sample-and-gradient evaluator task.
#[derive(Debug, Clone)]
pub struct GradTask {
    pub grads: Vec<f64>,
    pub samples: usize,
    pub stats: BTreeMap<String, f64>,
    pub episodes: EpisodeStats,
    pub version: Option<u64>,
}

/// Result of a sampling task; the batch stays in the object store.
#[derive(Debug, Clone)]
pub struct SampleTask {
    pub batch: ObjectRef<WireBatch>,
    pub samples: usize,
    pub episodes: EpisodeStats,
    pub started: Instant,
    pub finished: Instant,
}

pub fn submit_grad_task(ev: &EvaluatorRef, w: WeightsHandle) -> TaskFuture<GradTask> {
    ev.invoke("sample_and_gradients", move |e, ctx| -> Result<GradTask, EvalError> {
        e.sync_weights(ctx.runtime(), &w)?;
        let batch = e.sample()?;
        let g = e.compute_gradients(&batch)?;
        let mut stats = g.stats;
        stats.insert("loss".into(), g.loss);
        Ok(GradTask {
            grads: g.grads,
            samples: batch.len(),
            stats,
            episodes: e.take_episode_stats(),
            version: e.weights_version(),
        })
    })
}

pub fn submit_sample_task(ev: &EvaluatorRef, w: Option<WeightsHandle>) -> TaskFuture<SampleTask> {
    ev.invoke("sample", move |e, ctx| -> Result<SampleTask, EvalError> {
        let started = Instant::now();
        if let Some(w) = &w {
            e.sync_weights(ctx.runtime(), w)?;
        }
        let wire = e.sample_wire()?;
        let samples = wire.len()?;
        let batch = ctx.runtime().put(wire);
        Ok(SampleTask {
            batch,
            samples,
            episodes: e.take_episode_stats(),
            started,
            finished: Instant::now(),
        })
    })
}

/// Outcome of `straggler_tolerant_gather`: `(input index, result)` pairs in
/// completion order and the number of tasks not waited for.
#[derive(Debug)]
pub struct Gathered<R> {
    pub results: Vec<(usize, Result<Arc<R>, RuntimeError>)>,
    pub dropped: usize,
}

/// Waits for `⌈keep_fraction·n⌉` of `futures` (or until `timeout`) and
/// discards the rest. Dropping the slowest tasks trades bias for speed.
pub fn straggler_tolerant_gather<R>(
    rt: &Runtime,
    futures: Vec<TaskFuture<R>>,
    keep_fraction: f64,
    timeout: Option<Duration>,
) -> Gathered<R> {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep_fraction must lie in (0, 1]"
    );
    let n = futures.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).min(n);
    let index: BTreeMap<u64, usize> = futures.iter().enumerate().map(|(i, f)| (f.task_id(), i)).collect();
    let (ready, pending) = rt.wait(futures, k, timeout);
    let results = ready
        .into_iter()
        .map(|f| (index[&f.task_id()], f.get_arc()))
        .collect();
    Gathered {
        results,
        dropped: pending.len(),
    }
}

/// Picks the strategy with the lowest median step time. Ties keep `current`.
pub fn select_strategy(history: &BTreeMap<String, Vec<f64>>, current: &str) -> Result<String, OptimizerError> {
    let mut best: Option<(f64, &str)> = None;
    for (name, times) in history {
        if times.len() < 2 {
            return Err(OptimizerError::InsufficientHistory(name.clone()));
        }
        let m = median(times);
        let better = match best {
            None => true,
            Some((bm, _)) => m < bm || (m == bm && name == current),
        };
        if better {
            best = Some((m, name));
        }
    }
    best.map(|(_, n)| n.to_string())
        .ok_or_else(|| OptimizerError::InsufficientHistory(current.to_string()))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Timed probe phase over candidate strategies, with a log of probes and
/// switches.
#[derive(Debug, Clone, Default)]
pub struct StrategySelector {
    pub current: String,
    pub history: BTreeMap<String, Vec<f64>>,
    pub log: Vec<String>,
}

impl StrategySelector {
    pub fn new(current: &str) -> Self {
        Self {
            current: current.into(),
            ..Self::default()
        }
    }

    pub fn record(&mut self, strategy: &str, seconds: f64) {
        self.log.push(format!("probe {strategy} {seconds:.6}"));
        self.history.entry(strategy.into()).or_default().push(seconds);
    }

    pub fn select(&mut self) -> Result<String, OptimizerError> {
        let next = select_strategy(&self.history, &self.current)?;
        if next != self.current {
            self.log.push(format!("switch {} -> {next}", self.current));
            self.current = next.clone();
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_lower_median_and_keeps_ties() {
        let mut h = BTreeMap::new();
        h.insert("a".to_string(), vec![0.010, 0.011, 0.009]);
        h.insert("b".to_string(), vec![0.005, 0.006]);
        assert_eq!(select_strategy(&h, "a").unwrap(), "b");
        h.insert("b".to_string(), vec![0.010, 0.010, 0.010]);
        h.insert("a".to_string(), vec![0.010, 0.010]);
        assert_eq!(select_strategy(&h, "a").unwrap(), "a");
        assert_eq!(select_strategy(&h, "b").unwrap(), "b");
        h.insert("c".to_string(), vec![0.001]);
        assert!(matches!(
            select_strategy(&h, "a"),
            Err(OptimizerError::InsufficientHistory(n)) if n == "c"
        ));
    }

    #[test]
    fn adam_applier_keeps_state() {
        let mut a = GradientApplier::new(UpdateRule::Adam(AdamConfig::new(0.1)));
        let p1 = a.apply(&[1.0], &[1.0]).unwrap();
        // first bias-corrected Adam step moves by exactly the stepsize
        assert!((p1[0] - 0.9).abs() < 1e-6);
        let p2 = a.apply(&p1, &[1.0]).unwrap();
        assert!((p2[0] - 0.8).abs() < 1e-6);
        let mut s = GradientApplier::new(UpdateRule::Sgd { stepsize: 0.5 });
        assert_eq!(s.apply(&[1.0, 2.0], &[2.0, -2.0]).unwrap(), vec![0.0, 3.0]);
    }
}
