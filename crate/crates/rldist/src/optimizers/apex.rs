use std::time::Instant;

use rldist_core::policy::{apex_epsilons, PolicyGraph};

use super::replay::{add_remote, learn_on, sample_remote, spawn_replay, ReplayRef};
use super::{
    submit_sample_task, OptimizerBase, OptimizerError, OptimizerStats, PolicyOptimizer, ReplayBatch, ReplayConfig,
    SampleTask, UpdateRule,
};
use crate::evaluation::{EvaluatorRef, WeightsHandle};
use crate::taskrt::{ObjectRef, Runtime, TaskFuture};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApexConfig {
    pub replay: ReplayConfig,
    pub num_replay_actors: usize,
    /// Learner gradient applications per optimizer step.
    pub learner_steps: usize,
    /// Applications between weight broadcasts to the evaluators.
    pub broadcast_interval: usize,
    pub epsilon_base: f64,
}

impl Default for ApexConfig {
    fn default() -> Self {
        Self {
            replay: ReplayConfig::default(),
            num_replay_actors: 2,
            learner_steps: 16,
            broadcast_interval: 16,
            epsilon_base: 0.4,
        }
    }
}

/// Start and end of one timed activity.
#[derive(Debug, Clone, Copy)]
pub struct Interval {
    pub start: Instant,
    pub end: Instant,
}

impl Interval {
    fn overlap(&self, other: &Interval) -> f64 {
        let s = self.start.max(other.start);
        let e = self.end.min(other.end);
        if e > s {
            (e - s).as_secs_f64()
        } else {
            0.0
        }
    }
}

/// Pipelined replay training. Evaluators always have a sampling task in
/// flight, replay actors receive insertions and minibatch requests ahead of
/// need, and the learner trains on the driver meanwhile.
///
/// Work is consumed in a fixed round-robin order, so a run is reproducible
/// even though sampling and learning overlap in time.
pub struct ApexOptimizer {
    base: OptimizerBase,
    cfg: ApexConfig,
    replays: Vec<ReplayRef>,
    epsilons: Vec<f64>,
    sampling: Vec<Option<TaskFuture<SampleTask>>>,
    prefetch: Option<(usize, TaskFuture<ObjectRef<ReplayBatch>>)>,
    stored: Vec<usize>,
    published: Option<WeightsHandle>,
    cursor: u64,
    consecutive_failures: usize,
    since_broadcast: usize,
    sample_intervals: Vec<Interval>,
    learner_intervals: Vec<Interval>,
}

impl std::fmt::Debug for ApexOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApexOptimizer")
            .field("base", &self.base)
            .field("cfg", &self.cfg)
            .field("epsilons", &self.epsilons)
            .finish()
    }
}

impl ApexOptimizer {
    /// Assigns each evaluator its own exploration rate and spawns the
    /// replay actors.
    pub fn new(
        rt: Runtime,
        local: Box<dyn PolicyGraph>,
        evaluators: Vec<EvaluatorRef>,
        rule: UpdateRule,
        cfg: ApexConfig,
        seed: u64,
    ) -> Result<Self, OptimizerError> {
        if cfg.num_replay_actors == 0 || evaluators.is_empty() {
            return Err(OptimizerError::Config("need at least one evaluator and one replay actor".into()));
        }
        let epsilons = apex_epsilons(evaluators.len(), cfg.epsilon_base);
        let sets: Vec<_> = evaluators
            .iter()
            .zip(&epsilons)
            .map(|(ev, &eps)| ev.invoke("set_epsilon", move |e, _| e.graph_mut().call_utility("set_epsilon", eps)))
            .collect();
        for s in sets {
            s.get_arc()?;
        }
        let replays = (0..cfg.num_replay_actors as u64)
            .map(|i| spawn_replay(&rt, &cfg.replay, rldist_core::rng::mix(seed, 0xA9E + i)))
            .collect::<Result<Vec<_>, _>>()?;
        let n = evaluators.len();
        let r = replays.len();
        Ok(Self {
            base: OptimizerBase::new(rt, local, evaluators, rule),
            cfg,
            replays,
            epsilons,
            sampling: (0..n).map(|_| None).collect(),
            prefetch: None,
            stored: vec![0; r],
            published: None,
            cursor: 0,
            consecutive_failures: 0,
            since_broadcast: 0,
            sample_intervals: Vec::new(),
            learner_intervals: Vec::new(),
        })
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn replay_actors(&self) -> &[ReplayRef] {
        &self.replays
    }

    /// Fraction of learner time during which at least one sampling task was
    /// executing.
    pub fn overlap_fraction(&self) -> f64 {
        let learner: f64 = self
            .learner_intervals
            .iter()
            .map(|l| (l.end - l.start).as_secs_f64())
            .sum();
        if learner == 0.0 {
            return 0.0;
        }
        let covered: f64 = self
            .learner_intervals
            .iter()
            .map(|l| self.sample_intervals.iter().map(|s| l.overlap(s)).fold(0.0, f64::max))
            .sum();
        covered / learner
    }

    /// Weights evaluators sample with; refreshed every `broadcast_interval`
    /// learner applications.
    fn published(&mut self) -> WeightsHandle {
        match &self.published {
            Some(h) => h.clone(),
            None => {
                let h = self.base.weights();
                self.published = Some(h.clone());
                h
            }
        }
    }

    fn ensure_sampling(&mut self) {
        let w = self.published();
        for i in 0..self.sampling.len() {
            if self.sampling[i].is_none() {
                self.sampling[i] = Some(submit_sample_task(&self.base.evaluators[i], Some(w.clone())));
            }
        }
    }

    /// Collects the next sampling result in round-robin order, forwards its
    /// batch to a replay actor and resubmits the evaluator.
    fn collect_one(&mut self) -> Result<(), OptimizerError> {
        let n = self.sampling.len() as u64;
        let i = (self.cursor % n) as usize;
        let r = (self.cursor % self.replays.len() as u64) as usize;
        self.cursor += 1;
        let fut = self.sampling[i].take().expect("every evaluator has a task in flight");
        match fut.get_arc() {
            Ok(task) => {
                self.base.stats.samples_collected += task.samples as u64;
                self.base.record_episodes(&task.episodes);
                self.sample_intervals.push(Interval {
                    start: task.started,
                    end: task.finished,
                });
                // insertion completes in the replay actor's mailbox order
                add_remote(&self.replays[r], task.batch.clone());
                self.stored[r] = (self.stored[r] + task.samples).min(self.cfg.replay.capacity);
                self.consecutive_failures = 0;
            }
            Err(_) => {
                self.base.stats.dropped_task_count += 1;
                self.consecutive_failures += 1;
                if self.consecutive_failures > 2 * n as usize {
                    return Err(OptimizerError::AllEvaluatorsFailed);
                }
            }
        }
        let w = self.published();
        self.sampling[i] = Some(submit_sample_task(&self.base.evaluators[i], Some(w)));
        Ok(())
    }

    fn ready_to_learn(&self) -> bool {
        self.stored.iter().all(|&s| s >= self.cfg.replay.learning_starts.max(1))
    }

    fn request_minibatch(&mut self, step: u64) {
        let r = (step % self.replays.len() as u64) as usize;
        let f = sample_remote(&self.replays[r], self.cfg.replay.train_batch_size);
        self.prefetch = Some((r, f));
    }
}

impl PolicyOptimizer for ApexOptimizer {
    fn name(&self) -> &'static str {
        "apex"
    }

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError> {
        let started = Instant::now();
        self.ensure_sampling();
        while !self.ready_to_learn() {
            self.collect_one()?;
        }
        let first = self.base.stats.grad_steps_applied;
        if self.prefetch.is_none() {
            self.request_minibatch(first);
        }
        for k in 0..self.cfg.learner_steps as u64 {
            let t = Instant::now();
            self.collect_one()?;
            let (r, f) = self.prefetch.take().expect("minibatch requested");
            let mb_ref = f.get_arc()?;
            let mb = self.base.rt.fetch(&mb_ref)?;
            self.request_minibatch(first + k + 1);
            self.base.stats.add_phase("pipeline_wait", t);

            let l = Instant::now();
            self.base.stats.learner = learn_on(&mut self.base, &self.replays[r], &mb)?;
            self.learner_intervals.push(Interval {
                start: l,
                end: Instant::now(),
            });
            self.since_broadcast += 1;
            if self.since_broadcast >= self.cfg.broadcast_interval.max(1) {
                self.since_broadcast = 0;
                self.published = Some(self.base.weights());
            }
        }
        Ok(self.base.finish_step(started))
    }

    fn set_weights(&mut self, w: &[f64]) -> Result<(), OptimizerError> {
        self.base.set_local_weights(w)?;
        self.published = None;
        Ok(())
    }

    fn base(&self) -> &OptimizerBase {
        &self.base
    }

    fn base_mut(&mut self) -> &mut OptimizerBase {
        &mut self.base
    }
}
