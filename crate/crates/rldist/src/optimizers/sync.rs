use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rldist_core::policy::PolicyGraph;

use super::{
    straggler_tolerant_gather, submit_grad_task, OptimizerBase, OptimizerError, OptimizerStats, PolicyOptimizer,
    UpdateRule,
};
use crate::evaluation::EvaluatorRef;
use crate::taskrt::Runtime;

/// Broadcast weights, sample and compute gradients on every evaluator,
/// average, apply once.
#[derive(Debug)]
pub struct SyncOptimizer {
    base: OptimizerBase,
    keep_fraction: f64,
    timeout: Option<Duration>,
}

impl SyncOptimizer {
    pub fn new(rt: Runtime, local: Box<dyn PolicyGraph>, evaluators: Vec<EvaluatorRef>, rule: UpdateRule) -> Self {
        Self {
            base: OptimizerBase::new(rt, local, evaluators, rule),
            keep_fraction: 1.0,
            timeout: None,
        }
    }

    /// Averages over the first `⌈keep_fraction·n⌉` evaluators to finish.
    pub fn with_straggler_mitigation(mut self, keep_fraction: f64, timeout: Option<Duration>) -> Self {
        self.keep_fraction = keep_fraction;
        self.timeout = timeout;
        self
    }
}

impl PolicyOptimizer for SyncOptimizer {
    fn name(&self) -> &'static str {
        "sync"
    }

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError> {
        let started = Instant::now();
        if self.base.evaluators.is_empty() {
            return Err(OptimizerError::Config("sync step needs at least one evaluator".into()));
        }
        let w = self.base.weights();
        let t = Instant::now();
        let futures = self.base.evaluators.iter().map(|ev| submit_grad_task(ev, w.clone())).collect();
        let gathered = straggler_tolerant_gather(&self.base.rt, futures, self.keep_fraction, self.timeout);
        self.base.stats.add_phase("sample_grad", t);
        self.base.stats.dropped_task_count += gathered.dropped as u64;

        let mut ok: Vec<_> = Vec::new();
        for (i, r) in gathered.results {
            match r {
                Ok(v) => ok.push((i, v)),
                Err(_) => self.base.stats.dropped_task_count += 1,
            }
        }
        if ok.is_empty() {
            return Err(OptimizerError::AllEvaluatorsFailed);
        }
        ok.sort_by_key(|(i, _)| *i);

        let n = ok.len() as f64;
        let mut mean = vec![0.0; ok[0].1.grads.len()];
        let mut learner: BTreeMap<String, f64> = BTreeMap::new();
        for (_, task) in &ok {
            for (m, g) in mean.iter_mut().zip(&task.grads) {
                *m += g;
            }
            for (k, v) in &task.stats {
                *learner.entry(k.clone()).or_insert(0.0) += v / n;
            }
            self.base.stats.samples_collected += task.samples as u64;
            self.base.record_episodes(&task.episodes);
        }
        for m in &mut mean {
            *m /= n;
        }
        self.base.apply_gradients(&mean)?;
        self.base.stats.learner = learner;
        self.base.broadcast();
        Ok(self.base.finish_step(started))
    }

    fn base(&self) -> &OptimizerBase {
        &self.base
    }

    fn base_mut(&mut self) -> &mut OptimizerBase {
        &mut self.base
    }
}
