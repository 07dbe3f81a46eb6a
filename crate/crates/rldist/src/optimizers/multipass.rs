use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rldist_core::batch::SampleBatch;
use rldist_core::policy::PolicyGraph;
use rldist_core::rng::{derive, mix};

use super::{
    submit_sample_task, OptimizerBase, OptimizerError, OptimizerStats, PolicyOptimizer, UpdateRule,
};
use crate::evaluation::EvaluatorRef;
use crate::taskrt::Runtime;

pub const DEFAULT_MEMORY_BUDGET: usize = 256 * 1024 * 1024;

/// Gathers one pooled batch on the driver and runs several epochs of
/// minibatch SGD over it locally.
#[derive(Debug)]
pub struct LocalMultipassOptimizer {
    base: OptimizerBase,
    epochs: usize,
    minibatch_size: usize,
    memory_budget: usize,
    seed: u64,
}

impl LocalMultipassOptimizer {
    pub fn new(
        rt: Runtime,
        local: Box<dyn PolicyGraph>,
        evaluators: Vec<EvaluatorRef>,
        rule: UpdateRule,
        epochs: usize,
        minibatch_size: usize,
        seed: u64,
    ) -> Result<Self, OptimizerError> {
        if epochs == 0 || minibatch_size == 0 {
            return Err(OptimizerError::Config("epochs and minibatch_size must be positive".into()));
        }
        Ok(Self {
            base: OptimizerBase::new(rt, local, evaluators, rule),
            epochs,
            minibatch_size,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            seed,
        })
    }

    pub fn with_memory_budget(mut self, bytes: usize) -> Self {
        self.memory_budget = bytes;
        self
    }

    /// Samples from every evaluator and concatenates on the driver.
    fn gather_pool(&mut self) -> Result<SampleBatch, OptimizerError> {
        let w = self.base.weights();
        let futures: Vec<_> = self
            .base
            .evaluators
            .iter()
            .map(|ev| submit_sample_task(ev, Some(w.clone())))
            .collect();
        let mut parts = Vec::with_capacity(futures.len());
        for f in futures {
            match f.get_arc() {
                Ok(task) => {
                    let wire = self.base.rt.fetch(&task.batch)?;
                    parts.push(wire.to_batch()?);
                    self.base.stats.samples_collected += task.samples as u64;
                    self.base.record_episodes(&task.episodes);
                }
                Err(_) => self.base.stats.dropped_task_count += 1,
            }
        }
        if parts.is_empty() {
            return Err(OptimizerError::AllEvaluatorsFailed);
        }
        Ok(SampleBatch::concat(&parts)?)
    }
}

impl PolicyOptimizer for LocalMultipassOptimizer {
    fn name(&self) -> &'static str {
        "local_multipass"
    }

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError> {
        let started = Instant::now();
        let t = Instant::now();
        let pool = self.gather_pool()?;
        self.base.stats.add_phase("sample", t);
        let needed = pool.byte_size();
        if needed > self.memory_budget {
            return Err(OptimizerError::OutOfMemoryBudget {
                needed,
                budget: self.memory_budget,
            });
        }

        let mut rng = derive(mix(self.seed, 0x3B), self.base.stats.steps);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut count = 0.0;
        for _ in 0..self.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.minibatch_size) {
                let mb = pool.select(chunk);
                let g = self.base.local_gradients(&mb)?;
                self.base.apply_gradients(&g.grads)?;
                *sums.entry("loss".into()).or_insert(0.0) += g.loss;
                for (k, v) in g.stats {
                    *sums.entry(k).or_insert(0.0) += v;
                }
                count += 1.0;
            }
        }
        self.base.stats.learner = sums.into_iter().map(|(k, v)| (k, v / count)).collect();
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
