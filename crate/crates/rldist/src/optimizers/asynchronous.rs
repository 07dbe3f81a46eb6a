use std::collections::VecDeque;
use std::time::Instant;

use rldist_core::policy::PolicyGraph;

use super::{submit_grad_task, GradTask, OptimizerBase, OptimizerError, OptimizerStats, PolicyOptimizer, UpdateRule};
use crate::evaluation::EvaluatorRef;
use crate::taskrt::{Runtime, TaskFuture};

/// Audit entry for one applied gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StalenessRecord {
    pub evaluator: usize,
    /// Applications made before the task's weights were published.
    pub computed_at: u64,
    /// Applications made before this gradient was applied.
    pub applied_at: u64,
}

impl StalenessRecord {
    pub fn gap(&self) -> u64 {
        self.applied_at - self.computed_at
    }
}

struct InFlight {
    evaluator: usize,
    applications: u64,
    future: TaskFuture<GradTask>,
}

/// Gradients computed on evaluators and applied one at a time on the driver,
/// each task resubmitted with the freshest weights.
///
/// Results are applied in submission order by default, which keeps runs
/// reproducible; `completion_order` applies whichever finishes first unless
/// the oldest task is about to exceed the staleness bound.
pub struct AsyncOptimizer {
    base: OptimizerBase,
    grads_per_step: usize,
    max_in_flight: usize,
    completion_order: bool,
    alive: Vec<bool>,
    next_evaluator: usize,
    audit: Vec<StalenessRecord>,
}

impl std::fmt::Debug for AsyncOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AsyncOptimizer")
            .field("base", &self.base)
            .field("grads_per_step", &self.grads_per_step)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl AsyncOptimizer {
    pub fn new(
        rt: Runtime,
        local: Box<dyn PolicyGraph>,
        evaluators: Vec<EvaluatorRef>,
        rule: UpdateRule,
        grads_per_step: usize,
        max_in_flight: usize,
    ) -> Result<Self, OptimizerError> {
        if max_in_flight == 0 {
            return Err(OptimizerError::Config("max_in_flight must be at least 1".into()));
        }
        let alive = vec![true; evaluators.len()];
        Ok(Self {
            base: OptimizerBase::new(rt, local, evaluators, rule),
            grads_per_step,
            max_in_flight,
            completion_order: false,
            alive,
            next_evaluator: 0,
            audit: Vec::new(),
        })
    }

    pub fn with_completion_order(mut self, on: bool) -> Self {
        self.completion_order = on;
        self
    }

    pub fn audit(&self) -> &[StalenessRecord] {
        &self.audit
    }

    fn submit(&mut self, queue: &mut VecDeque<InFlight>) -> Result<(), OptimizerError> {
        let n = self.alive.len();
        let idx = (0..n)
            .map(|k| (self.next_evaluator + k) % n)
            .find(|&i| self.alive[i])
            .ok_or(OptimizerError::AllEvaluatorsFailed)?;
        self.next_evaluator = (idx + 1) % n;
        let w = self.base.weights();
        queue.push_back(InFlight {
            evaluator: idx,
            applications: self.base.stats.grad_steps_applied,
            future: submit_grad_task(&self.base.evaluators[idx], w),
        });
        Ok(())
    }

    fn next_result(&mut self, queue: &mut VecDeque<InFlight>) -> InFlight {
        let now = self.base.stats.grad_steps_applied;
        let overdue = queue
            .front()
            .is_some_and(|f| now - f.applications >= self.max_in_flight as u64);
        if self.completion_order && !overdue {
            let futures: Vec<_> = queue.iter().map(|f| f.future.clone()).collect();
            let (ready, _) = self.base.rt.wait(futures, 1, None);
            let id = ready[0].task_id();
            let pos = queue.iter().position(|f| f.future.task_id() == id).expect("ready future is queued");
            queue.remove(pos).expect("position is valid")
        } else {
            queue.pop_front().expect("queue is non-empty")
        }
    }

    /// Applies exactly `count` gradients.
    pub fn apply_n(&mut self, count: usize) -> Result<OptimizerStats, OptimizerError> {
        let started = Instant::now();
        let mut queue = VecDeque::new();
        let mut applied = 0;
        let mut consecutive_failures = 0;
        while queue.len() < self.max_in_flight.min(count) {
            self.submit(&mut queue)?;
        }
        while applied < count {
            let t = Instant::now();
            let task = self.next_result(&mut queue);
            let result = task.future.get_arc();
            self.base.stats.add_phase("wait", t);
            match result {
                Ok(r) => {
                    let record = StalenessRecord {
                        evaluator: task.evaluator,
                        computed_at: task.applications,
                        applied_at: self.base.stats.grad_steps_applied,
                    };
                    self.audit.push(record);
                    self.base.apply_gradients(&r.grads)?;
                    self.base.stats.samples_collected += r.samples as u64;
                    self.base.record_episodes(&r.episodes);
                    let mut learner = r.stats.clone();
                    learner.insert("staleness".into(), record.gap() as f64);
                    self.base.stats.learner = learner;
                    applied += 1;
                    consecutive_failures = 0;
                }
                Err(_) => {
                    self.base.stats.dropped_task_count += 1;
                    consecutive_failures += 1;
                    if !self.base.evaluators[task.evaluator].is_placed() {
                        self.alive[task.evaluator] = false;
                    }
                    if consecutive_failures > 2 * self.alive.len() {
                        return Err(OptimizerError::AllEvaluatorsFailed);
                    }
                }
            }
            if applied + queue.len() < count {
                self.submit(&mut queue)?;
            }
        }
        self.base.broadcast();
        Ok(self.base.finish_step(started))
    }
}

impl PolicyOptimizer for AsyncOptimizer {
    fn name(&self) -> &'static str {
        "async"
    }

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError> {
        self.apply_n(self.grads_per_step)
    }

    fn base(&self) -> &OptimizerBase {
        &self.base
    }

    fn base_mut(&mut self) -> &mut OptimizerBase {
        &mut self.base
    }
}
