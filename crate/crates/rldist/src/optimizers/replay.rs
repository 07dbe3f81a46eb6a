use std::collections::BTreeMap;
use std::time::Instant;

use rldist_core::batch::{columns, BatchRow, BatchSchema, SampleBatch};
use rldist_core::policy::PolicyGraph;
use rldist_core::replay::{ReplayBuffer, DEFAULT_ALPHA};
use rldist_core::rng::{seeded, SeededRng};

use super::{
    straggler_tolerant_gather, submit_sample_task, OptimizerBase, OptimizerError, OptimizerStats, PolicyOptimizer,
    UpdateRule,
};
use crate::evaluation::{EvaluatorRef, WireBatch};
use crate::framing::{tags, Codec, FrameError, Reader, TypeTag};
use crate::taskrt::{ActorRef, ObjectRef, ResourceClaim, Runtime};

/// A prioritized minibatch with the slots it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    pub batch: SampleBatch,
    pub indices: Vec<u64>,
    pub insertion_ids: Vec<u64>,
}

impl Codec for ReplayBatch {
    const TAG: TypeTag = tags::REPLAY_BATCH;

    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.indices.len() as u64).to_le_bytes());
        for v in self.indices.iter().chain(&self.insertion_ids) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.batch.to_frame());
    }

    fn decode_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader::new(bytes);
        let n = r.u64()? as usize;
        let indices = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let insertion_ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let batch = SampleBatch::from_frame(r.remaining())?;
        if batch.len() != n {
            return Err(FrameError::Corrupt("replay batch length mismatch".into()));
        }
        Ok(Self {
            batch,
            indices,
            insertion_ids,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub train_batch_size: usize,
    /// Stored transitions required before the first gradient step.
    pub learning_starts: usize,
    /// Sampling rounds per optimizer step.
    pub rounds: usize,
    /// Gradient steps after each sampling round.
    pub train_steps_per_round: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 50_000,
            alpha: DEFAULT_ALPHA,
            train_batch_size: 32,
            learning_starts: 1000,
            rounds: 1,
            train_steps_per_round: 1,
        }
    }
}

/// Actor owning a prioritized replay buffer of transition rows.
#[derive(Debug)]
pub struct ReplayActor {
    buffer: ReplayBuffer<BatchRow>,
    schema: Option<BatchSchema>,
    rng: SeededRng,
    priority_updates: u64,
}

impl ReplayActor {
    pub fn new(capacity: usize, alpha: f64, seed: u64) -> Self {
        Self {
            buffer: ReplayBuffer::with_alpha(capacity, alpha),
            schema: None,
            rng: seeded(seed),
            priority_updates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn buffer(&self) -> &ReplayBuffer<BatchRow> {
        &self.buffer
    }

    pub fn priority_updates(&self) -> u64 {
        self.priority_updates
    }

    /// Inserts every row at the current maximum priority. Returns the size
    /// after insertion.
    pub fn add_batch(&mut self, batch: &SampleBatch) -> Result<usize, OptimizerError> {
        let schema = batch.schema();
        match &self.schema {
            Some(s) if *s != schema => {
                return Err(OptimizerError::Config("replay batch schema changed".into()));
            }
            Some(_) => {}
            None => self.schema = Some(schema),
        }
        for i in 0..batch.len() {
            self.buffer.add(batch.row(i));
        }
        Ok(self.buffer.len())
    }

    pub fn sample(&mut self, count: usize) -> Result<ReplayBatch, OptimizerError> {
        let schema = self.schema.as_ref().ok_or(OptimizerError::BufferEmpty)?;
        let slots = self.buffer.sample(count, &mut self.rng).map_err(|e| match e {
            rldist_core::replay::ReplayError::BufferEmpty => OptimizerError::BufferEmpty,
            other => other.into(),
        })?;
        let rows: Vec<BatchRow> = slots
            .iter()
            .map(|s| self.buffer.get(s.index).expect("sampled slot exists").clone())
            .collect();
        Ok(ReplayBatch {
            batch: SampleBatch::from_rows(schema, &rows)?,
            indices: slots.iter().map(|s| s.index as u64).collect(),
            insertion_ids: slots.iter().map(|s| s.insertion_id).collect(),
        })
    }

    /// Sets priority `|td|` for slots still holding the sampled item;
    /// slots overwritten since sampling are skipped.
    pub fn update_priorities(&mut self, indices: &[u64], insertion_ids: &[u64], td: &[f64]) -> Result<(), OptimizerError> {
        let mut idx = Vec::with_capacity(indices.len());
        let mut pri = Vec::with_capacity(indices.len());
        for ((&i, &id), &d) in indices.iter().zip(insertion_ids).zip(td) {
            if self.buffer.insertion_id(i as usize) == Some(id) {
                idx.push(i as usize);
                pri.push(d.abs());
            }
        }
        self.buffer.update_priorities(&idx, &pri)?;
        self.priority_updates += 1;
        Ok(())
    }
}

pub type ReplayRef = ActorRef<ReplayActor>;

pub(super) fn spawn_replay(rt: &Runtime, cfg: &ReplayConfig, seed: u64) -> Result<ReplayRef, OptimizerError> {
    let (capacity, alpha) = (cfg.capacity, cfg.alpha);
    Ok(rt.spawn_actor(ResourceClaim::default(), move |_| Ok(ReplayActor::new(capacity, alpha, seed)))?)
}

pub(super) fn add_remote(replay: &ReplayRef, batch: ObjectRef<WireBatch>) -> crate::taskrt::TaskFuture<usize> {
    replay.invoke("add_batch", move |r, ctx| -> Result<usize, OptimizerError> {
        let wire = ctx.runtime().fetch(&batch)?;
        r.add_batch(&wire.to_batch()?)
    })
}

pub(super) fn sample_remote(replay: &ReplayRef, count: usize) -> crate::taskrt::TaskFuture<ObjectRef<ReplayBatch>> {
    replay.invoke("sample", move |r, ctx| -> Result<ObjectRef<ReplayBatch>, OptimizerError> {
        Ok(ctx.runtime().put(r.sample(count)?))
    })
}

pub(super) fn update_remote(replay: &ReplayRef, mb: &ReplayBatch, td: Vec<f64>) {
    let indices = mb.indices.clone();
    let ids = mb.insertion_ids.clone();
    replay.invoke("update_priorities", move |r, _| r.update_priorities(&indices, &ids, &td));
}

/// One prioritized learner step on the driver: gradient, apply, priorities
/// written back from the per-row TD errors.
pub(super) fn learn_on(
    base: &mut OptimizerBase,
    replay: &ReplayRef,
    mb: &ReplayBatch,
) -> Result<BTreeMap<String, f64>, OptimizerError> {
    let g = base.local_gradients(&mb.batch)?;
    base.apply_gradients(&g.grads)?;
    if let Some(td) = g.row_outputs.get(columns::TD_ERROR) {
        update_remote(replay, mb, td.clone());
    }
    let mut stats = g.stats;
    stats.insert("loss".into(), g.loss);
    Ok(stats)
}

/// Evaluators sample into an embedded replay actor; the driver trains on
/// prioritized minibatches drawn from it.
pub struct ReplayOptimizer {
    base: OptimizerBase,
    cfg: ReplayConfig,
    replay: ReplayRef,
    stored: usize,
}

impl std::fmt::Debug for ReplayOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayOptimizer")
            .field("base", &self.base)
            .field("cfg", &self.cfg)
            .field("stored", &self.stored)
            .finish()
    }
}

impl ReplayOptimizer {
    pub fn new(
        rt: Runtime,
        local: Box<dyn PolicyGraph>,
        evaluators: Vec<EvaluatorRef>,
        rule: UpdateRule,
        cfg: ReplayConfig,
        seed: u64,
    ) -> Result<Self, OptimizerError> {
        if cfg.train_batch_size == 0 || cfg.capacity == 0 {
            return Err(OptimizerError::Config("replay capacity and train_batch_size must be positive".into()));
        }
        let replay = spawn_replay(&rt, &cfg, seed)?;
        Ok(Self {
            base: OptimizerBase::new(rt, local, evaluators, rule),
            cfg,
            replay,
            stored: 0,
        })
    }

    pub fn replay_actor(&self) -> &ReplayRef {
        &self.replay
    }
}

impl PolicyOptimizer for ReplayOptimizer {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn step(&mut self) -> Result<OptimizerStats, OptimizerError> {
        let started = Instant::now();
        for _ in 0..self.cfg.rounds {
            let t = Instant::now();
            let w = self.base.weights();
            let futures = self
                .base
                .evaluators
                .iter()
                .map(|ev| submit_sample_task(ev, Some(w.clone())))
                .collect();
            let mut results = straggler_tolerant_gather(&self.base.rt, futures, 1.0, None).results;
            results.sort_by_key(|(i, _)| *i);
            let mut adds = Vec::new();
            for (_, r) in results {
                match r {
                    Ok(task) => {
                        self.base.stats.samples_collected += task.samples as u64;
                        self.base.record_episodes(&task.episodes);
                        adds.push(add_remote(&self.replay, task.batch.clone()));
                    }
                    Err(_) => self.base.stats.dropped_task_count += 1,
                }
            }
            if adds.is_empty() {
                return Err(OptimizerError::AllEvaluatorsFailed);
            }
            for a in adds {
                self.stored = *a.get_arc()?;
            }
            self.base.stats.add_phase("sample", t);

            if self.stored == 0 {
                return Err(OptimizerError::BufferEmpty);
            }
            if self.stored < self.cfg.learning_starts {
                continue;
            }
            for _ in 0..self.cfg.train_steps_per_round {
                let t = Instant::now();
                let mb_ref = sample_remote(&self.replay, self.cfg.train_batch_size).get_arc()?;
                let mb = self.base.rt.fetch(&mb_ref)?;
                self.base.stats.add_phase("replay_sample", t);
                self.base.stats.learner = learn_on(&mut self.base, &self.replay, &mb)?;
            }
        }
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
