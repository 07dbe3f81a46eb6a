//! Policy evaluators: vectorized environment stepping, trajectory
//! postprocessing and batch transport.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rldist_core::batch::{BatchError, SampleBatch, Transition};
use rldist_core::envs::{self, EnvError, EnvSpec, Environment, MultiAgentEnvironment};
use rldist_core::policy::{GradientOutput, PolicyError, PolicyGraph};
use rldist_core::rng::{mix, seeded, SeededRng};
use rldist_core::tensor::{Matrix, TensorError};
use thiserror::Error;

use crate::framing::FrameError;
use crate::taskrt::{ActorRef, ObjectRef, ResourceClaim, Runtime, RuntimeError};

pub mod compress;

pub use compress::{
    compress_batch, decompress_batch, read_batch_dump, write_batch_dump, CompressedBatch, WireBatch,
    DEFAULT_COMPRESS_THRESHOLD,
};

const ACTION_STREAM: u64 = 0xAC7;
const EPISODE_ID_STREAM: u64 = 0xE9;
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("corrupt payload: {0}")]
    CorruptPayload(#[from] FrameError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("agent batches are not time-aligned: {0}")]
    MisalignedEpisodes(String),
    #[error("invalid evaluator config: {0}")]
    Config(String),
}

impl From<EvalError> for String {
    fn from(e: EvalError) -> String {
        e.to_string()
    }
}

pub type SingleEnvMaker = Arc<dyn Fn() -> Box<dyn Environment + Send> + Send + Sync>;
pub type MultiEnvMaker = Arc<dyn Fn() -> Box<dyn MultiAgentEnvironment + Send> + Send + Sync>;

/// Builds fresh environment instances for an evaluator.
#[derive(Clone)]
pub enum EnvFactory {
    Single(SingleEnvMaker),
    Multi(MultiEnvMaker),
}

impl std::fmt::Debug for EnvFactory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvFactory::Single(_) => f.write_str("EnvFactory::Single"),
            EnvFactory::Multi(_) => f.write_str("EnvFactory::Multi"),
        }
    }
}

impl EnvFactory {
    pub fn by_name(name: &str) -> Result<Self, EnvError> {
        if envs::is_multi_agent(name) {
            envs::make_multi_agent_env(name)?;
            let name = name.to_string();
            Ok(EnvFactory::Multi(Arc::new(move || {
                envs::make_multi_agent_env(&name).expect("checked above")
            })))
        } else {
            envs::make_env(name)?;
            let name = name.to_string();
            Ok(EnvFactory::Single(Arc::new(move || envs::make_env(&name).expect("checked above"))))
        }
    }

    pub fn single<F>(f: F) -> Self
    where
        F: Fn() -> Box<dyn Environment + Send> + Send + Sync + 'static,
    {
        EnvFactory::Single(Arc::new(f))
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            EnvFactory::Single(f) => f().spec().clone(),
            EnvFactory::Multi(f) => f().spec().clone(),
        }
    }

    pub fn num_agents(&self) -> usize {
        match self {
            EnvFactory::Single(_) => 1,
            EnvFactory::Multi(f) => f().num_agents(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Exactly `batch_steps` rows; episodes carry over between calls.
    TruncateEpisodes,
    /// Whole episodes only, at least `batch_steps` rows.
    CompleteEpisodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorConfig {
    pub num_envs: usize,
    pub batch_steps: usize,
    pub mode: BatchMode,
    pub seed: u64,
    pub explore: bool,
    /// Simulated cost of one environment step.
    pub env_step_latency: Duration,
    /// Obs-column size in bytes above which `sample_wire` compresses.
    pub compress_threshold: usize,
    /// Per-env seeds; derived from `seed` when absent.
    pub env_seeds: Option<Vec<u64>>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            num_envs: 1,
            batch_steps: 200,
            mode: BatchMode::TruncateEpisodes,
            seed: 0,
            explore: true,
            env_step_latency: Duration::ZERO,
            compress_threshold: DEFAULT_COMPRESS_THRESHOLD,
            env_seeds: None,
        }
    }
}

impl EvaluatorConfig {
    pub fn env_seeds(&self) -> Vec<u64> {
        match &self.env_seeds {
            Some(s) => s.clone(),
            None => (0..self.num_envs as u64).map(|i| mix(self.seed, i)).collect(),
        }
    }
}

/// Returns and lengths of the episodes completed since the last drain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub returns: Vec<f64>,
    pub lengths: Vec<u32>,
}

impl EpisodeStats {
    pub fn extend(&mut self, other: EpisodeStats) {
        self.returns.extend(other.returns);
        self.lengths.extend(other.lengths);
    }
}

/// Versioned weights in the object store.
#[derive(Debug, Clone)]
pub struct WeightsHandle {
    pub version: u64,
    pub weights: ObjectRef<Vec<f64>>,
}

fn episode_id_base(env_seed: u64) -> u64 {
    (mix(env_seed, EPISODE_ID_STREAM) & 0xFFFF_FFFF) << 32
}

struct Slot<E: ?Sized> {
    seed: u64,
    episode: u64,
    eps_id: u64,
    t: u32,
    needs_reset: bool,
    env: Box<E>,
}

impl<E: ?Sized> Slot<E> {
    fn new(env: Box<E>, seed: u64) -> Self {
        Self {
            seed,
            episode: 0,
            eps_id: 0,
            t: 0,
            needs_reset: true,
            env,
        }
    }

    fn begin_episode(&mut self) -> u64 {
        let reset_seed = mix(self.seed, self.episode);
        self.eps_id = episode_id_base(self.seed) | (self.episode & 0xFFFF_FFFF);
        self.t = 0;
        self.needs_reset = false;
        reset_seed
    }

    fn end_episode(&mut self) {
        self.episode += 1;
        self.needs_reset = true;
    }
}

struct SingleSlot {
    slot: Slot<dyn Environment + Send>,
    obs: Vec<f64>,
    ret: f64,
    rng: SeededRng,
}

struct MultiSlot {
    slot: Slot<dyn MultiAgentEnvironment + Send>,
    obs: Vec<Vec<f64>>,
    ret: f64,
    rngs: Vec<SeededRng>,
}

enum Envs {
    Single(Vec<SingleSlot>),
    Multi(MultiSlot),
}

/// Rows for one env (or one agent) plus the aux outputs recorded with them.
struct RowBuf {
    batch: SampleBatch,
    aux: BTreeMap<String, Vec<f64>>,
}

impl RowBuf {
    fn new(spec: &EnvSpec, aux: &[&str]) -> Self {
        Self {
            batch: SampleBatch::new(spec.obs_dim, spec.action_space.width()),
            aux: aux.iter().map(|n| (n.to_string(), Vec::new())).collect(),
        }
    }

    fn finish(self) -> Result<SampleBatch, BatchError> {
        let mut b = self.batch;
        for (name, col) in self.aux {
            b.set_column(&name, col)?;
        }
        Ok(b)
    }
}

/// Steps vectorized environments with a local policy graph and returns
/// postprocessed batches.
pub struct PolicyEvaluator {
    graph: Box<dyn PolicyGraph>,
    cfg: EvaluatorConfig,
    factory: EnvFactory,
    spec: EnvSpec,
    envs: Envs,
    forward_passes: u64,
    steps_sampled: u64,
    weights_version: Option<u64>,
    episodes: EpisodeStats,
    eval_round: u64,
}

impl std::fmt::Debug for PolicyEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyEvaluator")
            .field("cfg", &self.cfg)
            .field("forward_passes", &self.forward_passes)
            .field("steps_sampled", &self.steps_sampled)
            .finish()
    }
}

impl PolicyEvaluator {
    pub fn new(factory: EnvFactory, graph: Box<dyn PolicyGraph>, cfg: EvaluatorConfig) -> Result<Self, EvalError> {
        if cfg.batch_steps == 0 {
            return Err(EvalError::Config("batch_steps must be positive".into()));
        }
        let seeds = cfg.env_seeds();
        if seeds.is_empty() || seeds.len() != cfg.num_envs {
            return Err(EvalError::Config(format!(
                "need {} env seeds, got {}",
                cfg.num_envs,
                seeds.len()
            )));
        }
        let spec = factory.spec();
        if spec.obs_dim != graph.obs_dim() || &spec.action_space != graph.action_space() {
            return Err(EvalError::Config("policy graph does not match the environment spec".into()));
        }
        let envs = match &factory {
            EnvFactory::Single(make) => Envs::Single(
                seeds
                    .iter()
                    .map(|&s| SingleSlot {
                        slot: Slot::new(make(), s),
                        obs: Vec::new(),
                        ret: 0.0,
                        rng: seeded(mix(s, ACTION_STREAM)),
                    })
                    .collect(),
            ),
            EnvFactory::Multi(make) => {
                if cfg.num_envs != 1 {
                    return Err(EvalError::Config("multi-agent evaluators run one env".into()));
                }
                let env = make();
                let agents = env.num_agents() as u64;
                Envs::Multi(MultiSlot {
                    slot: Slot::new(env, seeds[0]),
                    obs: Vec::new(),
                    ret: 0.0,
                    rngs: (0..agents).map(|a| seeded(mix(seeds[0], ACTION_STREAM + a))).collect(),
                })
            }
        };
        Ok(Self {
            graph,
            cfg,
            factory,
            spec,
            envs,
            forward_passes: 0,
            steps_sampled: 0,
            weights_version: None,
            episodes: EpisodeStats::default(),
            eval_round: 0,
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn graph(&self) -> &dyn PolicyGraph {
        self.graph.as_ref()
    }

    pub fn graph_mut(&mut self) -> &mut dyn PolicyGraph {
        self.graph.as_mut()
    }

    pub fn num_agents(&self) -> usize {
        match &self.envs {
            Envs::Single(_) => 1,
            Envs::Multi(m) => m.rngs.len(),
        }
    }

    /// Number of batched `act` calls issued so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    pub fn steps_sampled(&self) -> u64 {
        self.steps_sampled
    }

    pub fn weights_version(&self) -> Option<u64> {
        self.weights_version
    }

    /// Installs weights directly; the next `sync_weights` refetches.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<(), EvalError> {
        self.graph.set_weights(weights)?;
        self.weights_version = None;
        Ok(())
    }

    pub fn get_weights(&self) -> Vec<f64> {
        self.graph.get_weights()
    }

    /// Loads `w` unless this version is already installed. Returns whether a
    /// fetch happened.
    pub fn sync_weights(&mut self, rt: &Runtime, w: &WeightsHandle) -> Result<bool, EvalError> {
        if self.weights_version == Some(w.version) {
            return Ok(false);
        }
        let weights = rt.fetch(&w.weights)?;
        self.graph.set_weights(&weights)?;
        self.weights_version = Some(w.version);
        Ok(true)
    }

    pub fn take_episode_stats(&mut self) -> EpisodeStats {
        std::mem::take(&mut self.episodes)
    }

    /// One postprocessed batch according to the configured mode.
    pub fn sample(&mut self) -> Result<SampleBatch, EvalError> {
        let batch = match (&self.envs, self.cfg.mode) {
            (Envs::Single(_), BatchMode::TruncateEpisodes) => self.sample_single_truncated()?,
            (Envs::Single(_), BatchMode::CompleteEpisodes) => self.sample_single_complete()?,
            (Envs::Multi(_), mode) => self.sample_multi(mode)?,
        };
        self.steps_sampled += batch.len() as u64;
        Ok(batch)
    }

    /// `sample`, compressed when the observations are large.
    pub fn sample_wire(&mut self) -> Result<WireBatch, EvalError> {
        let batch = self.sample()?;
        Ok(WireBatch::encode(batch, self.cfg.compress_threshold))
    }

    pub fn compute_gradients(&self, batch: &SampleBatch) -> Result<GradientOutput, EvalError> {
        Ok(self.graph.gradients(batch)?)
    }

    /// Runs `episodes` fresh episodes on a separate env instance and returns
    /// their returns. Sampling state is untouched.
    pub fn evaluate(&mut self, episodes: usize, explore: bool) -> Result<Vec<f64>, EvalError> {
        Ok(self.evaluate_episodes(episodes, explore)?.returns)
    }

    /// [`evaluate`](Self::evaluate) with episode lengths.
    pub fn evaluate_episodes(&mut self, episodes: usize, explore: bool) -> Result<EpisodeStats, EvalError> {
        let round = self.eval_round;
        self.eval_round += 1;
        let base = mix(mix(self.cfg.seed, EVAL_STREAM), round);
        let mut out = EpisodeStats::default();
        for k in 0..episodes as u64 {
            let mut len = 0u32;
            let seed = mix(base, k);
            let mut rng = [seeded(mix(seed, ACTION_STREAM))];
            let ret = match &self.factory {
                EnvFactory::Single(make) => {
                    let mut env = make();
                    let mut obs = env.reset(seed);
                    let mut ret = 0.0;
                    loop {
                        let m = Matrix::from_vec(1, obs.len(), obs)?;
                        let a = self.graph.act(&m, &mut rng, explore)?;
                        let step = env.step(&a.actions[0])?;
                        len += 1;
                        ret += step.reward;
                        if step.done {
                            break ret;
                        }
                        obs = step.obs;
                    }
                }
                EnvFactory::Multi(make) => {
                    let mut env = make();
                    let agents = env.num_agents();
                    let mut rngs: Vec<SeededRng> =
                        (0..agents as u64).map(|a| seeded(mix(seed, ACTION_STREAM + a))).collect();
                    let mut obs = env.reset(seed);
                    let mut ret = 0.0;
                    loop {
                        let m = Matrix::from_rows(&obs)?;
                        let a = self.graph.act(&m, &mut rngs, explore)?;
                        let steps = env.step(&a.actions)?;
                        len += 1;
                        ret += steps.iter().map(|s| s.reward).sum::<f64>() / agents as f64;
                        if steps.iter().any(|s| s.done) {
                            break ret;
                        }
                        obs = steps.into_iter().map(|s| s.obs).collect();
                    }
                }
            };
            out.returns.push(ret);
            out.lengths.push(len);
        }
        Ok(out)
    }

    fn latency(&self) {
        if !self.cfg.env_step_latency.is_zero() {
            std::thread::sleep(self.cfg.env_step_latency);
        }
    }

    /// One forward pass over the listed env slots, appending a row to each
    /// slot's buffer. Returns the done flag per listed slot.
    fn step_slots(&mut self, active: &[usize], bufs: &mut [RowBuf]) -> Result<Vec<bool>, EvalError> {
        let Envs::Single(slots) = &mut self.envs else {
            unreachable!("single-agent path")
        };
        let dim = self.spec.obs_dim;
        let mut obs = Vec::with_capacity(active.len() * dim);
        let mut rngs = Vec::with_capacity(active.len());
        for &i in active {
            let s = &mut slots[i];
            if s.slot.needs_reset {
                let seed = s.slot.begin_episode();
                s.obs = s.slot.env.reset(seed);
                s.ret = 0.0;
            }
            obs.extend_from_slice(&s.obs);
            rngs.push(s.rng.clone());
        }
        let m = Matrix::from_vec(active.len(), dim, obs)?;
        let out = self.graph.act(&m, &mut rngs, self.cfg.explore)?;
        self.forward_passes += 1;
        let mut dones = Vec::with_capacity(active.len());
        let mut action_row = Vec::new();
        for (j, &i) in active.iter().enumerate() {
            let s = &mut slots[i];
            s.rng = rngs[j].clone();
            if !self.cfg.env_step_latency.is_zero() {
                std::thread::sleep(self.cfg.env_step_latency);
            }
            let step = s.slot.env.step(&out.actions[j])?;
            action_row.clear();
            out.actions[j].write_row(&mut action_row);
            let buf = &mut bufs[i];
            buf.batch.push(Transition {
                obs: &s.obs,
                action: &action_row,
                reward: step.reward,
                done: step.done,
                new_obs: &step.obs,
                eps_id: s.slot.eps_id,
                agent_id: 0,
                t_index: s.slot.t,
            });
            for (name, col) in buf.aux.iter_mut() {
                col.push(out.aux.get(name).map(|v| v[j]).unwrap_or(0.0));
            }
            s.ret += step.reward;
            s.slot.t += 1;
            if step.done {
                self.episodes.returns.push(s.ret);
                self.episodes.lengths.push(s.slot.t);
                s.slot.end_episode();
            }
            s.obs = step.obs;
            dones.push(step.done);
        }
        Ok(dones)
    }

    fn row_bufs(&self, n: usize) -> Vec<RowBuf> {
        let aux = self.graph.aux_output_names();
        (0..n).map(|_| RowBuf::new(&self.spec, aux)).collect()
    }

    /// Postprocesses each non-empty per-env buffer and concatenates them in
    /// env order.
    fn finish_single(&self, bufs: Vec<RowBuf>) -> Result<SampleBatch, EvalError> {
        let mut parts = Vec::with_capacity(bufs.len());
        for buf in bufs {
            if buf.batch.is_empty() {
                continue;
            }
            parts.push(self.graph.postprocess(buf.finish()?, &[])?);
        }
        Ok(SampleBatch::concat(&parts)?)
    }

    fn sample_single_truncated(&mut self) -> Result<SampleBatch, EvalError> {
        let n = self.cfg.num_envs;
        let k = self.cfg.batch_steps;
        let mut bufs = self.row_bufs(n);
        let mut collected = 0;
        while collected < k {
            let width = n.min(k - collected);
            let active: Vec<usize> = (0..width).collect();
            self.step_slots(&active, &mut bufs)?;
            collected += width;
        }
        self.finish_single(bufs)
    }

    fn sample_single_complete(&mut self) -> Result<SampleBatch, EvalError> {
        let n = self.cfg.num_envs;
        let k = self.cfg.batch_steps;
        if let Envs::Single(slots) = &mut self.envs {
            for s in slots.iter_mut().filter(|s| !s.slot.needs_reset) {
                // abandon partial episodes left by a truncated call
                s.slot.end_episode();
            }
        }
        let mut bufs = self.row_bufs(n);
        let mut running = vec![true; n];
        let mut total = 0;
        loop {
            let active: Vec<usize> = (0..n).filter(|&i| running[i]).collect();
            if active.is_empty() {
                break;
            }
            let dones = self.step_slots(&active, &mut bufs)?;
            total += active.len();
            for (&i, done) in active.iter().zip(dones) {
                if done && total >= k {
                    running[i] = false;
                }
            }
        }
        self.finish_single(bufs)
    }

    fn sample_multi(&mut self, mode: BatchMode) -> Result<SampleBatch, EvalError> {
        let agents = self.num_agents();
        let k = self.cfg.batch_steps;
        let mut bufs = self.row_bufs(agents);
        if mode == BatchMode::CompleteEpisodes {
            if let Envs::Multi(m) = &mut self.envs {
                if !m.slot.needs_reset {
                    m.slot.end_episode();
                }
            }
        }
        let steps_needed = k.div_ceil(agents);
        let mut steps = 0;
        loop {
            let done = self.step_multi(&mut bufs)?;
            steps += 1;
            let enough = steps >= steps_needed;
            match mode {
                BatchMode::TruncateEpisodes if enough => break,
                BatchMode::CompleteEpisodes if enough && done => break,
                _ => {}
            }
        }
        let per_agent = bufs.into_iter().map(RowBuf::finish).collect::<Result<Vec<_>, _>>()?;
        let mut parts = Vec::with_capacity(agents);
        for (batch, peers) in collate_multiagent(per_agent)? {
            parts.push(self.graph.postprocess(batch, &peers)?);
        }
        Ok(SampleBatch::concat(&parts)?)
    }

    fn step_multi(&mut self, bufs: &mut [RowBuf]) -> Result<bool, EvalError> {
        self.latency();
        let Envs::Multi(m) = &mut self.envs else {
            unreachable!("multi-agent path")
        };
        if m.slot.needs_reset {
            let seed = m.slot.begin_episode();
            m.obs = m.slot.env.reset(seed);
            m.ret = 0.0;
        }
        let agents = m.rngs.len();
        let obs = Matrix::from_rows(&m.obs)?;
        let out = self.graph.act(&obs, &mut m.rngs, self.cfg.explore)?;
        self.forward_passes += 1;
        let results = m.slot.env.step(&out.actions)?;
        let done = results.iter().any(|r| r.done);
        let mut action_row = Vec::new();
        for (a, res) in results.iter().enumerate() {
            action_row.clear();
            out.actions[a].write_row(&mut action_row);
            let buf = &mut bufs[a];
            buf.batch.push(Transition {
                obs: &m.obs[a],
                action: &action_row,
                reward: res.reward,
                done,
                new_obs: &res.obs,
                eps_id: m.slot.eps_id,
                agent_id: a as u32,
                t_index: m.slot.t,
            });
            for (name, col) in buf.aux.iter_mut() {
                col.push(out.aux.get(name).map(|v| v[a]).unwrap_or(0.0));
            }
            m.ret += res.reward / agents as f64;
        }
        m.slot.t += 1;
        m.obs = results.into_iter().map(|r| r.obs).collect();
        if done {
            self.episodes.returns.push(m.ret);
            self.episodes.lengths.push(m.slot.t);
            m.slot.end_episode();
        }
        Ok(done)
    }
}

/// Pairs each agent's batch with the time-aligned batches of its peers.
/// Every batch must cover the same `(eps_id, t_index)` rows.
pub fn collate_multiagent(per_agent: Vec<SampleBatch>) -> Result<Vec<(SampleBatch, Vec<SampleBatch>)>, EvalError> {
    if let Some(first) = per_agent.first() {
        for (a, b) in per_agent.iter().enumerate().skip(1) {
            if b.len() != first.len() {
                return Err(EvalError::MisalignedEpisodes(format!(
                    "agent {a} has {} rows, agent 0 has {}",
                    b.len(),
                    first.len()
                )));
            }
            if b.eps_id != first.eps_id || b.t_index != first.t_index || b.dones != first.dones {
                return Err(EvalError::MisalignedEpisodes(format!("agent {a} rows differ from agent 0")));
            }
        }
    }
    let out = (0..per_agent.len())
        .map(|i| {
            let peers = per_agent
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| b.clone())
                .collect();
            (per_agent[i].clone(), peers)
        })
        .collect();
    Ok(out)
}

pub type EvaluatorRef = ActorRef<PolicyEvaluator>;

/// Builds a policy graph for an env spec. The seed fixes the initial weights.
pub type GraphBuilder = Arc<dyn Fn(&EnvSpec, u64) -> Result<Box<dyn PolicyGraph>, PolicyError> + Send + Sync>;

/// Spawns `count` evaluator actors. Evaluator `i` samples with seed
/// `mix(base.seed, i + 1)`; all graphs start from the weights built with
/// `base.seed`.
pub fn spawn_evaluators(
    rt: &Runtime,
    count: usize,
    env: &EnvFactory,
    graph: &GraphBuilder,
    base: &EvaluatorConfig,
) -> Result<Vec<EvaluatorRef>, RuntimeError> {
    (0..count)
        .map(|i| {
            let env = env.clone();
            let graph = graph.clone();
            let mut cfg = base.clone();
            cfg.seed = mix(base.seed, i as u64 + 1);
            cfg.env_seeds = None;
            let graph_seed = base.seed;
            rt.spawn_actor(ResourceClaim::default(), move |_| {
                let g = graph(&env.spec(), graph_seed).map_err(String::from)?;
                PolicyEvaluator::new(env.clone(), g, cfg.clone()).map_err(String::from)
            })
        })
        .collect()
}
