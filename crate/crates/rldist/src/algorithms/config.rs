//! Trainer configuration: the on-disk schema, range validation and
//! per-algorithm defaults.

use std::fmt;

use rldist_core::envs::{is_multi_agent, ActionSpace, ENV_NAMES};
use rldist_core::policy::ExplorationSchedule;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const ALGORITHMS: [&str; 7] = ["pg", "a3c", "ppo", "dqn", "apex", "es", "ppo_es"];

pub const OPTIMIZER_KINDS: [&str; 7] = ["sync", "multipass", "async", "param_server", "replay", "apex", "es"];

/// Optimizer kinds each algorithm accepts; the first is the default.
pub fn compatible_optimizers(algorithm: &str) -> &'static [&'static str] {
    match algorithm {
        "pg" => &["sync", "async", "param_server", "multipass"],
        "a3c" => &["async", "param_server"],
        "ppo" | "ppo_es" => &["multipass", "sync"],
        "dqn" => &["replay", "apex"],
        "apex" => &["apex"],
        "es" => &["es"],
        _ => &[],
    }
}

/// A config problem, located by its dotted key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl Violation {
    pub fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    /// Rows each evaluator returns per sample call.
    pub batch_steps: Option<usize>,
    pub num_envs: Option<usize>,
    /// `truncate_episodes` or `complete_episodes`.
    pub batch_mode: Option<String>,
    /// Simulated per-step environment cost.
    pub env_step_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerParams {
    /// `sgd` or `adam`.
    pub update: Option<String>,
    pub keep_fraction: Option<f64>,
    pub straggler_timeout_s: Option<f64>,
    pub epochs: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub memory_budget_mb: Option<usize>,
    pub grads_per_step: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub shards: Option<usize>,
    pub rounds: Option<usize>,
    pub buffer_size: Option<usize>,
    pub prioritized_alpha: Option<f64>,
    pub train_batch_size: Option<usize>,
    pub learning_starts: Option<usize>,
    pub train_steps_per_round: Option<usize>,
    pub replay_actors: Option<usize>,
    pub learner_steps: Option<usize>,
    pub broadcast_interval: Option<usize>,
    pub epsilon_base: Option<f64>,
    pub noise_stddev: Option<f64>,
    pub num_perturbations: Option<usize>,
    pub episodes_per_perturbation: Option<usize>,
    pub l2_coeff: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: Option<String>,
    pub params: OptimizerParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub hidden: Option<Vec<usize>>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub clip: Option<f64>,
    pub vf_coeff: Option<f64>,
    pub entropy_coeff: Option<f64>,
    pub n_step: Option<usize>,
    pub huber_delta: Option<f64>,
    pub eps_start: Option<f64>,
    pub eps_end: Option<f64>,
    pub eps_decay_steps: Option<u64>,
    /// Iterations between target-network syncs.
    pub target_interval: Option<u64>,
    pub shared_reward: Option<bool>,
}

/// Outer loop of the PPO-ES hybrid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSection {
    pub size: Option<usize>,
    pub inner_iterations: Option<usize>,
    pub sigma_outer: Option<f64>,
    pub eval_episodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: String,
    pub env: String,
    #[serde(default = "default_num_evaluators")]
    pub num_evaluators: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub evaluator: EvaluatorSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub population: PopulationSection,
}

fn default_num_evaluators() -> usize {
    2
}

/// Every tunable with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub optimizer: String,
    pub adam: bool,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub vf_coeff: f64,
    pub entropy_coeff: f64,
    pub n_step: usize,
    pub huber_delta: f64,
    pub exploration: ExplorationSchedule,
    pub target_interval: u64,
    pub shared_reward: bool,
    pub batch_steps: usize,
    pub num_envs: usize,
    pub complete_episodes: bool,
    pub env_step_latency_ms: f64,
    pub keep_fraction: f64,
    pub straggler_timeout_s: Option<f64>,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub memory_budget_mb: usize,
    pub grads_per_step: usize,
    pub max_in_flight: usize,
    pub shards: usize,
    pub rounds: usize,
    pub buffer_size: usize,
    pub prioritized_alpha: f64,
    pub train_batch_size: usize,
    pub learning_starts: usize,
    pub train_steps_per_round: usize,
    pub replay_actors: usize,
    pub learner_steps: usize,
    pub broadcast_interval: usize,
    pub epsilon_base: f64,
    pub noise_stddev: f64,
    pub num_perturbations: usize,
    pub episodes_per_perturbation: usize,
    pub l2_coeff: f64,
    pub population: usize,
    pub inner_iterations: usize,
    pub sigma_outer: f64,
    pub eval_episodes: usize,
}

impl TrainerConfig {
    pub fn new(algorithm: &str, env: &str) -> Self {
        Self {
            algorithm: algorithm.into(),
            env: env.into(),
            num_evaluators: default_num_evaluators(),
            seed: 0,
            evaluator: EvaluatorSection::default(),
            optimizer: OptimizerSection::default(),
            graph: GraphSection::default(),
            population: PopulationSection::default(),
        }
    }

    pub fn from_toml(src: &str) -> Result<Self, Vec<Violation>> {
        let cfg: Self = parse_toml(src)?;
        let v = cfg.validate();
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(v)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Sets a dotted key such as `graph.lr` from a JSON value.
    pub fn with_override(&self, key: &str, value: serde_json::Value) -> Result<Self, Violation> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Violation::new(key, "not a config table"))?;
            if !obj.contains_key(*part) {
                return Err(Violation::new(key, "unknown config key"));
            }
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), value.clone());
                break;
            }
            node = obj.get_mut(*part).expect("checked above");
        }
        serde_json::from_value(root).map_err(|e| Violation::new(key, e.to_string()))
    }

    pub fn resolve(&self) -> Resolved {
        let alg = self.algorithm.as_str();
        let g = &self.graph;
        let p = &self.optimizer.params;
        let e = &self.evaluator;
        let pop = &self.population;
        let n = self.num_evaluators.max(1);
        let ppo_like = matches!(alg, "ppo" | "ppo_es");
        let dqn_like = matches!(alg, "dqn" | "apex");
        let optimizer = self
            .optimizer
            .kind
            .clone()
            .unwrap_or_else(|| compatible_optimizers(alg).first().copied().unwrap_or("sync").to_string());
        let lr = g.lr.unwrap_or(match alg {
            "ppo" | "ppo_es" => 1e-4,
            "dqn" | "apex" => 5e-4,
            _ => 0.01,
        });
        let batch_steps = e.batch_steps.unwrap_or(match alg {
            "ppo" | "ppo_es" => 4000usize.div_ceil(n),
            "dqn" | "apex" | "a3c" => 50,
            _ => 200,
        });
        let schedule = ExplorationSchedule::default();
        Resolved {
            adam: p.update.as_deref().unwrap_or("adam") == "adam",
            lr,
            hidden: g.hidden.clone().unwrap_or_else(|| vec![64, 64]),
            gamma: g.gamma.unwrap_or(if ppo_like { 0.995 } else { 0.99 }),
            lambda: g.lambda.unwrap_or(0.95),
            clip: g.clip.unwrap_or(0.2),
            vf_coeff: g.vf_coeff.unwrap_or(0.5),
            entropy_coeff: g.entropy_coeff.unwrap_or(0.0),
            n_step: g.n_step.unwrap_or(3),
            huber_delta: g.huber_delta.unwrap_or(1.0),
            exploration: ExplorationSchedule {
                eps_start: g.eps_start.unwrap_or(schedule.eps_start),
                eps_end: g.eps_end.unwrap_or(schedule.eps_end),
                decay_steps: g.eps_decay_steps.unwrap_or(schedule.decay_steps),
            },
            target_interval: g.target_interval.unwrap_or(if dqn_like { 5 } else { 0 }),
            shared_reward: g.shared_reward.unwrap_or(false),
            batch_steps,
            num_envs: e.num_envs.unwrap_or(1),
            complete_episodes: e.batch_mode.as_deref() == Some("complete_episodes"),
            env_step_latency_ms: e.env_step_latency_ms.unwrap_or(0.0),
            keep_fraction: p.keep_fraction.unwrap_or(1.0),
            straggler_timeout_s: p.straggler_timeout_s,
            epochs: p.epochs.unwrap_or(if ppo_like { 20 } else { 1 }),
            minibatch_size: p.minibatch_size.unwrap_or(if ppo_like { 512 } else { 128 }),
            memory_budget_mb: p.memory_budget_mb.unwrap_or(256),
            grads_per_step: p.grads_per_step.unwrap_or(n),
            max_in_flight: p.max_in_flight.unwrap_or(n),
            shards: p.shards.unwrap_or(2),
            rounds: p.rounds.unwrap_or(1),
            buffer_size: p.buffer_size.unwrap_or(50_000),
            prioritized_alpha: p.prioritized_alpha.unwrap_or(rldist_core::replay::DEFAULT_ALPHA),
            train_batch_size: p.train_batch_size.unwrap_or(32),
            learning_starts: p.learning_starts.unwrap_or(1000),
            train_steps_per_round: p.train_steps_per_round.unwrap_or(8),
            replay_actors: p.replay_actors.unwrap_or(2),
            learner_steps: p.learner_steps.unwrap_or(16),
            broadcast_interval: p.broadcast_interval.unwrap_or(16),
            epsilon_base: p.epsilon_base.unwrap_or(0.4),
            noise_stddev: p.noise_stddev.unwrap_or(0.02),
            num_perturbations: p.num_perturbations.unwrap_or(200),
            episodes_per_perturbation: p.episodes_per_perturbation.unwrap_or(1),
            l2_coeff: p.l2_coeff.unwrap_or(0.005),
            population: pop.size.unwrap_or(4),
            inner_iterations: pop.inner_iterations.unwrap_or(2),
            sigma_outer: pop.sigma_outer.unwrap_or(0.01),
            eval_episodes: pop.eval_episodes.unwrap_or(5),
            optimizer,
        }
    }

    /// Every violation found; empty when the config is usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let alg = self.algorithm.as_str();
        if !ALGORITHMS.contains(&alg) {
            v.push(Violation::new(
                "algorithm",
                format!("unknown algorithm `{alg}`; expected one of {}", ALGORITHMS.join(", ")),
            ));
        }
        if !ENV_NAMES.contains(&self.env.as_str()) {
            v.push(Violation::new(
                "env",
                format!("unknown env `{}`; expected one of {}", self.env, ENV_NAMES.join(", ")),
            ));
        } else if !is_multi_agent(&self.env) {
            let env = rldist_core::envs::make_env(&self.env).expect("known env name");
            if matches!(env.spec().action_space, ActionSpace::Continuous { .. }) {
                v.push(Violation::new(
                    "env",
                    format!("`{}` has a continuous action space; every graph here is discrete", self.env),
                ));
            }
        }
        if self.num_evaluators == 0 {
            v.push(Violation::new("num_evaluators", "must be at least 1"));
        }
        if let Some(kind) = &self.optimizer.kind {
            if !OPTIMIZER_KINDS.contains(&kind.as_str()) {
                v.push(Violation::new("optimizer.kind", format!("unknown optimizer `{kind}`")));
            } else if ALGORITHMS.contains(&alg) && !compatible_optimizers(alg).contains(&kind.as_str()) {
                v.push(Violation::new(
                    "optimizer.kind",
                    format!(
                        "`{kind}` does not fit {alg}; expected one of {}",
                        compatible_optimizers(alg).join(", ")
                    ),
                ));
            }
        }
        if let Some(u) = &self.optimizer.params.update {
            if u != "sgd" && u != "adam" {
                v.push(Violation::new("optimizer.params.update", "expected `sgd` or `adam`"));
            }
        }
        if let Some(m) = &self.evaluator.batch_mode {
            if m != "truncate_episodes" && m != "complete_episodes" {
                v.push(Violation::new(
                    "evaluator.batch_mode",
                    "expected `truncate_episodes` or `complete_episodes`",
                ));
            }
        }
        if let Some(h) = &self.graph.hidden {
            if h.contains(&0) {
                v.push(Violation::new("graph.hidden", "layer widths must be positive"));
            }
        }
        let r = self.resolve();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                v.push(Violation::new(key, msg));
            }
        };
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        check(r.lr > 0.0 && r.lr.is_finite(), "graph.lr", "must be positive");
        check(unit(r.gamma), "graph.gamma", "must lie in [0, 1]");
        check(unit(r.lambda), "graph.lambda", "must lie in [0, 1]");
        check(r.clip > 0.0, "graph.clip", "must be positive");
        check(r.vf_coeff >= 0.0, "graph.vf_coeff", "must be non-negative");
        check(r.entropy_coeff >= 0.0, "graph.entropy_coeff", "must be non-negative");
        check(r.n_step >= 1, "graph.n_step", "must be at least 1");
        check(r.huber_delta > 0.0, "graph.huber_delta", "must be positive");
        check(unit(r.exploration.eps_start), "graph.eps_start", "must lie in [0, 1]");
        check(unit(r.exploration.eps_end), "graph.eps_end", "must lie in [0, 1]");
        check(r.batch_steps >= 1, "evaluator.batch_steps", "must be at least 1");
        check(r.num_envs >= 1, "evaluator.num_envs", "must be at least 1");
        check(
            r.env_step_latency_ms >= 0.0,
            "evaluator.env_step_latency_ms",
            "must be non-negative",
        );
        check(
            r.keep_fraction > 0.0 && r.keep_fraction <= 1.0,
            "optimizer.params.keep_fraction",
            "must lie in (0, 1]",
        );
        check(
            r.straggler_timeout_s.is_none_or(|t| t > 0.0),
            "optimizer.params.straggler_timeout_s",
            "must be positive",
        );
        check(r.epochs >= 1, "optimizer.params.epochs", "must be at least 1");
        check(r.minibatch_size >= 1, "optimizer.params.minibatch_size", "must be at least 1");
        check(r.grads_per_step >= 1, "optimizer.params.grads_per_step", "must be at least 1");
        check(r.max_in_flight >= 1, "optimizer.params.max_in_flight", "must be at least 1");
        check(r.shards >= 1, "optimizer.params.shards", "must be at least 1");
        check(r.rounds >= 1, "optimizer.params.rounds", "must be at least 1");
        check(r.buffer_size >= 1, "optimizer.params.buffer_size", "must be at least 1");
        check(
            r.prioritized_alpha >= 0.0,
            "optimizer.params.prioritized_alpha",
            "must be non-negative",
        );
        check(r.train_batch_size >= 1, "optimizer.params.train_batch_size", "must be at least 1");
        check(r.replay_actors >= 1, "optimizer.params.replay_actors", "must be at least 1");
        check(r.learner_steps >= 1, "optimizer.params.learner_steps", "must be at least 1");
        check(unit(r.epsilon_base), "optimizer.params.epsilon_base", "must lie in [0, 1]");
        check(r.noise_stddev > 0.0, "optimizer.params.noise_stddev", "must be positive");
        check(
            r.num_perturbations >= 2 && r.num_perturbations % 2 == 0,
            "optimizer.params.num_perturbations",
            "must be even and at least 2",
        );
        check(
            r.episodes_per_perturbation >= 1,
            "optimizer.params.episodes_per_perturbation",
            "must be at least 1",
        );
        check(r.l2_coeff >= 0.0, "optimizer.params.l2_coeff", "must be non-negative");
        check(r.population >= 2, "population.size", "must be at least 2");
        check(r.inner_iterations >= 1, "population.inner_iterations", "must be at least 1");
        check(r.sigma_outer >= 0.0, "population.sigma_outer", "must be non-negative");
        check(r.eval_episodes >= 1, "population.eval_episodes", "must be at least 1");
        v
    }
}

/// Deserializes TOML, reporting a failure as a violation on the key whose
/// line it occurred on.
pub fn parse_toml<T: DeserializeOwned>(src: &str) -> Result<T, Vec<Violation>> {
    toml::from_str(src).map_err(|e| {
        let key = e.span().map_or_else(|| "<document>".to_string(), |s| key_at(src, s.start));
        vec![Violation::new(&key, e.message().trim().to_string())]
    })
}

/// Dotted key of the assignment on the line containing byte `offset`.
fn key_at(src: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut start = 0;
    for line in src.split_inclusive('\n') {
        let end = start + line.len();
        let text = line.trim();
        if text.starts_with('[') {
            table = text.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset < end || end == src.len() {
            let key = text.split('=').next().unwrap_or("").trim().trim_matches('"');
            if text.starts_with('[') || key.is_empty() {
                return if table.is_empty() { "<document>".into() } else { table };
            }
            return if table.is_empty() {
                key.to_string()
            } else {
                format!("{table}.{key}")
            };
        }
        start = end;
    }
    "<document>".into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_located_from_offset() {
        let src = "algorithm = \"pg\"\n[graph]\ngamma = 1.5\n";
        let off = src.find("1.5").unwrap();
        assert_eq!(key_at(src, off), "graph.gamma");
        assert_eq!(key_at(src, 2), "algorithm");
    }

    #[test]
    fn negative_count_names_key() {
        let err = TrainerConfig::from_toml("algorithm = \"pg\"\nenv = \"gridworld\"\nnum_evaluators = -2\n")
            .unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].key, "num_evaluators");
    }

    #[test]
    fn override_rejects_unknown_keys() {
        let cfg = TrainerConfig::new("pg", "gridworld");
        let c = cfg.with_override("graph.lr", serde_json::json!(0.5)).unwrap();
        assert_eq!(c.graph.lr, Some(0.5));
        assert!(cfg.with_override("graph.nope", serde_json::json!(1)).is_err());
        assert!(cfg.with_override("graph.lr", serde_json::json!("x")).is_err());
    }
}
