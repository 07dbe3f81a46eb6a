use std::collections::BTreeSet;

use rldist::algorithms::config::{parse_toml, Violation};
use rldist::algorithms::ppo_es::{ppo_es_outer_step, select_elite, PpoEsPopulation};
use rldist::algorithms::{
    build_trainer, build_trainer_with_env, spawn_trainer, EsTrainer, OptimizerTrainer, TrainError, Trainable,
    TrainerCheckpoint, TrainerConfig, WeightCheckpoint,
};
use rldist::evaluation::EnvFactory;
use rldist::framing::{read_frames, tags, Codec};
use rldist::taskrt::{Runtime, RuntimeConfig};
use rldist_core::envs::{Action, ActionSpace, EnvError, EnvSpec, Environment, StepResult};
use rldist_core::policy::{PgConfig, PgGraph, PolicyGraph};
use rldist_core::rng::seeded;
use rldist_core::tensor::Matrix;
use serde_json::Value;

fn rt() -> Runtime {
    Runtime::new(RuntimeConfig::default())
}

fn small(algorithm: &str, env: &str) -> TrainerConfig {
    let mut c = TrainerConfig::new(algorithm, env);
    c.graph.hidden = Some(vec![16]);
    c
}

fn dqn_small(env: &str) -> TrainerConfig {
    let mut c = small("dqn", env);
    c.evaluator.batch_steps = Some(25);
    c.optimizer.params.learning_starts = Some(50);
    c.optimizer.params.train_steps_per_round = Some(2);
    c
}

/// Metrics record as JSON with every timing field removed.
fn without_timing(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(k, _)| !k.ends_with("wall_time"))
                .map(|(k, v)| (k, without_timing(v)))
                .collect(),
        ),
        other => other,
    }
}

fn run(cfg: &TrainerConfig, iterations: usize) -> Vec<Value> {
    let rt = rt();
    let mut t = build_trainer(&rt, cfg).unwrap();
    let out = (0..iterations)
        .map(|_| without_timing(serde_json::to_value(t.train().unwrap()).unwrap()))
        .collect();
    rt.shutdown();
    out
}

#[test]
fn pg_gridworld_first_iteration_counts_one_batch() {
    let mut cfg = small("pg", "gridworld");
    cfg.seed = 7;
    let r = cfg.resolve();
    let rt = rt();
    let mut t = build_trainer(&rt, &cfg).unwrap();
    let res = t.train().unwrap();
    assert_eq!(res.iter, 1);
    assert_eq!(res.timesteps_total, (cfg.num_evaluators * r.batch_steps) as u64);
    assert_eq!(res.timesteps_this_iter, res.timesteps_total);
    assert_eq!(res.optimizer.steps, 1);
}

#[test]
fn dqn_target_syncs_on_interval() {
    let mut cfg = dqn_small("gridworld");
    cfg.graph.target_interval = Some(5);
    let rt = rt();
    let mut t = OptimizerTrainer::new(rt.clone(), cfg).unwrap();
    let mut eps = Vec::new();
    for _ in 0..10 {
        let r = t.train().unwrap();
        eps.push(r.info["epsilon"]);
        assert_eq!(r.info["target_synced"] == 1.0, r.iter % 5 == 0);
    }
    assert_eq!(t.target_syncs(), &[5, 10]);
    assert!(eps.windows(2).all(|w| w[1] <= w[0]), "{eps:?}");
    assert!(eps[9] < eps[0]);
}

#[test]
fn timesteps_total_never_decreases() {
    for cfg in [small("pg", "cartpole"), dqn_small("gridworld"), small("a3c", "cartpole")] {
        let rt = rt();
        let mut t = build_trainer(&rt, &cfg).unwrap();
        let mut last = 0;
        for _ in 0..4 {
            let r = t.train().unwrap();
            assert!(r.timesteps_total >= last);
            assert_eq!(r.timesteps_total, last + r.timesteps_this_iter);
            last = r.timesteps_total;
        }
        rt.shutdown();
    }
}

#[test]
fn same_seed_same_metrics() {
    let mut es = small("es", "gridworld");
    es.optimizer.params.num_perturbations = Some(8);
    let mut apex = dqn_small("gridworld");
    apex.algorithm = "apex".into();
    apex.optimizer.params.learner_steps = Some(8);
    for cfg in [small("pg", "cartpole"), dqn_small("gridworld"), es, apex] {
        let a = run(&cfg, 3);
        let b = run(&cfg, 3);
        assert_eq!(a, b, "{}", cfg.algorithm);
        let mut other = cfg.clone();
        other.seed = 1;
        if cfg.algorithm == "pg" {
            assert_ne!(a, run(&other, 3));
        }
    }
}

#[test]
fn a3c_runs_on_async_and_param_server() {
    for kind in ["async", "param_server"] {
        let mut cfg = small("a3c", "cartpole");
        cfg.optimizer.kind = Some(kind.into());
        let rt = rt();
        let mut t = OptimizerTrainer::new(rt.clone(), cfg).unwrap();
        assert_eq!(t.optimizer().name(), kind);
        let r = t.train().unwrap();
        assert!(r.optimizer.grad_steps_applied >= 1);
        rt.shutdown();
    }
}

#[test]
fn multi_agent_pg_trains() {
    let mut cfg = small("pg", "twoagentcoin");
    cfg.evaluator.batch_steps = Some(40);
    let rt = rt();
    let mut t = build_trainer(&rt, &cfg).unwrap();
    let mut episodes = 0;
    for _ in 0..3 {
        let r = t.train().unwrap();
        assert!(r.timesteps_this_iter > 0);
        episodes = r.episodes_total;
    }
    assert!(episodes > 0);
}

#[test]
fn checkpoint_round_trip_restores_weights_and_counters() {
    let cfg = small("pg", "gridworld");
    let rt = rt();
    let mut t = build_trainer(&rt, &cfg).unwrap();
    t.train().unwrap();
    t.train().unwrap();
    let ckpt = t.checkpoint().unwrap();
    let bytes = ckpt.to_bytes();
    let frames = read_frames(&bytes).unwrap();
    let found: Vec<_> = frames.iter().map(|f| f.0).collect();
    assert_eq!(found, vec![tags::WEIGHTS, tags::CONFIG_JSON, tags::ITERATION]);
    let back = TrainerCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.progress.iteration, 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ckpt.save(&path).unwrap();
    let mut fresh = build_trainer(&rt, &cfg).unwrap();
    assert_ne!(fresh.get_weights(), t.get_weights());
    fresh.restore(&TrainerCheckpoint::load(&path).unwrap()).unwrap();
    assert_eq!(fresh.get_weights(), t.get_weights());
    assert_eq!(fresh.progress().timesteps_total, t.progress().timesteps_total);
    assert_eq!(fresh.train().unwrap().iter, 3);
}

#[test]
fn weight_checkpoint_shapes_cover_data() {
    let cfg = small("ppo", "cartpole");
    let rt = rt();
    let t = build_trainer(&rt, &cfg).unwrap();
    let shapes = t.weight_shapes();
    // policy 4-16-2 then value 4-16-1, each layer as weight then bias
    assert_eq!(shapes, vec![(4, 16), (1, 16), (16, 2), (1, 2), (4, 16), (1, 16), (16, 1), (1, 1)]);
    let w = WeightCheckpoint::new(shapes, t.get_weights()).unwrap();
    assert_eq!(WeightCheckpoint::from_frame(&w.to_frame()).unwrap(), w);
    assert!(WeightCheckpoint::new(vec![(2, 2)], vec![0.0; 3]).is_err());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let rt = rt();
    let t = build_trainer(&rt, &small("pg", "gridworld")).unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes();
    assert!(TrainerCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let weights_only = t.checkpoint().unwrap().weights.to_frame();
    assert!(TrainerCheckpoint::from_bytes(&weights_only).is_err());
}

#[test]
fn es_tree_matches_flat_gather() {
    // GridWorld starts are fixed, so fitness does not depend on which
    // evaluator ran a perturbation
    let mut cfg = small("es", "gridworld");
    cfg.optimizer.params.num_perturbations = Some(20);
    let step = |n: usize| {
        let mut cfg = cfg.clone();
        cfg.num_evaluators = n;
        let rt = rt();
        let mut t = EsTrainer::new(rt.clone(), cfg).unwrap();
        let r = t.train().unwrap();
        let out = (t.aggregator_count(), t.get_weights(), rt.max_depth(), r);
        rt.shutdown();
        out
    };
    let (flat_aggs, flat_w, _, _) = step(2);
    let (tree_aggs, tree_w, depth, res) = step(5);
    assert_eq!(flat_aggs, 0);
    assert_eq!(tree_aggs, 4);
    assert!(depth >= 2);
    assert_eq!(res.info["aggregators"], 4.0);
    let diff = flat_w.iter().zip(&tree_w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
    assert_eq!(res.timesteps_this_iter, res.optimizer.samples_collected);
}

#[test]
fn es_adam_defaults_are_the_published_ones() {
    let cfg = small("es", "cartpole");
    let rt = rt();
    let t = EsTrainer::new(rt, cfg).unwrap();
    let es = t.es().config();
    assert_eq!(es.noise_stddev, 0.02);
    assert_eq!(es.adam.stepsize, 0.01);
    assert_eq!(es.adam.l2_coeff, 0.005);
}

#[test]
fn ppo_es_zero_sigma_restarts_one_parent() {
    let mut member = small("ppo", "cartpole");
    member.evaluator.batch_steps = Some(50);
    member.optimizer.params.minibatch_size = Some(50);
    member.optimizer.params.epochs = Some(1);
    member.optimizer.params.update = Some("sgd".into());
    member.graph.lr = Some(1e-300);
    let rt = rt();
    let mut pop = PpoEsPopulation::new(&rt, &member, 3, 11, 1, 1).unwrap();
    let parent = pop.parent().to_vec();
    let step = ppo_es_outer_step(&mut pop, 0.0).unwrap();
    assert_eq!(step.scores.len(), 3);
    // every member restarted from the parent and barely moved
    let weights: Vec<Vec<f64>> = pop
        .members()
        .iter()
        .map(|m| m.invoke("w", |t, _| Ok::<_, String>(t.trainer.get_weights())).get().unwrap())
        .collect();
    let moved = |w: &[f64]| w.iter().zip(&parent).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for w in &weights {
        assert!(moved(w) < 1e-250);
    }
    assert!(moved(pop.parent()) < 1e-250);
    assert!(rt.max_depth() >= 3, "driver, trainer actor, evaluator actor");
}

#[test]
fn ppo_es_recenters_on_argmax() {
    assert_eq!(select_elite(&[3.0, 9.0, 5.0], f64::NEG_INFINITY), Some(1));
}

#[test]
fn ppo_es_best_never_drops() {
    let mut cfg = small("ppo_es", "cartpole");
    cfg.evaluator.batch_steps = Some(50);
    cfg.optimizer.params.minibatch_size = Some(50);
    cfg.optimizer.params.epochs = Some(2);
    cfg.population.size = Some(2);
    cfg.population.inner_iterations = Some(1);
    cfg.population.eval_episodes = Some(2);
    cfg.population.sigma_outer = Some(0.05);
    cfg.num_evaluators = 1;
    let rt = rt();
    let mut t = build_trainer(&rt, &cfg).unwrap();
    let mut best = f64::NEG_INFINITY;
    for _ in 0..3 {
        let r = t.train().unwrap();
        let b = r.info["population_best"];
        assert!(b >= best);
        assert_eq!(r.episode_reward_mean, Some(b));
        best = b;
    }
    assert!(rt.max_depth() >= 3);
}

#[test]
fn trainer_actor_hosts_its_evaluators() {
    let rt = rt();
    let t = spawn_trainer(&rt, small("pg", "gridworld")).unwrap();
    let r = t.invoke("train", |a, _| a.trainer.train()).get().unwrap();
    assert_eq!(r.iter, 1);
    assert_eq!(rt.max_depth(), 3);
    let children: BTreeSet<_> = rt
        .live_actors()
        .into_iter()
        .filter(|a| rt.parent_of(*a) == Some(t.id()))
        .collect();
    assert_eq!(children.len(), 2);
}

#[test]
fn hyperparameters_round_trip_through_trainable() {
    let rt = rt();
    let mut t = build_trainer(&rt, &small("pg", "cartpole")).unwrap();
    assert_eq!(t.hyperparameters()["lr"], 0.01);
    t.set_hyperparameter("lr", 0.02).unwrap();
    assert_eq!(t.hyperparameters()["lr"], 0.02);
    assert_eq!(t.config().graph.lr, Some(0.02));
    assert!(t.set_hyperparameter("gamma", 0.5).is_err());
    assert!(t.set_hyperparameter("lr", -1.0).is_err());
}

#[test]
fn validation_names_offending_keys() {
    let mut cfg = small("pg", "gridworld");
    assert!(cfg.validate().is_empty());
    cfg.graph.gamma = Some(1.5);
    let v = cfg.validate();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].key, "graph.gamma");
    assert!(v[0].to_string().contains("gamma"));

    let v = small("sarsa", "gridworld").validate();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].key, "algorithm");

    let err = parse_toml::<TrainerConfig>("algorithm = \"pg\"\nenv = \"gridworld\"\nnum_evaluators = -2\n").unwrap_err();
    assert_eq!(err.len(), 1);
    assert_eq!(err[0].key, "num_evaluators");

    let mut bad = small("dqn", "gridworld");
    bad.optimizer.kind = Some("sync".into());
    assert_eq!(bad.validate(), vec![Violation::new("optimizer.kind", bad.validate()[0].message.clone())]);
    assert!(small("pg", "pendulum").validate().iter().any(|v| v.key == "env"));
    match build_trainer(&rt(), &small("pg", "nowhere")) {
        Err(TrainError::Config(v)) => assert_eq!(v[0].key, "env"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn overrides_use_dotted_keys() {
    let cfg = small("pg", "gridworld");
    let c = cfg.with_override("graph.lr", Value::from(0.5)).unwrap();
    assert_eq!(c.graph.lr, Some(0.5));
    let c = c.with_override("optimizer.params.epochs", Value::from(3)).unwrap();
    assert_eq!(c.resolve().epochs, 3);
    assert_eq!(cfg.with_override("graph.nope", Value::from(1)).unwrap_err().key, "graph.nope");
    assert!(cfg.with_override("graph.lr", Value::from("fast")).is_err());
    let json = c.to_json();
    assert_eq!(TrainerConfig::from_json(&json).unwrap(), c);
}

/// One-step bandit: action 0 pays 1, action 1 pays 0.
struct Bandit {
    spec: EnvSpec,
}

impl Bandit {
    fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 1,
                action_space: ActionSpace::Discrete(2),
                horizon: 1,
            },
        }
    }
}

impl Environment for Bandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        vec![1.0]
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        let reward = if *action == Action::Discrete(0) { 1.0 } else { 0.0 };
        Ok(StepResult {
            obs: vec![1.0],
            reward,
            done: true,
        })
    }
}

const ENTROPY: f64 = 0.5;

/// Entropy-regularized expected loss -(p + βH(p)) of the policy in `w`.
fn surrogate_loss(cfg: &TrainerConfig, w: &[f64]) -> f64 {
    let pg_cfg = PgConfig {
        hidden: cfg.resolve().hidden,
        entropy_coeff: ENTROPY,
        ..PgConfig::default()
    };
    let mut g = PgGraph::new(1, &ActionSpace::Discrete(2), pg_cfg, 0).unwrap();
    g.set_weights(w).unwrap();
    let out = g
        .act(&Matrix::from_rows(&[[1.0]]).unwrap(), &mut [seeded(0)], false)
        .unwrap();
    let p_greedy = out.aux["logp"][0].exp();
    let p = if out.actions[0] == Action::Discrete(0) { p_greedy } else { 1.0 - p_greedy };
    let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    -(p + ENTROPY * h)
}

#[test]
fn optimizer_swap_reaches_the_same_loss() {
    const GRADS: u64 = 60;
    let mut finals = Vec::new();
    let mut base = small("pg", "bandit");
    base.graph.entropy_coeff = Some(ENTROPY);
    base.graph.lr = Some(0.05);
    base.evaluator.batch_steps = Some(32);
    base.optimizer.params.grads_per_step = Some(1);
    base.optimizer.params.shards = Some(1);
    let mut initial = None;
    for kind in ["sync", "async", "param_server"] {
        let mut cfg = base.clone();
        cfg.optimizer.kind = Some(kind.into());
        let rt = rt();
        let mut t = build_trainer_with_env(&rt, &cfg, EnvFactory::single(|| Box::new(Bandit::new()))).unwrap();
        initial.get_or_insert(surrogate_loss(&cfg, &t.get_weights()));
        let mut grads = 0;
        while grads < GRADS {
            grads = t.train().unwrap().optimizer.grad_steps_applied;
        }
        assert_eq!(grads, GRADS, "{kind}");
        finals.push(surrogate_loss(&cfg, &t.get_weights()));
        rt.shutdown();
    }
    let initial = initial.unwrap();
    for f in &finals {
        assert!(*f < initial - 0.1, "{initial} -> {finals:?}");
    }
    for a in &finals {
        for b in &finals {
            assert!((a - b).abs() <= 0.1 * a.abs().max(b.abs()), "{finals:?}");
        }
    }
}
