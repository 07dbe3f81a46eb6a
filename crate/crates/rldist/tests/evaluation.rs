use std::sync::Arc;

use rldist::evaluation::{
    collate_multiagent, compress_batch, decompress_batch, read_batch_dump, spawn_evaluators, write_batch_dump,
    BatchMode, EnvFactory, EvalError, EvaluatorConfig, GraphBuilder, PolicyEvaluator, WeightsHandle, WireBatch,
};
use rldist::taskrt::{Runtime, RuntimeConfig};
use rldist_core::batch::{columns, SampleBatch};
use rldist_core::envs::{GridWorld, GridWorldConfig, ObservationMode};
use rldist_core::policy::{DqnConfig, DqnGraph, PgConfig, PgGraph, PolicyGraph};

fn pg_graph(factory: &EnvFactory, seed: u64) -> Box<dyn PolicyGraph> {
    let spec = factory.spec();
    let cfg = PgConfig {
        hidden: vec![16],
        ..PgConfig::default()
    };
    Box::new(PgGraph::new(spec.obs_dim, &spec.action_space, cfg, seed).unwrap())
}

fn evaluator(env: &str, cfg: EvaluatorConfig) -> PolicyEvaluator {
    let factory = EnvFactory::by_name(env).unwrap();
    let graph = pg_graph(&factory, 7);
    PolicyEvaluator::new(factory, graph, cfg).unwrap()
}

#[test]
fn vectorized_rows_equal_union_of_serial_runs() {
    let seeds = vec![11, 22, 33, 44];
    let per_env = 50;
    let mut vec_eval = evaluator(
        "cartpole",
        EvaluatorConfig {
            num_envs: 4,
            batch_steps: 4 * per_env,
            env_seeds: Some(seeds.clone()),
            ..EvaluatorConfig::default()
        },
    );
    let mut serial: Vec<PolicyEvaluator> = seeds
        .iter()
        .map(|&s| {
            evaluator(
                "cartpole",
                EvaluatorConfig {
                    num_envs: 1,
                    batch_steps: per_env,
                    env_seeds: Some(vec![s]),
                    ..EvaluatorConfig::default()
                },
            )
        })
        .collect();
    for _ in 0..3 {
        let v = vec_eval.sample().unwrap();
        let parts: Vec<SampleBatch> = serial.iter_mut().map(|e| e.sample().unwrap()).collect();
        assert_eq!(v, SampleBatch::concat(&parts).unwrap());
    }
    assert_eq!(vec_eval.forward_passes(), 3 * per_env as u64);
}

#[test]
fn truncated_batches_have_exact_length_and_carry_over() {
    let mut e = evaluator(
        "cartpole",
        EvaluatorConfig {
            num_envs: 4,
            batch_steps: 10,
            ..EvaluatorConfig::default()
        },
    );
    let a = e.sample().unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(e.forward_passes(), 3);
    let b = e.sample().unwrap();
    assert_eq!(b.len(), 10);
    assert_eq!(e.forward_passes(), 6);
    // env 0 contributes 3 rows per call and continues its episode
    assert_eq!(&a.t_index[..3], &[0, 1, 2]);
    assert_eq!(a.eps_id[0], b.eps_id[0]);
    assert_eq!(&b.t_index[..3], &[3, 4, 5]);
    assert_eq!(b.obs_row(0), a.new_obs_row(2));
}

#[test]
fn complete_mode_returns_whole_episodes() {
    let mut e = evaluator(
        "gridworld",
        EvaluatorConfig {
            num_envs: 3,
            batch_steps: 120,
            mode: BatchMode::CompleteEpisodes,
            ..EvaluatorConfig::default()
        },
    );
    for _ in 0..2 {
        let b = e.sample().unwrap();
        assert!(b.len() >= 120);
        for seg in b.episode_segments() {
            assert!(b.dones[seg.end - 1]);
            assert_eq!(b.t_index[seg.start], 0);
            assert!(b.dones[seg.start..seg.end - 1].iter().all(|d| !d));
        }
    }
    let stats = e.take_episode_stats();
    assert!(!stats.returns.is_empty());
    assert!(e.take_episode_stats().returns.is_empty());
}

#[test]
fn episode_ids_are_unique_across_envs() {
    let mut e = evaluator(
        "gridworld",
        EvaluatorConfig {
            num_envs: 4,
            batch_steps: 2000,
            ..EvaluatorConfig::default()
        },
    );
    let b = e.sample().unwrap();
    let mut seen = std::collections::BTreeMap::new();
    for seg in b.episode_segments() {
        let env = seg.start / 500;
        let prev = seen.insert(b.eps_id[seg.start], env);
        assert!(prev.is_none() || prev == Some(env));
    }
}

#[test]
fn postprocess_adds_advantages_on_evaluator() {
    let mut e = evaluator("cartpole", EvaluatorConfig::default());
    let b = e.sample().unwrap();
    assert!(b.column(columns::ADVANTAGES).is_ok());
    assert!(b.column(columns::VALUE_TARGETS).is_ok());
    assert!(b.column(columns::VF_PREDS).is_ok());
}

#[test]
fn multi_agent_batches_hold_all_agents() {
    let factory = EnvFactory::by_name("twoagentcoin").unwrap();
    let spec = factory.spec();
    let cfg = PgConfig {
        hidden: vec![8],
        shared_reward: true,
        ..PgConfig::default()
    };
    let graph = Box::new(PgGraph::new(spec.obs_dim, &spec.action_space, cfg, 1).unwrap());
    let mut e = PolicyEvaluator::new(
        factory,
        graph,
        EvaluatorConfig {
            batch_steps: 10,
            ..EvaluatorConfig::default()
        },
    )
    .unwrap();
    let b = e.sample().unwrap();
    assert_eq!(e.forward_passes(), 5);
    assert_eq!(b.len(), 10);
    assert_eq!(&b.agent_id[..5], &[0; 5]);
    assert_eq!(&b.agent_id[5..], &[1; 5]);
    assert_eq!(&b.t_index[..5], &b.t_index[5..]);
}

#[test]
fn collate_rejects_misaligned_agents() {
    let mut e = evaluator("cartpole", EvaluatorConfig::default());
    let b = e.sample().unwrap();
    let short = b.slice(0..b.len() - 1);
    assert!(matches!(
        collate_multiagent(vec![b.clone(), short]),
        Err(EvalError::MisalignedEpisodes(_))
    ));
    let pairs = collate_multiagent(vec![b.clone(), b.clone(), b.clone()]).unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs.iter().all(|(_, peers)| peers.len() == 2));
}

#[test]
fn image_batches_compress_losslessly() {
    let factory = EnvFactory::single(|| {
        Box::new(GridWorld::new(GridWorldConfig {
            observation: ObservationMode::Image,
            ..GridWorldConfig::default()
        }))
    });
    let spec = factory.spec();
    let graph = Box::new(DqnGraph::new(spec.obs_dim, &spec.action_space, DqnConfig { hidden: vec![4], ..DqnConfig::default() }, 0).unwrap());
    let mut e = PolicyEvaluator::new(
        factory,
        graph,
        EvaluatorConfig {
            batch_steps: 64,
            ..EvaluatorConfig::default()
        },
    )
    .unwrap();
    let wire = e.sample_wire().unwrap();
    let WireBatch::Compressed(c) = &wire else {
        panic!("image batch should be compressed");
    };
    assert!(c.ratio() >= 5.0, "ratio {}", c.ratio());
    let plain = wire.to_batch().unwrap();
    assert_eq!(plain.len(), 64);
    assert_eq!(decompress_batch(&compress_batch(&plain)).unwrap(), plain);
}

#[test]
fn dump_round_trip() {
    let mut e = evaluator("gridworld", EvaluatorConfig::default());
    let b = e.sample().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    write_batch_dump(&path, &b).unwrap();
    assert_eq!(read_batch_dump(&path).unwrap(), b);
    std::fs::write(&path, b"BHDR").unwrap();
    assert!(read_batch_dump(&path).is_err());
}

#[test]
fn evaluate_leaves_sampling_state_alone() {
    let cfg = EvaluatorConfig {
        batch_steps: 30,
        ..EvaluatorConfig::default()
    };
    let mut a = evaluator("cartpole", cfg.clone());
    let mut b = evaluator("cartpole", cfg);
    a.sample().unwrap();
    b.sample().unwrap();
    let returns = a.evaluate(3, false).unwrap();
    assert_eq!(returns.len(), 3);
    assert_eq!(a.sample().unwrap(), b.sample().unwrap());
}

#[test]
fn actors_sync_weights_once_per_version() {
    let rt = Runtime::new(RuntimeConfig::default());
    let factory = EnvFactory::by_name("cartpole").unwrap();
    let builder: GraphBuilder = Arc::new(|spec, seed| {
        Ok(Box::new(PgGraph::new(spec.obs_dim, &spec.action_space, PgConfig::default(), seed)?) as Box<dyn PolicyGraph>)
    });
    let evals = spawn_evaluators(&rt, 2, &factory, &builder, &EvaluatorConfig::default()).unwrap();
    let w0 = evals[0].invoke("get_weights", |e, _| Ok::<_, String>(e.get_weights())).get().unwrap();
    let w1 = evals[1].invoke("get_weights", |e, _| Ok::<_, String>(e.get_weights())).get().unwrap();
    assert_eq!(w0, w1);
    let new: Vec<f64> = w0.iter().map(|x| x + 0.5).collect();
    let handle = WeightsHandle {
        version: 1,
        weights: rt.put(new.clone()),
    };
    for _ in 0..2 {
        let h = handle.clone();
        evals[0]
            .invoke("sync", move |e, ctx| e.sync_weights(ctx.runtime(), &h))
            .get()
            .unwrap();
    }
    let fetched: u64 = rt.fetched_bytes(evals[0].id()).values().sum();
    assert_eq!(fetched as usize, handle.weights.size_bytes());
    let w = evals[0].invoke("get_weights", |e, _| Ok::<_, String>(e.get_weights())).get().unwrap();
    assert_eq!(w, new);
}
