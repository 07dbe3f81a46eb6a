//! Analytic gradients of every loss against central finite differences.

use rand::Rng;
use rand_distr::StandardNormal;
use rldist_core::batch::{columns, SampleBatch, Transition};
use rldist_core::envs::ActionSpace;
use rldist_core::policy::{DqnConfig, DqnGraph, PgConfig, PgGraph, PolicyGraph, PpoConfig, PpoGraph};
use rldist_core::rng::{derive, seeded, SeededRng};
use rldist_core::tensor::{finite_diff_grad, max_relative_error, Matrix, MlpParams};

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Denominator floor so entries that are analytically ~0 compare absolutely.
const FLOOR: f64 = 1e-5;

fn normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

/// A short random rollout of `graph`: three episodes, the last truncated.
fn rollout(graph: &mut dyn PolicyGraph, seed: u64) -> SampleBatch {
    let mut rng = seeded(seed);
    let obs_dim = graph.obs_dim();
    let mut batch = SampleBatch::new(obs_dim, 1);
    let mut aux_cols: Vec<(String, Vec<f64>)> = graph
        .aux_output_names()
        .iter()
        .map(|n| (n.to_string(), Vec::new()))
        .collect();
    let mut act_rng = [derive(seed, 99)];
    for (eps, len) in [5usize, 3, 4].into_iter().enumerate() {
        let mut obs: Vec<f64> = (0..obs_dim).map(|_| normal(&mut rng)).collect();
        for t in 0..len {
            let m = Matrix::from_vec(1, obs_dim, obs.clone()).unwrap();
            let out = graph.act(&m, &mut act_rng, true).unwrap();
            for (name, col) in aux_cols.iter_mut() {
                col.push(out.aux[name.as_str()][0]);
            }
            let mut a = Vec::new();
            out.actions[0].write_row(&mut a);
            let next: Vec<f64> = (0..obs_dim).map(|_| normal(&mut rng)).collect();
            batch.push(Transition {
                obs: &obs,
                action: &a,
                reward: normal(&mut rng),
                done: t + 1 == len && eps < 2,
                new_obs: &next,
                eps_id: eps as u64,
                agent_id: 0,
                t_index: t as u32,
            });
            obs = next;
        }
    }
    for (name, col) in aux_cols {
        batch.set_column(&name, col).unwrap();
    }
    graph.postprocess(batch, &[]).unwrap()
}

fn check_graph(graph: &mut dyn PolicyGraph, batch: &SampleBatch) -> f64 {
    let w0 = graph.get_weights();
    let analytic = graph.gradients(batch).unwrap().grads;
    assert_eq!(analytic.len(), w0.len());
    let mut probe = graph.clone_graph();
    let numeric = finite_diff_grad(
        |w| {
            probe.set_weights(w).unwrap();
            probe.gradients(batch).unwrap().loss
        },
        &w0,
        FD_STEP,
    );
    max_relative_error(&analytic, &numeric, FLOOR)
}

#[test]
fn mlp_backward_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = seeded(seed);
        let net = MlpParams::new(&[3, 5, 4, 2], &mut rng);
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| normal(&mut rng)).collect()).unwrap();
        let up = Matrix::from_vec(4, 2, (0..8).map(|_| normal(&mut rng)).collect()).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &up).unwrap().flatten();
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |w| {
                probe.load_flat(w).unwrap();
                let y = probe.predict(&x).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            &net.flatten(),
            FD_STEP,
        );
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn pg_gradients_match_finite_differences() {
    for seed in 0..10 {
        let cfg = PgConfig {
            hidden: vec![6],
            entropy_coeff: if seed % 2 == 0 { 0.0 } else { 0.01 },
            ..PgConfig::default()
        };
        let mut g = PgGraph::new(3, &ActionSpace::Discrete(3), cfg, seed).unwrap();
        let b = rollout(&mut g, seed);
        let err = check_graph(&mut g, &b);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn ppo_gradients_match_finite_differences() {
    for seed in 0..10 {
        let cfg = PpoConfig {
            hidden: vec![6],
            entropy_coeff: if seed % 2 == 0 { 0.0 } else { 0.01 },
            ..PpoConfig::default()
        };
        let mut g = PpoGraph::new(3, &ActionSpace::Discrete(3), cfg, seed).unwrap();
        let b = rollout(&mut g, seed);
        // move the weights so ratios differ from 1 and some rows clip
        let mut rng = derive(seed, 7);
        let w: Vec<f64> = g.get_weights().iter().map(|x| x + 0.3 * normal(&mut rng)).collect();
        g.set_weights(&w).unwrap();
        let err = check_graph(&mut g, &b);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err}");
    }
}

#[test]
fn dqn_gradients_match_finite_differences() {
    for seed in 0..10 {
        let cfg = DqnConfig {
            hidden: vec![6],
            n_step: 1 + (seed as usize % 3),
            ..DqnConfig::default()
        };
        let mut g = DqnGraph::new(3, &ActionSpace::Discrete(3), cfg, seed).unwrap();
        let b = rollout(&mut g, seed);
        let mut rng = derive(seed, 7);
        let w: Vec<f64> = g.get_weights().iter().map(|x| x + 0.3 * normal(&mut rng)).collect();
        g.set_weights(&w).unwrap();
        assert!(b.column(columns::DISCOUNT).is_ok());
        let err = check_graph(&mut g, &b);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err}");
    }
}
