use proptest::prelude::*;
use rldist_core::batch::{SampleBatch, Transition};
use rldist_core::envs::{make_env, ActionSpace};
use rldist_core::es::{centered_ranks, PerturbationTable, Quadratic};
use rldist_core::policy::postprocessing::{compute_gae, AdvantageConfig};
use rldist_core::policy::{DqnConfig, DqnGraph, PgConfig, PgGraph, PolicyGraph, PpoConfig, PpoGraph};
use rldist_core::replay::ReplayBuffer;
use rldist_core::tensor::{adam_step, argmax, log_softmax, AdamConfig, AdamState};

fn graphs(seed: u64) -> Vec<Box<dyn PolicyGraph>> {
    let space = ActionSpace::Discrete(3);
    let small = vec![5];
    vec![
        Box::new(PgGraph::new(4, &space, PgConfig { hidden: small.clone(), ..Default::default() }, seed).unwrap()),
        Box::new(PpoGraph::new(4, &space, PpoConfig { hidden: small.clone(), ..Default::default() }, seed).unwrap()),
        Box::new(DqnGraph::new(4, &space, DqnConfig { hidden: small, ..Default::default() }, seed).unwrap()),
    ]
}

proptest! {
    #[test]
    fn greedy_action_invariant_to_logit_offset(
        logits in prop::collection::vec(-5.0f64..5.0, 2..8),
        offset in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + offset).collect();
        prop_assert_eq!(argmax(&logits), argmax(&shifted));
        for (a, b) in log_softmax(&logits).iter().zip(log_softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_round_trip(seed in 0u64..1000, scale in -2.0f64..2.0) {
        for mut g in graphs(seed) {
            let w: Vec<f64> = g.get_weights().iter().map(|x| x * scale + 0.25).collect();
            g.set_weights(&w).unwrap();
            prop_assert_eq!(g.get_weights(), w);
        }
    }

    #[test]
    fn lambda_one_gives_discounted_return(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..30),
        values in prop::collection::vec(-1.0f64..1.0, 30),
        gamma in 0.5f64..1.0,
    ) {
        let n = rewards.len();
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let cfg = AdvantageConfig { gamma, lambda: 1.0 };
        let (_, targets) = compute_gae(&rewards, &values[..n], &dones, 0.0, cfg).unwrap();
        let mut ret = 0.0;
        for t in (0..n).rev() {
            ret = rewards[t] + gamma * ret;
            prop_assert!((targets[t] - ret).abs() < 1e-9);
        }
    }

    #[test]
    fn replay_is_bounded_fifo(capacity in 1usize..20, adds in 0usize..60) {
        let mut b = ReplayBuffer::new(capacity);
        for i in 0..adds {
            b.add(i);
            prop_assert!(b.len() <= capacity);
        }
        let kept: Vec<usize> = b.iter_fifo().copied().collect();
        let want: Vec<usize> = (adds.saturating_sub(capacity)..adds).collect();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn replay_probabilities_normalized(prios in prop::collection::vec(0.0f64..10.0, 1..30), alpha in 0.0f64..1.5) {
        let mut b = ReplayBuffer::with_alpha(prios.len(), alpha);
        for (i, p) in prios.iter().enumerate() {
            b.add_with_priority(i, *p);
        }
        let probs = b.probabilities();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(probs.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn centered_ranks_bounded_and_centered(values in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let r = centered_ranks(&values);
        prop_assert!(r.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(r.iter().all(|x| (-0.5..=0.5).contains(x)));
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn antithetic_pair_on_linear_objective_is_exact(
        seed in 0u64..500,
        slope in prop::collection::vec(-3.0f64..3.0, 6),
        sigma in 0.001f64..0.5,
    ) {
        // f(θ) = a·θ ; pair contribution (F⁺−F⁻)ε/2 = σ(a·ε)ε
        let table = PerturbationTable::new(seed, 2, sigma);
        let theta = vec![0.3; 6];
        let f = |x: &[f64]| x.iter().zip(&slope).map(|(a, b)| a * b).sum::<f64>();
        let plus = f(&table.perturb(&theta, 0));
        let minus = f(&table.perturb(&theta, 1));
        let eps = table.direction(0, 6);
        let proj: f64 = slope.iter().zip(&eps).map(|(a, e)| a * e).sum();
        for e in &eps {
            let got = (plus - minus) * e / 2.0;
            prop_assert!((got - sigma * proj * e).abs() < 1e-9 * (1.0 + (proj * e).abs()));
        }
    }

    #[test]
    fn batch_slice_concat_round_trip(len in 1usize..20, cut in 0usize..20) {
        let cut = cut.min(len);
        let mut b = SampleBatch::new(2, 1);
        for i in 0..len {
            let x = i as f64;
            b.push(Transition {
                obs: &[x, -x],
                action: &[(i % 3) as f64],
                reward: x * 0.5,
                done: i % 4 == 3,
                new_obs: &[x + 1.0, -x - 1.0],
                eps_id: (i / 4) as u64,
                agent_id: 0,
                t_index: (i % 4) as u32,
            });
        }
        b.set_column("w", (0..len).map(|i| i as f64).collect()).unwrap();
        let joined = SampleBatch::concat(&[b.slice(0..cut), b.slice(cut..len)]).unwrap();
        prop_assert_eq!(joined, b);
    }

    #[test]
    fn env_reset_is_deterministic(seed in 0u64..10_000, name_idx in 0usize..3) {
        let name = ["gridworld", "cartpole", "pendulum"][name_idx];
        let mut a = make_env(name).unwrap();
        let mut b = make_env(name).unwrap();
        prop_assert_eq!(a.reset(seed), b.reset(seed));
    }
}

#[test]
fn adam_descends_quadratic() {
    let q = Quadratic::random(10, 3);
    let mut theta = vec![0.0; 10];
    let mut state = AdamState::new(10);
    let cfg = AdamConfig::new(0.05);
    let start = -q.value(&theta);
    for _ in 0..300 {
        let grad: Vec<f64> = q.gradient(&theta).iter().map(|g| -g).collect();
        let (next, s) = adam_step(&theta, &grad, &state, &cfg).unwrap();
        theta = next;
        state = s;
    }
    assert!(-q.value(&theta) < 1e-3 * start);
}
