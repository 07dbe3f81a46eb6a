//! GAE and n-step targets against direct double-loop definitions.

use rand::Rng;
use rldist_core::policy::postprocessing::{compute_gae, n_step_returns, AdvantageConfig};
use rldist_core::rng::seeded;

struct Trajectory {
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    bootstrap: f64,
    next_values: Vec<f64>,
}

/// Random trajectory; about a third end with `done`, and interior dones
/// appear so resets mid-batch are exercised.
fn trajectory(seed: u64) -> Trajectory {
    let mut rng = seeded(seed);
    let len = rng.random_range(1..40);
    let mut dones: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < 0.1).collect();
    if seed % 3 == 0 {
        dones[len - 1] = true;
    }
    Trajectory {
        rewards: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
        values: (0..len).map(|_| rng.random_range(-3.0..3.0)).collect(),
        dones,
        bootstrap: rng.random_range(-3.0..3.0),
        next_values: (0..len).map(|_| rng.random_range(-3.0..3.0)).collect(),
    }
}

fn brute_gae(tr: &Trajectory, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = tr.rewards.len();
    let value_after = |k: usize| if k + 1 < n { tr.values[k + 1] } else { tr.bootstrap };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..n {
                let cont = if tr.dones[k] { 0.0 } else { 1.0 };
                let delta = tr.rewards[k] + gamma * value_after(k) * cont - tr.values[k];
                total += (gamma * lambda).powi((k - t) as i32) * delta;
                if tr.dones[k] {
                    break;
                }
            }
            total
        })
        .collect()
}

fn brute_n_step(tr: &Trajectory, n: usize, gamma: f64) -> Vec<f64> {
    let len = tr.rewards.len();
    (0..len)
        .map(|t| {
            let mut total = 0.0;
            let mut k = 0;
            loop {
                let i = t + k;
                total += gamma.powi(k as i32) * tr.rewards[i];
                if tr.dones[i] {
                    return total;
                }
                if k + 1 == n || i + 1 == len {
                    return total + gamma.powi(k as i32 + 1) * tr.next_values[i];
                }
                k += 1;
            }
        })
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], seed: u64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= 1e-12, "seed {seed} row {i}: {x} vs {y}");
    }
}

#[test]
fn gae_matches_double_loop() {
    for seed in 0..100 {
        let tr = trajectory(seed);
        for (gamma, lambda) in [(0.995, 0.95), (0.9, 0.0), (0.99, 1.0)] {
            let cfg = AdvantageConfig { gamma, lambda };
            let (adv, targets) = compute_gae(&tr.rewards, &tr.values, &tr.dones, tr.bootstrap, cfg).unwrap();
            assert_close(&adv, &brute_gae(&tr, gamma, lambda), seed);
            let want: Vec<f64> = adv.iter().zip(&tr.values).map(|(a, v)| a + v).collect();
            assert_close(&targets, &want, seed);
        }
    }
}

#[test]
fn n_step_matches_double_loop() {
    for seed in 0..100 {
        let tr = trajectory(seed);
        for n in [1, 3, 50] {
            let got = n_step_returns(&tr.rewards, &tr.dones, &tr.next_values, n, 0.97).unwrap();
            assert_close(&got, &brute_n_step(&tr, n, 0.97), seed);
        }
    }
}
