//! Empirical replay sampling frequencies against `p^α` normalization.

use rldist_core::replay::{ReplayBuffer, PRIORITY_EPSILON};
use rldist_core::rng::seeded;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 10_000;

fn profiles() -> Vec<Vec<f64>> {
    vec![
        vec![1.0; 8],
        (1..=8).map(|i| i as f64).collect(),
        vec![0.5, 4.0, 0.5, 4.0, 2.0, 1.0, 3.0, 0.25],
        (0..10).map(|i| 1.5f64.powi(i)).collect(),
        vec![10.0, 0.3, 0.3, 5.0, 0.3, 7.5],
    ]
}

fn chi_square_p(prios: &[f64], alpha: f64, seed: u64) -> f64 {
    let mut b = ReplayBuffer::with_alpha(prios.len(), alpha);
    for (i, p) in prios.iter().enumerate() {
        b.add_with_priority(i, *p);
    }
    let mut counts = vec![0usize; prios.len()];
    for d in b.sample(DRAWS, &mut seeded(seed)).unwrap() {
        counts[d.index] += 1;
    }
    let weights: Vec<f64> = prios.iter().map(|p| (p + PRIORITY_EPSILON).powf(alpha)).collect();
    let total: f64 = weights.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(c, w)| {
            let expected = DRAWS as f64 * w / total;
            (*c as f64 - expected).powi(2) / expected
        })
        .sum();
    let dist = ChiSquared::new((prios.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn frequencies_match_priority_exponent() {
    for alpha in [0.0, 0.6, 1.0] {
        for (k, prios) in profiles().iter().enumerate() {
            let p = chi_square_p(prios, alpha, 100 + k as u64);
            assert!(p > 0.01, "alpha {alpha} profile {k}: p = {p}");
        }
    }
}

#[test]
fn alpha_zero_probabilities_are_uniform() {
    for prios in profiles() {
        let mut b = ReplayBuffer::with_alpha(prios.len(), 0.0);
        for p in &prios {
            b.add_with_priority((), *p);
        }
        let u = 1.0 / prios.len() as f64;
        assert!(b.probabilities().iter().all(|p| (p - u).abs() < 1e-15));
    }
}
