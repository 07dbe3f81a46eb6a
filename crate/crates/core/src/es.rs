//! Evolution-strategies building blocks: antithetic perturbation tables,
//! centered-rank fitness shaping and the search-gradient estimate.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{mix, seeded};
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsConfig {
    pub noise_stddev: f64,
    /// Must be even; perturbations come in ± pairs.
    pub num_perturbations: usize,
    pub adam: AdamConfig,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            noise_stddev: 0.02,
            num_perturbations: 200,
            adam: AdamConfig::evolution_strategies(),
        }
    }
}

/// Standard-normal noise vector regenerated from `seed`.
pub fn noise(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Perturbation `i` is `sign_i · noise(seeds[i / 2])` with `sign = +1` for
/// even `i` and `−1` for odd `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTable {
    pub noise_stddev: f64,
    pub seeds: Vec<u64>,
}

impl PerturbationTable {
    /// `num_perturbations / 2` seeds drawn deterministically from `seed`.
    pub fn new(seed: u64, num_perturbations: usize, noise_stddev: f64) -> Self {
        assert!(num_perturbations % 2 == 0, "perturbation count must be even");
        assert!(noise_stddev > 0.0, "noise stddev must be positive");
        let seeds = (0..num_perturbations / 2).map(|k| mix(seed, k as u64)).collect();
        Self { noise_stddev, seeds }
    }

    pub fn len(&self) -> usize {
        2 * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn sign(i: usize) -> f64 {
        if i % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// `ε_i`
    pub fn direction(&self, i: usize, dim: usize) -> Vec<f64> {
        let s = Self::sign(i);
        noise(self.seeds[i / 2], dim).into_iter().map(|e| s * e).collect()
    }

    /// `θ + σ·ε_i`
    pub fn perturb(&self, theta: &[f64], i: usize) -> Vec<f64> {
        theta
            .iter()
            .zip(self.direction(i, theta.len()))
            .map(|(t, e)| t + self.noise_stddev * e)
            .collect()
    }

    /// `g = (1/(nσ)) Σ_i F_i ε_i`, regenerating each pair's noise once.
    pub fn gradient(&self, fitness: &[f64], dim: usize) -> Vec<f64> {
        assert_eq!(fitness.len(), self.len(), "one fitness value per perturbation");
        let mut g = vec![0.0; dim];
        for (k, &seed) in self.seeds.iter().enumerate() {
            let w = fitness[2 * k] - fitness[2 * k + 1];
            for (gi, e) in g.iter_mut().zip(noise(seed, dim)) {
                *gi += w * e;
            }
        }
        let scale = 1.0 / (self.len() as f64 * self.noise_stddev);
        g.iter_mut().for_each(|x| *x *= scale);
        g
    }
}

/// Ranks mapped linearly onto `[−0.5, 0.5]`; ties are broken by position so
/// the output always sums to zero.
pub fn centered_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank as f64 / (n - 1) as f64 - 0.5;
    }
    out
}

/// `f(θ) = −‖θ − θ*‖²`, a maximization target with a known gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub optimum: Vec<f64>,
}

impl Quadratic {
    /// Optimum drawn from `U[−0.5, 0.5]^dim`.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self {
            optimum: (0..dim).map(|_| rng.random::<f64>() - 0.5).collect(),
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        -theta
            .iter()
            .zip(&self.optimum)
            .map(|(t, o)| (t - o) * (t - o))
            .sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.optimum).map(|(t, o)| -2.0 * (t - o)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_sum_to_zero_within_bounds() {
        let r = centered_ranks(&[3.0, -1.0, 3.0, 10.0, 0.5]);
        assert!(r.iter().sum::<f64>().abs() < 1e-15);
        assert!(r.iter().all(|x| (-0.5..=0.5).contains(x)));
        assert_eq!(r[3], 0.5);
        assert_eq!(r[1], -0.5);
        assert_eq!(centered_ranks(&[7.0]), vec![0.0]);
    }

    #[test]
    fn antithetic_directions_are_negations() {
        let t = PerturbationTable::new(3, 4, 0.02);
        let a = t.direction(2, 5);
        let b = t.direction(3, 5);
        assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn gradient_matches_explicit_sum() {
        let t = PerturbationTable::new(11, 6, 0.1);
        let f = [1.0, -2.0, 0.5, 0.25, 3.0, 1.0];
        let g = t.gradient(&f, 4);
        let mut want = vec![0.0; 4];
        for (i, fi) in f.iter().enumerate() {
            for (w, e) in want.iter_mut().zip(t.direction(i, 4)) {
                *w += fi * e / (6.0 * 0.1);
            }
        }
        for (x, y) in g.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic]
    fn odd_count_rejected() {
        PerturbationTable::new(0, 3, 0.02);
    }
}
