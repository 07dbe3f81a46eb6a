//! Hyperparameter search over trainers hosted in actors: a parallel grid
//! search and a synchronous Population Based Training loop.
//!
//! Trials are driven only through [`Trainable`], so any trainer the config
//! can name runs under tune unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use rand::seq::IndexedRandom;
use rand::Rng;
use rldist_core::rng::{seeded, SeededRng};
use serde_json::Value;
use thiserror::Error;

use crate::algorithms::{spawn_trainer, IterationResult, TrainError, TrainerConfig, TrainerRef, Violation};
use crate::taskrt::{Runtime, RuntimeError};

pub const DEFAULT_EXPLOIT_FRACTION: f64 = 0.25;
pub const DEFAULT_PERTURB_FACTORS: [f64; 2] = [0.8, 1.2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuneError {
    #[error("no trials to run")]
    NoTrials,
    #[error("population of {0} is too small; need at least 4")]
    PopulationTooSmall(usize),
    #[error("trial {trial_id}: {violation}")]
    InvalidTrial { trial_id: String, violation: Violation },
    #[error("trial {trial_id} failed: {message}")]
    TrialFailed { trial_id: String, message: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// A base config plus dotted-key overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub trial_id: String,
    pub base: TrainerConfig,
    pub overrides: BTreeMap<String, Value>,
}

impl TrialSpec {
    pub fn new(trial_id: impl Into<String>, base: TrainerConfig) -> Self {
        Self {
            trial_id: trial_id.into(),
            base,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.overrides.insert(key.to_string(), value.into());
        self
    }

    /// The base config with every override applied. Unknown keys fail here;
    /// range checks happen when the trainer is built.
    pub fn config(&self) -> Result<TrainerConfig, Violation> {
        self.overrides
            .iter()
            .try_fold(self.base.clone(), |cfg, (k, v)| cfg.with_override(k, v.clone()))
    }
}

/// Cartesian product of `axes` over `base`, ids `trial_000`, `trial_001`, ...
/// with the last axis varying fastest.
pub fn grid(base: &TrainerConfig, axes: &[(&str, Vec<Value>)]) -> Vec<TrialSpec> {
    let mut combos: Vec<BTreeMap<String, Value>> = vec![BTreeMap::new()];
    for (key, values) in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert((*key).to_string(), v.clone());
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(i, overrides)| TrialSpec {
            trial_id: format!("trial_{i:03}"),
            base: base.clone(),
            overrides,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial_id: String,
    pub overrides: BTreeMap<String, Value>,
    /// Final `episode_reward_mean`; `None` for failed trials and for trials
    /// that never finished an episode.
    pub final_score: Option<f64>,
    pub iterations: u64,
    pub timesteps_total: u64,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn failed(spec: &TrialSpec, message: String) -> TrialResult {
    TrialResult {
        trial_id: spec.trial_id.clone(),
        overrides: spec.overrides.clone(),
        final_score: None,
        iterations: 0,
        timesteps_total: 0,
        error: Some(message),
    }
}

/// Best first: completed trials by final score descending, ties by trial
/// id; trials without a score after them and failed trials last.
pub fn rank(results: &mut [TrialResult]) {
    results.sort_by(|a, b| {
        let key = |r: &TrialResult| (r.failed(), r.final_score.is_none());
        key(a)
            .cmp(&key(b))
            .then_with(|| {
                let (x, y) = (a.final_score.unwrap_or(0.0), b.final_score.unwrap_or(0.0));
                y.total_cmp(&x)
            })
            .then_with(|| a.trial_id.cmp(&b.trial_id))
    });
}

/// Runs every trial as its own trainer actor for `iterations` iterations,
/// all concurrently, and returns the ranked results. A trial that fails is
/// recorded and the others still run.
pub fn grid_search(rt: &Runtime, specs: &[TrialSpec], iterations: usize) -> Result<Vec<TrialResult>, TuneError> {
    if specs.is_empty() {
        return Err(TuneError::NoTrials);
    }
    let mut ids = BTreeSet::new();
    for s in specs {
        if !ids.insert(&s.trial_id) {
            return Err(TuneError::InvalidTrial {
                trial_id: s.trial_id.clone(),
                violation: Violation::new("trial_id", "duplicate trial id"),
            });
        }
    }
    let launched: Vec<Result<(TrainerRef, _), String>> = specs
        .iter()
        .map(|spec| {
            let cfg = spec.config().map_err(|v| v.to_string())?;
            let violations = cfg.validate();
            if !violations.is_empty() {
                return Err(TrainError::Config(violations).to_string());
            }
            let trial = spawn_trainer(rt, cfg).map_err(|e| e.to_string())?;
            let run = trial.invoke("run", move |t, _| -> Result<Option<IterationResult>, TrainError> {
                let mut last = None;
                for _ in 0..iterations {
                    last = Some(t.trainer.train()?);
                }
                Ok(last)
            });
            Ok((trial, run))
        })
        .collect();
    let mut results: Vec<TrialResult> = specs
        .iter()
        .zip(launched)
        .map(|(spec, l)| match l {
            Err(e) => failed(spec, e),
            Ok((trial, run)) => {
                let out = match run.get() {
                    Err(e) => failed(spec, e.to_string()),
                    Ok(last) => TrialResult {
                        trial_id: spec.trial_id.clone(),
                        overrides: spec.overrides.clone(),
                        final_score: last.as_ref().and_then(|r| r.episode_reward_mean),
                        iterations: last.as_ref().map_or(0, |r| r.iter),
                        timesteps_total: last.as_ref().map_or(0, |r| r.timesteps_total),
                        error: None,
                    },
                };
                trial.terminate();
                out
            }
        })
        .collect();
    rank(&mut results);
    Ok(results)
}

/// Writes `trial_id, final_score, status`, then one column per override key
/// (sorted), one row per result in the given order.
pub fn write_results_csv<W: io::Write>(out: W, results: &[TrialResult]) -> csv::Result<()> {
    let keys: BTreeSet<&String> = results.iter().flat_map(|r| r.overrides.keys()).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trial_id".to_string(), "final_score".into(), "status".into()];
    header.extend(keys.iter().map(|k| k.to_string()));
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![
            r.trial_id.clone(),
            r.final_score.map(|s| s.to_string()).unwrap_or_default(),
            match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            },
        ];
        row.extend(keys.iter().map(|k| match r.overrides.get(*k) {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
        }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbtTrial {
    pub trial_id: String,
    pub score: f64,
    pub weights: Vec<f64>,
    pub hyperparameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub trials: Vec<PbtTrial>,
    pub generation: u64,
}

impl PopulationState {
    pub fn best(&self) -> Option<&PbtTrial> {
        self.trials.iter().max_by(|a, b| a.score.total_cmp(&b.score))
    }
}

/// One exploit/explore copy: `target` took `source`'s weights and its
/// hyperparameters times `factors`.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploit {
    pub target: usize,
    pub source: usize,
    pub factors: BTreeMap<String, f64>,
}

/// Trials ordered best first, ties by position.
fn ranking(trials: &[PbtTrial]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..trials.len()).collect();
    idx.sort_by(|&a, &b| trials[b].score.total_cmp(&trials[a].score).then(a.cmp(&b)));
    idx
}

/// The bottom `exploit_fraction` of trials (at least one) copy weights and
/// hyperparameters from a uniformly chosen trial in the top fraction, then
/// every copied hyperparameter is multiplied by a factor drawn uniformly
/// from `perturb_factors`. A copied trial inherits its source's score.
pub fn pbt_step(
    pop: &PopulationState,
    exploit_fraction: f64,
    perturb_factors: &[f64],
    rng: &mut SeededRng,
) -> Result<(PopulationState, Vec<Exploit>), TuneError> {
    let n = pop.trials.len();
    if n < 4 {
        return Err(TuneError::PopulationTooSmall(n));
    }
    let k = ((n as f64 * exploit_fraction).floor() as usize).clamp(1, n / 2);
    let order = ranking(&pop.trials);
    let (top, bottom) = (&order[..k], &order[n - k..]);
    let mut next = pop.clone();
    next.generation += 1;
    let mut exploits = Vec::with_capacity(k);
    for &target in bottom {
        let source = *top.choose(rng).expect("top is non-empty");
        let src = &pop.trials[source];
        let factors: BTreeMap<String, f64> = src
            .hyperparameters
            .keys()
            .map(|name| {
                let f = if perturb_factors.is_empty() {
                    1.0
                } else {
                    perturb_factors[rng.random_range(0..perturb_factors.len())]
                };
                (name.clone(), f)
            })
            .collect();
        let t = &mut next.trials[target];
        t.weights = src.weights.clone();
        t.score = src.score;
        t.hyperparameters = src
            .hyperparameters
            .iter()
            .map(|(name, v)| (name.clone(), v * factors[name]))
            .collect();
        exploits.push(Exploit { target, source, factors });
    }
    Ok((next, exploits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbtConfig {
    pub exploit_fraction: f64,
    pub perturb_factors: Vec<f64>,
    /// Train iterations each trial runs between exploit steps.
    pub iterations_per_generation: usize,
    /// Greedy evaluation episodes used as the score; 0 scores by the last
    /// `episode_reward_mean`.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            exploit_fraction: DEFAULT_EXPLOIT_FRACTION,
            perturb_factors: DEFAULT_PERTURB_FACTORS.to_vec(),
            iterations_per_generation: 2,
            eval_episodes: 0,
            seed: 0,
        }
    }
}

/// An exploit as applied to the trainer actors.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedExploit {
    pub target: String,
    pub source: String,
    pub hyperparameters: BTreeMap<String, f64>,
    /// The target reported exactly the source's weights and the perturbed
    /// hyperparameters after the copy.
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub generation: u64,
    pub scores: Vec<f64>,
    pub best: f64,
    pub exploits: Vec<AppliedExploit>,
}

/// Synchronous PBT over trainer actors.
pub struct Pbt {
    trial_ids: Vec<String>,
    trials: Vec<TrainerRef>,
    cfg: PbtConfig,
    rng: SeededRng,
    generation: u64,
}

impl std::fmt::Debug for Pbt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pbt")
            .field("trial_ids", &self.trial_ids)
            .field("generation", &self.generation)
            .finish()
    }
}

#[derive(Clone)]
struct Snapshot {
    score: f64,
    weights: Vec<f64>,
    hyperparameters: BTreeMap<String, f64>,
}

impl Pbt {
    pub fn new(rt: &Runtime, specs: &[TrialSpec], cfg: PbtConfig) -> Result<Self, TuneError> {
        if specs.len() < 4 {
            return Err(TuneError::PopulationTooSmall(specs.len()));
        }
        let mut trials = Vec::with_capacity(specs.len());
        for s in specs {
            let c = s.config().map_err(|violation| TuneError::InvalidTrial {
                trial_id: s.trial_id.clone(),
                violation,
            })?;
            trials.push(spawn_trainer(rt, c)?);
        }
        Ok(Self {
            trial_ids: specs.iter().map(|s| s.trial_id.clone()).collect(),
            trials,
            rng: seeded(cfg.seed),
            cfg,
            generation: 0,
        })
    }

    pub fn trials(&self) -> &[TrainerRef] {
        &self.trials
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn fail(&self, i: usize, e: impl ToString) -> TuneError {
        TuneError::TrialFailed {
            trial_id: self.trial_ids[i].clone(),
            message: e.to_string(),
        }
    }

    /// Trains every trial for one generation in parallel, scores them and
    /// applies one [`pbt_step`].
    pub fn run_generation(&mut self) -> Result<GenerationReport, TuneError> {
        let (iters, episodes) = (self.cfg.iterations_per_generation, self.cfg.eval_episodes);
        let futures: Vec<_> = self
            .trials
            .iter()
            .map(|t| {
                t.invoke("generation", move |a, _| -> Result<Snapshot, TrainError> {
                    let t = &mut a.trainer;
                    let mut last = None;
                    for _ in 0..iters {
                        last = Some(t.train()?);
                    }
                    let score = if episodes > 0 {
                        t.evaluate(episodes)?
                    } else {
                        last.and_then(|r| r.episode_reward_mean)
                            .or(t.progress().reward_mean)
                            .unwrap_or(f64::NEG_INFINITY)
                    };
                    Ok(Snapshot {
                        score,
                        weights: t.get_weights(),
                        hyperparameters: t.hyperparameters(),
                    })
                })
            })
            .collect();
        let mut state = PopulationState {
            trials: Vec::with_capacity(self.trials.len()),
            generation: self.generation,
        };
        for (i, f) in futures.into_iter().enumerate() {
            let s = f.get().map_err(|e| self.fail(i, e))?;
            state.trials.push(PbtTrial {
                trial_id: self.trial_ids[i].clone(),
                score: s.score,
                weights: s.weights,
                hyperparameters: s.hyperparameters,
            });
        }
        let scores: Vec<f64> = state.trials.iter().map(|t| t.score).collect();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (next, exploits) = pbt_step(
            &state,
            self.cfg.exploit_fraction,
            &self.cfg.perturb_factors,
            &mut self.rng,
        )?;
        let mut applied = Vec::with_capacity(exploits.len());
        for e in exploits {
            let target = &next.trials[e.target];
            let (w, hp) = (target.weights.clone(), target.hyperparameters.clone());
            let verified = self.trials[e.target]
                .invoke("exploit", move |a, _| -> Result<bool, TrainError> {
                    let t = &mut a.trainer;
                    t.set_weights(&w)?;
                    for (name, v) in &hp {
                        t.set_hyperparameter(name, *v)?;
                    }
                    Ok(t.get_weights() == w && t.hyperparameters() == hp)
                })
                .get()
                .map_err(|err| self.fail(e.target, err))?;
            applied.push(AppliedExploit {
                target: self.trial_ids[e.target].clone(),
                source: self.trial_ids[e.source].clone(),
                hyperparameters: target.hyperparameters.clone(),
                verified,
            });
        }
        self.generation = next.generation;
        Ok(GenerationReport {
            generation: self.generation,
            scores,
            best,
            exploits: applied,
        })
    }

    /// Stops every trial actor and its evaluators.
    pub fn shutdown(&self) {
        self.trials.iter().for_each(|t| t.terminate());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(scores: &[f64]) -> PopulationState {
        PopulationState {
            trials: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| PbtTrial {
                    trial_id: format!("t{i}"),
                    score: s,
                    weights: vec![i as f64],
                    hyperparameters: BTreeMap::from([("lr".to_string(), 0.1 * (i + 1) as f64)]),
                })
                .collect(),
            generation: 0,
        }
    }

    #[test]
    fn worst_copies_from_best() {
        let pop = state(&[1.0, 2.0, 3.0, 4.0]);
        let (next, ex) = pbt_step(&pop, 0.25, &DEFAULT_PERTURB_FACTORS, &mut seeded(5)).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!((ex[0].target, ex[0].source), (0, 3));
        assert_eq!(next.trials[0].weights, vec![3.0]);
        let ratio = next.trials[0].hyperparameters["lr"] / pop.trials[3].hyperparameters["lr"];
        assert!((ratio - 0.8).abs() < 1e-12 || (ratio - 1.2).abs() < 1e-12, "{ratio}");
        assert_eq!(next.trials[1..], pop.trials[1..]);
        assert_eq!(next.generation, 1);
    }

    #[test]
    fn both_factors_get_drawn() {
        let pop = state(&[1.0, 2.0, 3.0, 4.0]);
        let mut rng = seeded(0);
        let seen: BTreeSet<u64> = (0..64)
            .map(|_| pbt_step(&pop, 0.25, &[0.8, 1.2], &mut rng).unwrap().1[0].factors["lr"].to_bits())
            .collect();
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn small_population_rejected() {
        assert_eq!(
            pbt_step(&state(&[1.0, 2.0, 3.0]), 0.25, &[1.0], &mut seeded(0)),
            Err(TuneError::PopulationTooSmall(3))
        );
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let r = |id: &str, s: Option<f64>, err: bool| TrialResult {
            trial_id: id.into(),
            overrides: BTreeMap::new(),
            final_score: s,
            iterations: 1,
            timesteps_total: 1,
            error: err.then(|| "boom".to_string()),
        };
        let mut v = vec![
            r("d", None, true),
            r("c", Some(1.0), false),
            r("b", Some(2.0), false),
            r("a", Some(1.0), false),
            r("e", None, false),
        ];
        rank(&mut v);
        let ids: Vec<_> = v.iter().map(|r| r.trial_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c", "e", "d"]);
    }
}
