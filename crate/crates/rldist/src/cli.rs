//! Config-driven experiment runner behind the `rldist` binary.
//!
//! `rldist validate --config exp.toml` checks a config without running it.
//! `rldist run --config exp.toml` trains (or tunes) until a stop condition,
//! appending one JSON record per iteration to `metrics.jsonl` and writing
//! `checkpoint.bin` at the end. Exit codes: 0 success, 2 invalid config,
//! 3 runtime failure.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::algorithms::config::{
    parse_toml, EvaluatorSection, GraphSection, OptimizerSection, PopulationSection,
};
use crate::algorithms::{build_trainer, IterationResult, Trainable, TrainerConfig, Violation};
use crate::taskrt::{Runtime, RuntimeConfig};
use crate::tune::{self, Pbt, PbtConfig, TrialSpec, DEFAULT_EXPLOIT_FRACTION, DEFAULT_PERTURB_FACTORS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TUNE_RESULTS_FILE: &str = "tune_results.csv";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Tune,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopSection {
    /// Stop once `episode_reward_mean` reaches this value.
    pub episode_reward_mean: Option<f64>,
    /// Stop once `timesteps_total` reaches this budget.
    pub timesteps_total: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbtSection {
    pub generations: u64,
    pub iterations_per_generation: usize,
    pub exploit_fraction: f64,
    pub perturb_factors: Vec<f64>,
    pub eval_episodes: usize,
}

impl Default for PbtSection {
    fn default() -> Self {
        Self {
            generations: 5,
            iterations_per_generation: 2,
            exploit_fraction: DEFAULT_EXPLOIT_FRACTION,
            perturb_factors: DEFAULT_PERTURB_FACTORS.to_vec(),
            eval_episodes: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    /// Dotted config key to the values it takes; trials are the product.
    pub grid: BTreeMap<String, Vec<Value>>,
    /// Runs PBT over the grid's trials instead of a plain grid search.
    pub pbt: Option<PbtSection>,
}

/// The experiment file as written: the trainer config's keys at top level
/// plus the run controls.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    #[serde(default)]
    mode: Mode,
    algorithm: String,
    env: String,
    #[serde(default = "default_evaluators")]
    num_evaluators: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    evaluator: EvaluatorSection,
    #[serde(default)]
    optimizer: OptimizerSection,
    #[serde(default)]
    graph: GraphSection,
    #[serde(default)]
    population: PopulationSection,
    max_iterations: Option<u64>,
    #[serde(default)]
    stop: StopSection,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    tune: TuneSection,
}

fn default_evaluators() -> usize {
    TrainerConfig::new("pg", "gridworld").num_evaluators
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub trainer: TrainerConfig,
    pub max_iterations: Option<u64>,
    pub stop: StopSection,
    pub output_dir: Option<PathBuf>,
    pub tune: TuneSection,
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self, Vec<Violation>> {
        let f: ExperimentFile = parse_toml(src)?;
        Ok(Self {
            mode: f.mode,
            trainer: TrainerConfig {
                algorithm: f.algorithm,
                env: f.env,
                num_evaluators: f.num_evaluators,
                seed: f.seed,
                evaluator: f.evaluator,
                optimizer: f.optimizer,
                graph: f.graph,
                population: f.population,
            },
            max_iterations: f.max_iterations,
            stop: f.stop,
            output_dir: f.output_dir,
            tune: f.tune,
        })
    }

    pub fn load(path: &Path) -> Result<Self, Vec<Violation>> {
        let src = fs::read_to_string(path)
            .map_err(|e| vec![Violation::new("<file>", format!("{}: {e}", path.display()))])?;
        Self::from_toml(&src)
    }

    /// Every schema and range problem, without running anything.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = self.trainer.validate();
        let stops = [self.stop.episode_reward_mean.is_some(), self.stop.timesteps_total.is_some()]
            .iter()
            .filter(|s| **s)
            .count();
        if self.max_iterations == Some(0) {
            v.push(Violation::new("max_iterations", "must be at least 1"));
        }
        let scheduled = self.mode == Mode::Tune && self.tune.pbt.is_some();
        if self.max_iterations.is_none() && stops != 1 && !scheduled {
            v.push(Violation::new(
                "stop",
                "set max_iterations, or exactly one of stop.episode_reward_mean and stop.timesteps_total",
            ));
        }
        if self.stop.episode_reward_mean.is_some_and(|r| !r.is_finite()) {
            v.push(Violation::new("stop.episode_reward_mean", "must be finite"));
        }
        if self.stop.timesteps_total == Some(0) {
            v.push(Violation::new("stop.timesteps_total", "must be at least 1"));
        }
        match self.mode {
            Mode::Train => {
                if !self.tune.grid.is_empty() || self.tune.pbt.is_some() {
                    v.push(Violation::new("tune", "only used with mode = \"tune\""));
                }
            }
            Mode::Tune => v.extend(self.validate_tune()),
        }
        v
    }

    fn validate_tune(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.tune.pbt.is_none() && self.max_iterations.is_none() {
            v.push(Violation::new("max_iterations", "grid search needs max_iterations"));
        }
        for (key, values) in &self.tune.grid {
            let k = format!("tune.grid.{key}");
            if values.is_empty() {
                v.push(Violation::new(&k, "needs at least one value"));
            }
            for value in values {
                match self.trainer.with_override(key, value.clone()) {
                    Err(e) => v.push(Violation::new(&k, e.message)),
                    Ok(cfg) => v.extend(
                        cfg.validate()
                            .into_iter()
                            .map(|e| Violation::new(&k, format!("{value}: {}", e))),
                    ),
                }
            }
        }
        if let Some(p) = &self.tune.pbt {
            let n = self.trial_specs().len();
            if n < 4 {
                v.push(Violation::new("tune.grid", format!("pbt needs at least 4 trials, grid has {n}")));
            }
            if p.generations == 0 {
                v.push(Violation::new("tune.pbt.generations", "must be at least 1"));
            }
            if p.iterations_per_generation == 0 {
                v.push(Violation::new("tune.pbt.iterations_per_generation", "must be at least 1"));
            }
            if !(p.exploit_fraction > 0.0 && p.exploit_fraction <= 0.5) {
                v.push(Violation::new("tune.pbt.exploit_fraction", "must lie in (0, 0.5]"));
            }
            if p.perturb_factors.is_empty() || p.perturb_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
                v.push(Violation::new("tune.pbt.perturb_factors", "must be a non-empty list of positive factors"));
            }
        }
        v
    }

    pub fn trial_specs(&self) -> Vec<TrialSpec> {
        let axes: Vec<(&str, Vec<Value>)> = self.tune.grid.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        tune::grid(&self.trainer, &axes)
    }

    fn should_stop(&self, r: &IterationResult) -> bool {
        self.max_iterations.is_some_and(|m| r.iter >= m)
            || self
                .stop
                .episode_reward_mean
                .is_some_and(|t| r.episode_reward_mean.is_some_and(|m| m >= t))
            || self.stop.timesteps_total.is_some_and(|t| r.timesteps_total >= t)
    }
}

#[derive(Debug, Parser)]
#[command(name = "rldist", version, about = "Distributed RL training from a config file")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a config and list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train or tune until a stop condition.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// Number of evaluators.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also write the metrics as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug)]
pub enum RunError {
    Invalid(Vec<Violation>),
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => EXIT_INVALID,
            RunError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Invalid(v) => {
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "invalid config: {x}")?;
                }
                Ok(())
            }
            RunError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

fn runtime_err(e: impl std::fmt::Display) -> RunError {
    RunError::Runtime(e.to_string())
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub records: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

/// Config file plus command-line overrides.
pub fn resolve_experiment(args: &RunArgs) -> Result<ExperimentConfig, RunError> {
    let mut exp = ExperimentConfig::load(&args.config).map_err(RunError::Invalid)?;
    if let Some(s) = args.seed {
        exp.trainer.seed = s;
    }
    if let Some(m) = args.max_iters {
        exp.max_iterations = Some(m);
    }
    if let Some(w) = args.workers {
        exp.trainer.num_evaluators = w;
    }
    if let Some(d) = &args.out_dir {
        exp.output_dir = Some(d.clone());
    }
    let v = exp.validate();
    if !v.is_empty() {
        return Err(RunError::Invalid(v));
    }
    Ok(exp)
}

/// Appends one JSON object per line, flushing each so the file stays
/// readable if the run dies.
struct JsonLines {
    out: BufWriter<File>,
    rows: Vec<BTreeMap<String, Value>>,
    records: u64,
}

impl JsonLines {
    fn create(path: &Path) -> io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            rows: Vec::new(),
            records: 0,
        })
    }

    fn append<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        let v = serde_json::to_value(record).map_err(io::Error::other)?;
        serde_json::to_writer(&mut self.out, &v).map_err(io::Error::other)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        let mut row = BTreeMap::new();
        flatten("", &v, &mut row);
        self.rows.push(row);
        self.records += 1;
        Ok(())
    }

    /// The same records as CSV with dotted column names, columns the union
    /// of every record's fields.
    fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let cols: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.keys()).collect();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(cols.iter().map(|c| c.as_str()))?;
        for r in &self.rows {
            w.write_record(cols.iter().map(|c| r.get(*c).map(cell).unwrap_or_default()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs a validated experiment, writing its outputs under the output
/// directory (default `runs/<algorithm>-<env>-<seed>`).
pub fn run_experiment(exp: &ExperimentConfig, csv: Option<&Path>) -> Result<RunSummary, RunError> {
    let out_dir = exp.output_dir.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-{}", exp.trainer.algorithm, exp.trainer.env, exp.trainer.seed))
    });
    fs::create_dir_all(&out_dir).map_err(|e| runtime_err(format!("{}: {e}", out_dir.display())))?;
    let mut metrics = JsonLines::create(&out_dir.join(METRICS_FILE)).map_err(runtime_err)?;
    let rt = Runtime::new(RuntimeConfig::default().with_env_override());
    let result = match exp.mode {
        Mode::Train => train(&rt, exp, &out_dir, &mut metrics),
        Mode::Tune if exp.tune.pbt.is_some() => run_pbt(&rt, exp, &out_dir, &mut metrics),
        Mode::Tune => run_grid(&rt, exp, &out_dir, &mut metrics),
    };
    rt.shutdown();
    if let Some(path) = csv {
        metrics.write_csv(path).map_err(runtime_err)?;
    }
    Ok(RunSummary {
        records: metrics.records,
        out_dir,
        checkpoint: result?,
    })
}

fn train(rt: &Runtime, exp: &ExperimentConfig, out_dir: &Path, metrics: &mut JsonLines) -> Result<Option<PathBuf>, RunError> {
    let mut trainer = build_trainer(rt, &exp.trainer).map_err(runtime_err)?;
    loop {
        let r = trainer.train().map_err(runtime_err)?;
        metrics.append(&r).map_err(runtime_err)?;
        if exp.should_stop(&r) {
            break;
        }
    }
    save_checkpoint(trainer.as_ref(), out_dir).map(Some)
}

fn save_checkpoint(t: &dyn Trainable, out_dir: &Path) -> Result<PathBuf, RunError> {
    let path = out_dir.join(CHECKPOINT_FILE);
    t.checkpoint().and_then(|c| c.save(&path)).map_err(runtime_err)?;
    Ok(path)
}

#[derive(Serialize)]
struct TrialRecord<'a> {
    trial_id: &'a str,
    final_score: Option<f64>,
    iterations: u64,
    timesteps_total: u64,
    error: Option<&'a str>,
    overrides: &'a BTreeMap<String, Value>,
}

fn run_grid(rt: &Runtime, exp: &ExperimentConfig, out_dir: &Path, metrics: &mut JsonLines) -> Result<Option<PathBuf>, RunError> {
    let iterations = exp.max_iterations.expect("validated") as usize;
    let results = tune::grid_search(rt, &exp.trial_specs(), iterations).map_err(runtime_err)?;
    for r in &results {
        metrics
            .append(&TrialRecord {
                trial_id: &r.trial_id,
                final_score: r.final_score,
                iterations: r.iterations,
                timesteps_total: r.timesteps_total,
                error: r.error.as_deref(),
                overrides: &r.overrides,
            })
            .map_err(runtime_err)?;
    }
    let file = File::create(out_dir.join(TUNE_RESULTS_FILE)).map_err(runtime_err)?;
    tune::write_results_csv(file, &results).map_err(runtime_err)?;
    if results.iter().all(|r| r.failed()) {
        return Err(RunError::Runtime("every trial failed".into()));
    }
    Ok(None)
}

#[derive(Serialize)]
struct GenerationRecord {
    generation: u64,
    best: f64,
    scores: BTreeMap<String, f64>,
    exploits: Vec<ExploitRecord>,
}

#[derive(Serialize)]
struct ExploitRecord {
    target: String,
    source: String,
    hyperparameters: BTreeMap<String, f64>,
    verified: bool,
}

fn run_pbt(rt: &Runtime, exp: &ExperimentConfig, out_dir: &Path, metrics: &mut JsonLines) -> Result<Option<PathBuf>, RunError> {
    let p = exp.tune.pbt.clone().expect("checked by caller");
    let specs = exp.trial_specs();
    let mut pbt = Pbt::new(
        rt,
        &specs,
        PbtConfig {
            exploit_fraction: p.exploit_fraction,
            perturb_factors: p.perturb_factors.clone(),
            iterations_per_generation: p.iterations_per_generation,
            eval_episodes: p.eval_episodes,
            seed: exp.trainer.seed,
        },
    )
    .map_err(runtime_err)?;
    let mut last_scores = Vec::new();
    for _ in 0..p.generations {
        let g = pbt.run_generation().map_err(runtime_err)?;
        metrics
            .append(&GenerationRecord {
                generation: g.generation,
                best: g.best,
                scores: specs.iter().map(|s| s.trial_id.clone()).zip(g.scores.iter().copied()).collect(),
                exploits: g
                    .exploits
                    .into_iter()
                    .map(|e| ExploitRecord {
                        target: e.target,
                        source: e.source,
                        hyperparameters: e.hyperparameters,
                        verified: e.verified,
                    })
                    .collect(),
            })
            .map_err(runtime_err)?;
        last_scores = g.scores;
    }
    // checkpoint the best trial of the final generation
    let best = (0..last_scores.len())
        .max_by(|&a, &b| last_scores[a].total_cmp(&last_scores[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    let path = out_dir.join(CHECKPOINT_FILE);
    let target = path.clone();
    pbt.trials()[best]
        .invoke("checkpoint", move |a, _| a.trainer.checkpoint().and_then(|c| c.save(&target)))
        .get()
        .map_err(runtime_err)?;
    pbt.shutdown();
    Ok(Some(path))
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Messages go to stdout and stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Validate { config } => {
            let v = match ExperimentConfig::load(&config) {
                Ok(exp) => exp.validate(),
                Err(v) => v,
            };
            if v.is_empty() {
                println!("{}: ok", config.display());
                EXIT_OK
            } else {
                for x in &v {
                    eprintln!("{x}");
                }
                EXIT_INVALID
            }
        }
        Command::Run(args) => {
            let outcome = resolve_experiment(&args).and_then(|exp| run_experiment(&exp, args.csv.as_deref()));
            match outcome {
                Ok(s) => {
                    println!("{} records written to {}", s.records, s.out_dir.join(METRICS_FILE).display());
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("{e}");
                    e.exit_code()
                }
            }
        }
    }
}
