//! Config-driven experiment runs: data generation, a scripted stream through
//! the engine, accuracy tables, checkpoints, the retrain oracle and buffer
//! size sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, HyperParams, TaskRequest};
use crate::eval::{self, AccuracyMatrix, EvalError, TradeoffFit};
use crate::losses::{ObjectiveMode, Ulabel};
use crate::model::{NetConfig, TriNet};
use crate::streams::{self, DataConfig, StreamError, StreamScript, TaskSpec, Verb};

/// Environment variable that relocates the output directory.
pub const OUTPUT_DIR_ENV: &str = "UNICLUN_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Network shape. Input width and class count come from `[data]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Fixed initialization seed; derived from the run seed when absent.
    pub init_seed: Option<u64>,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { hidden_dims: vec![32], embed_dim: 16, init_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub capacities: Vec<usize>,
    /// Number of seeds per capacity: `seed, seed+1, ...`.
    pub seeds: usize,
    /// Parallel runs; 0 means one per available core.
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { capacities: vec![50, 200, 1000], seeds: 5, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub buffer_capacity: usize,
    /// Stream script path, relative to the config file.
    pub stream: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Defaults for everything except the stream path.
    pub fn with_stream(stream: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            buffer_capacity: 200,
            stream: stream.into(),
            output_dir: default_output_dir(),
            net: NetSection::default(),
            hyper: HyperParams::default(),
            data: DataConfig::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves the stream path and a relative
    /// output directory against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.stream.is_relative() {
            cfg.stream = base.join(&cfg.stream);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if !cfg.stream.is_file() {
            return Err(ExperimentError::Config(format!("stream script {} does not exist", cfg.stream.display())));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_capacity == 0 {
            return Err(ExperimentError::Config("buffer_capacity must be positive".into()));
        }
        self.data.validate()?;
        streams::task_distribution(self.data.total_classes, self.data.classes_per_task)?;
        self.hyper.validate()?;
        self.net_config().validate().map_err(EngineError::from)?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_dim: self.data.input_dim,
            hidden_dims: self.net.hidden_dims.clone(),
            num_classes: self.data.total_classes,
            embed_dim: self.net.embed_dim,
            init_seed: self.net.init_seed.unwrap_or_else(|| derived_rng(self.seed, 3).next_u64()),
        }
    }

    pub fn read_script(&self) -> Result<StreamScript> {
        let text = fs::read_to_string(&self.stream).map_err(io_err(&self.stream))?;
        Ok(streams::parse_script(&text)?)
    }
}

/// Independent generator for one purpose of a run.
fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train/test data for every task of the configured split.
pub fn prepare_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    let skeletons = streams::task_distribution(cfg.data.total_classes, cfg.data.classes_per_task)?;
    Ok(streams::make_gaussian_tasks(&skeletons, &cfg.data, &mut derived_rng(cfg.seed, 1))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub index: usize,
    pub label: String,
    pub retained_classes: Vec<usize>,
    pub forgotten_classes: Vec<usize>,
    pub retain_mean: Option<f64>,
    pub forget_mean: Option<f64>,
    pub buffer_len: usize,
    pub buffer_histogram: BTreeMap<usize, usize>,
    pub purged: usize,
    pub steps: usize,
    pub teacher_updates: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub buffer_capacity: usize,
    pub objective_mode: ObjectiveMode,
    pub script: Vec<String>,
    pub requests: Vec<RequestSummary>,
    pub final_retain_mean: Option<f64>,
    pub final_forget_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub summary: RunSummary,
    /// Checkpoint text after each request.
    pub checkpoints: Vec<String>,
    pub engine: Engine,
}

/// Feeds `script` through a fresh engine, evaluating the teacher after every
/// request. Classes never learned report 0.
pub fn run_stream(cfg: &ExperimentConfig, script: &StreamScript) -> Result<RunOutcome> {
    cfg.validate()?;
    let tasks = prepare_tasks(cfg)?;
    let by_id: BTreeMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    script.check_tasks(&by_id.keys().map(|k| k.to_string()).collect())?;
    let test: Vec<_> = tasks.iter().flat_map(|t| t.test.iter().cloned()).collect();

    let engine_seed = derived_rng(cfg.seed, 2).next_u64();
    let mut engine = Engine::new(cfg.net_config(), cfg.hyper.clone(), cfg.buffer_capacity, engine_seed)?;
    let mut matrix = AccuracyMatrix::new(cfg.data.total_classes);
    let mut requests = Vec::with_capacity(script.len());
    let mut checkpoints = Vec::with_capacity(script.len());

    for step in &script.steps {
        let task = by_id[step.task_id.as_str()];
        let req = TaskRequest {
            task_id: task.task_id.clone(),
            data: task.train.clone(),
            ulabel: match step.verb {
                Verb::Learn => Ulabel::Learn,
                Verb::Unlearn => Ulabel::Unlearn,
            },
            classes: task.classes.iter().copied().collect(),
        };
        let record = engine.process_request(&req)?.clone();

        let masked =
            if cfg.hyper.mask_forgotten_at_eval { engine.forgotten_classes().clone() } else { BTreeSet::new() };
        let mut acc = eval::per_class_accuracy(engine.teacher(), &test, &masked)?;
        for (c, cell) in acc.iter_mut().enumerate() {
            if !engine.learned_classes().contains(&c) {
                *cell = Some(0.0);
            }
        }
        let retained = engine.retained_classes();
        let forgotten = engine.forgotten_classes().clone();
        requests.push(RequestSummary {
            index: record.index,
            label: step.label(),
            retain_mean: eval::mean_over(&acc, &retained),
            forget_mean: eval::mean_over(&acc, &forgotten),
            retained_classes: retained.into_iter().collect(),
            forgotten_classes: forgotten.into_iter().collect(),
            buffer_len: engine.buffer().len(),
            buffer_histogram: engine.buffer().class_histogram(),
            purged: record.purged,
            steps: record.steps,
            teacher_updates: record.teacher_updates,
            epoch_losses: record.epoch_losses,
        });
        matrix.record_row(step.label(), acc)?;
        checkpoints.push(engine.checkpoint_text());
    }

    let summary = RunSummary {
        seed: cfg.seed,
        buffer_capacity: cfg.buffer_capacity,
        objective_mode: cfg.hyper.objective_mode,
        script: script.step_labels(),
        final_retain_mean: requests.last().and_then(|r| r.retain_mean),
        final_forget_mean: requests.last().and_then(|r| r.forget_mean),
        requests,
    };
    Ok(RunOutcome { matrix, summary, checkpoints, engine })
}

/// Same run with every LEARN of an eventually unlearned task deleted.
pub fn run_oracle(cfg: &ExperimentConfig, script: &StreamScript) -> Result<RunOutcome> {
    run_stream(cfg, &script.without_unlearned())
}

/// Teacher of [`run_oracle`]: the model that never saw the forgotten tasks.
pub fn retrain_oracle(cfg: &ExperimentConfig, script: &StreamScript) -> Result<TriNet> {
    Ok(run_oracle(cfg, script)?.engine.teacher().clone())
}

/// `matrix.csv`, `summary.json` and `checkpoints/request_NNN.ckpt`.
pub fn write_run_outputs(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let write = |path: PathBuf, text: &str| fs::write(&path, text).map_err(io_err(&path));
    write(dir.join("matrix.csv"), &outcome.matrix.to_csv())?;
    write(dir.join("summary.json"), &(serde_json::to_string_pretty(&outcome.summary)? + "\n"))?;
    for (i, text) in outcome.checkpoints.iter().enumerate() {
        write(ckpt_dir.join(format!("request_{:03}.ckpt", i + 1)), text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub capacity: usize,
    pub seed: u64,
    pub retain_mean: f64,
    pub forget_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub capacity: usize,
    pub measured: f64,
    pub fitted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub points: Vec<SweepPoint>,
    pub fit: TradeoffFit,
}

impl SweepOutcome {
    /// `capacity,measured,fitted` table.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("capacity,measured,fitted\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.capacity, p.measured, p.fitted));
        }
        s
    }
}

/// Per-capacity mean of the final retained-class accuracy over seeds.
pub fn aggregate_runs(runs: &[SweepRun]) -> Vec<(usize, f64)> {
    let mut by_cap: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in runs {
        by_cap.entry(r.capacity).or_default().push(r.retain_mean);
    }
    by_cap.into_iter().map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64)).collect()
}

/// Runs every capacity × seed combination on up to `workers` threads, then
/// fits the trade-off model to the per-capacity means. When `out_dir` is set
/// each run's outputs land in `runs/cap<N>_seed<S>/` beneath it.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    script: &StreamScript,
    capacities: &[usize],
    seeds: &[u64],
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    let distinct: BTreeSet<usize> = capacities.iter().copied().collect();
    if distinct.len() < 3 {
        return Err(ExperimentError::Config(format!(
            "a sweep needs at least 3 distinct capacities, got {}",
            distinct.len()
        )));
    }
    if seeds.is_empty() {
        return Err(ExperimentError::Config("a sweep needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = distinct.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(capacity, seed)| {
                let run_cfg = ExperimentConfig { buffer_capacity: capacity, seed, ..cfg.clone() };
                let outcome = run_stream(&run_cfg, script)?;
                if let Some(dir) = out_dir {
                    write_run_outputs(&dir.join("runs").join(format!("cap{capacity}_seed{seed}")), &outcome)?;
                }
                Ok(SweepRun {
                    capacity,
                    seed,
                    retain_mean: outcome.summary.final_retain_mean.unwrap_or(0.0),
                    forget_mean: outcome.summary.final_forget_mean,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let means = aggregate_runs(&runs);
    let fit = eval::fit_tradeoff(&means.iter().map(|&(c, m)| (c as f64, m)).collect::<Vec<_>>())?;
    let points = means
        .into_iter()
        .map(|(capacity, measured)| SweepPoint {
            capacity,
            measured,
            fitted: eval::total_performance(capacity as f64, &fit.model),
        })
        .collect();
    Ok(SweepOutcome { runs, points, fit })
}

/// `sweep.csv`, `fit.json`, and a dense `tradeoff_series.csv` of the fitted curve.
pub fn write_sweep_outputs(dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |path: PathBuf, text: &str| fs::write(&path, text).map_err(io_err(&path));
    write(dir.join("sweep.csv"), &outcome.series_csv())?;
    write(dir.join("fit.json"), &(serde_json::to_string_pretty(outcome)? + "\n"))?;
    let n_max = outcome.points.iter().map(|p| p.capacity).max().unwrap_or(1) as f64;
    write(dir.join("tradeoff_series.csv"), &eval::tradeoff_series(&outcome.fit.model, 1.0, n_max, 200))?;
    Ok(())
}

/// Output directory after the environment override.
pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone())
}
