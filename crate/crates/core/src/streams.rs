//! Synthetic class-incremental tasks and learn/unlearn stream scripts.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::Sample;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("{classes_per_task} classes per task does not divide {total_classes} classes")]
    NotDivisor { total_classes: usize, classes_per_task: usize },
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("line {line}: {kind}")]
    Script { line: usize, kind: ScriptErrorKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptErrorKind {
    UnknownVerb(String),
    MissingTaskId,
    TrailingTokens,
    UnknownTask(String),
    UnlearnBeforeLearn(String),
    RepeatedUnlearn(String),
}

impl fmt::Display for ScriptErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptErrorKind::UnknownVerb(v) => write!(f, "unknown verb '{v}' (expected LEARN or UNLEARN)"),
            ScriptErrorKind::MissingTaskId => write!(f, "missing task id"),
            ScriptErrorKind::TrailingTokens => write!(f, "unexpected tokens after task id"),
            ScriptErrorKind::UnknownTask(t) => write!(f, "unknown task id '{t}'"),
            ScriptErrorKind::UnlearnBeforeLearn(t) => write!(f, "UNLEARN {t} before any LEARN {t}"),
            ScriptErrorKind::RepeatedUnlearn(t) => write!(f, "task {t} is already unlearned"),
        }
    }
}

/// Task id and its class block, before data is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSkeleton {
    pub task_id: String,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `total_classes / classes_per_task` tasks named `T1, T2, ...` over
/// consecutive class blocks.
pub fn task_distribution(total_classes: usize, classes_per_task: usize) -> Result<Vec<TaskSkeleton>, StreamError> {
    if classes_per_task == 0 || total_classes == 0 || !total_classes.is_multiple_of(classes_per_task) {
        return Err(StreamError::NotDivisor { total_classes, classes_per_task });
    }
    Ok((0..total_classes / classes_per_task)
        .map(|t| TaskSkeleton {
            task_id: format!("T{}", t + 1),
            classes: (t * classes_per_task..(t + 1) * classes_per_task).collect(),
        })
        .collect())
}

/// Gaussian-blob data parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub total_classes: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Input dimension, 2 to 8. Class means sit on a circle in the first two
    /// coordinates; the rest are pure noise.
    pub input_dim: usize,
    /// Standard deviation as a fraction of the smallest distance between
    /// two class means.
    pub spread: f64,
    /// Radius of the circle of class means.
    pub radius: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            total_classes: 10,
            classes_per_task: 2,
            samples_per_class: 200,
            test_per_class: 100,
            input_dim: 2,
            spread: 0.1,
            radius: 2.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        let err = |m: String| Err(StreamError::Config(m));
        if !(2..=8).contains(&self.input_dim) {
            return err(format!("input_dim must be in 2..=8, got {}", self.input_dim));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return err(format!("spread must be > 0, got {}", self.spread));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return err(format!("radius must be > 0, got {}", self.radius));
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return err("samples_per_class and test_per_class must be positive".into());
        }
        if self.total_classes < 2 {
            return err("need at least 2 classes".into());
        }
        Ok(())
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let angle = 2.0 * PI * class as f64 / self.total_classes as f64;
        let mut m = vec![0.0; self.input_dim];
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }

    /// Smallest distance between two class means (neighbours on the circle).
    pub fn min_mean_distance(&self) -> f64 {
        2.0 * self.radius * (PI / self.total_classes as f64).sin()
    }

    pub fn sigma(&self) -> f64 {
        self.spread * self.min_mean_distance()
    }
}

/// Draws balanced train and test sets for every task.
pub fn make_gaussian_tasks<R: Rng + ?Sized>(
    skeletons: &[TaskSkeleton],
    cfg: &DataConfig,
    rng: &mut R,
) -> Result<Vec<TaskSpec>, StreamError> {
    cfg.validate()?;
    if let Some(c) = skeletons.iter().flat_map(|s| &s.classes).find(|&&c| c >= cfg.total_classes) {
        return Err(StreamError::Config(format!("class {c} exceeds total_classes {}", cfg.total_classes)));
    }
    let noise = Normal::new(0.0, cfg.sigma()).map_err(|e| StreamError::Config(e.to_string()))?;
    let draw = |class: usize, n: usize, rng: &mut R| -> Vec<Sample> {
        let mean = cfg.class_mean(class);
        (0..n).map(|_| Sample::new(mean.iter().map(|m| m + noise.sample(rng)).collect(), class)).collect()
    };
    let mut tasks = Vec::with_capacity(skeletons.len());
    for sk in skeletons {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &sk.classes {
            train.extend(draw(c, cfg.samples_per_class, rng));
            test.extend(draw(c, cfg.test_per_class, rng));
        }
        tasks.push(TaskSpec { task_id: sk.task_id.clone(), classes: sk.classes.clone(), train, test });
    }
    Ok(tasks)
}

/// Writes samples as `class,x1,x2,...` records.
pub fn export_samples(samples: &[Sample]) -> String {
    let mut s = String::new();
    for x in samples {
        s.push_str(&x.to_record());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    Learn,
    Unlearn,
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verb::Learn => "LEARN",
            Verb::Unlearn => "UNLEARN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub verb: Verb,
    pub task_id: String,
}

impl ScriptStep {
    /// Table-style row label, e.g. `Learn T1`.
    pub fn label(&self) -> String {
        match self.verb {
            Verb::Learn => format!("Learn {}", self.task_id),
            Verb::Unlearn => format!("Unlearn {}", self.task_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StreamScript {
    pub steps: Vec<ScriptStep>,
}

impl StreamScript {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn render(&self) -> String {
        self.steps.iter().map(|s| format!("{} {}\n", s.verb, s.task_id)).collect()
    }

    pub fn step_labels(&self) -> Vec<String> {
        self.steps.iter().map(ScriptStep::label).collect()
    }

    /// Task ids that get unlearned somewhere in the script.
    pub fn unlearned_tasks(&self) -> BTreeSet<String> {
        self.steps.iter().filter(|s| s.verb == Verb::Unlearn).map(|s| s.task_id.clone()).collect()
    }

    /// The same stream with every unlearned task removed entirely.
    pub fn without_unlearned(&self) -> StreamScript {
        let gone = self.unlearned_tasks();
        StreamScript { steps: self.steps.iter().filter(|s| !gone.contains(&s.task_id)).cloned().collect() }
    }

    pub fn check_tasks(&self, known: &BTreeSet<String>) -> Result<(), StreamError> {
        for (i, s) in self.steps.iter().enumerate() {
            if !known.contains(&s.task_id) {
                return Err(StreamError::Script { line: i + 1, kind: ScriptErrorKind::UnknownTask(s.task_id.clone()) });
            }
        }
        Ok(())
    }
}

/// Parses `LEARN <id>` / `UNLEARN <id>` lines; `#` starts a comment. Every
/// UNLEARN must follow a LEARN of the same task, and a task is unlearned at
/// most once.
pub fn parse_script(text: &str) -> Result<StreamScript, StreamError> {
    parse_inner(text, None)
}

/// As [`parse_script`], also rejecting ids outside `known`.
pub fn parse_script_for(text: &str, known: &BTreeSet<String>) -> Result<StreamScript, StreamError> {
    parse_inner(text, Some(known))
}

fn parse_inner(text: &str, known: Option<&BTreeSet<String>>) -> Result<StreamScript, StreamError> {
    let mut steps = Vec::new();
    let mut learned = BTreeSet::new();
    let mut unlearned = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| StreamError::Script { line, kind };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let verb = match tokens.next().expect("nonempty") {
            "LEARN" => Verb::Learn,
            "UNLEARN" => Verb::Unlearn,
            other => return Err(err(ScriptErrorKind::UnknownVerb(other.to_string()))),
        };
        let id = tokens.next().ok_or_else(|| err(ScriptErrorKind::MissingTaskId))?.to_string();
        if tokens.next().is_some() {
            return Err(err(ScriptErrorKind::TrailingTokens));
        }
        if known.is_some_and(|k| !k.contains(&id)) {
            return Err(err(ScriptErrorKind::UnknownTask(id)));
        }
        match verb {
            Verb::Learn => {
                learned.insert(id.clone());
            }
            Verb::Unlearn => {
                if unlearned.contains(&id) {
                    return Err(err(ScriptErrorKind::RepeatedUnlearn(id)));
                }
                if !learned.contains(&id) {
                    return Err(err(ScriptErrorKind::UnlearnBeforeLearn(id)));
                }
                learned.remove(&id);
                unlearned.insert(id.clone());
            }
        }
        steps.push(ScriptStep { verb, task_id: id });
    }
    Ok(StreamScript { steps })
}
