//! Request-driven training loop: student updates, Bernoulli-gated momentum
//! teacher, bad teacher for unlearning, and replay buffer maintenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, ReplayBuffer, Sample};
use crate::losses::{self, Components, LossError, LossWeights, ObjectiveMode, Ulabel};
use crate::model::{ModelError, NetConfig, TriNet};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss during request {request}")]
    Divergence { request: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<TensorError> for EngineError {
    fn from(e: TensorError) -> Self {
        EngineError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// When the teacher absorbs the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumSchedule {
    #[default]
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub weights: LossWeights,
    /// Momentum coefficient `m` of the teacher update.
    pub momentum: f64,
    /// Probability that a teacher update takes the student's parameters.
    pub bernoulli_p: f64,
    pub learning_rate: f64,
    /// Multiplier on every buffer-derived loss term.
    pub er_weight: f64,
    pub batch_size: usize,
    pub buffer_batch_size: usize,
    pub epochs_per_task: usize,
    pub objective_mode: ObjectiveMode,
    pub momentum_schedule: MomentumSchedule,
    /// Exclude forgotten classes from the argmax at evaluation time.
    pub mask_forgotten_at_eval: bool,
    /// Reset the buffer's seen-count on purge.
    pub reset_seen_on_purge: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            momentum: 0.9,
            bernoulli_p: 0.2,
            learning_rate: 0.1,
            er_weight: 1.0,
            batch_size: 32,
            buffer_batch_size: 32,
            epochs_per_task: 60,
            objective_mode: ObjectiveMode::PaperEq11,
            momentum_schedule: MomentumSchedule::PerStep,
            mask_forgotten_at_eval: false,
            reset_seen_on_purge: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.momentum) {
            return Err(EngineError::Hyper(format!("momentum must be in [0, 1], got {}", self.momentum)));
        }
        if !unit(self.bernoulli_p) {
            return Err(EngineError::Hyper(format!("bernoulli_p must be in [0, 1], got {}", self.bernoulli_p)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EngineError::Hyper(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.er_weight >= 0.0 && self.er_weight.is_finite()) {
            return Err(EngineError::Hyper(format!("er_weight must be >= 0, got {}", self.er_weight)));
        }
        if self.batch_size == 0 || self.buffer_batch_size == 0 || self.epochs_per_task == 0 {
            return Err(EngineError::Hyper("batch sizes and epochs_per_task must be positive".into()));
        }
        Ok(())
    }
}

/// One stream element.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest {
    pub task_id: String,
    pub data: Vec<Sample>,
    pub ulabel: Ulabel,
    pub classes: BTreeSet<usize>,
}

/// What happened while processing one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    /// 1-based position in the stream.
    pub index: usize,
    pub task_id: String,
    pub ulabel: Ulabel,
    pub classes: Vec<usize>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Momentum updates whose Bernoulli draw was 1.
    pub teacher_updates: usize,
    pub purged: usize,
    /// Initialization seed of the bad teacher (unlearn requests only).
    pub bad_teacher_seed: Option<u64>,
}

impl RequestRecord {
    pub fn log_line(&self) -> String {
        let verb = match self.ulabel {
            Ulabel::Learn => "LEARN",
            Ulabel::Unlearn => "UNLEARN",
        };
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        format!("{} {} {} classes={} steps={}", self.index, verb, self.task_id, classes.join(","), self.steps)
    }
}

/// One Bernoulli(p) draw.
pub fn sample_bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    // `random_bool` panics outside [0, 1]; callers validate p
    rng.random_bool(p.clamp(0.0, 1.0))
}

/// `θ_T ← m·θ_T + (1−m)·[(1−X)·θ_T + X·θ_s]` for every parameter of all
/// three components.
pub fn momentum_update(teacher: &mut TriNet, student: &TriNet, m: f64, x: bool) -> Result<()> {
    if !teacher.config().same_architecture(student.config()) {
        return Err(EngineError::Contract("teacher and student architectures differ".into()));
    }
    // with X = 0 the bracket is θ_T itself, so the teacher stays put exactly
    if !x {
        return Ok(());
    }
    for (t, s) in teacher.params_mut().into_iter().zip(student.params()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Freshly initialized network with the student's architecture.
pub fn spawn_bad_teacher(config: &NetConfig, seed: u64) -> Result<TriNet> {
    let cfg = NetConfig { init_seed: seed, ..config.clone() };
    Ok(TriNet::init(&cfg)?)
}

fn batch_tensor(samples: &[&Sample]) -> Result<Tensor> {
    Ok(Tensor::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>())?)
}

#[derive(Debug, Clone)]
pub struct Engine {
    net_config: NetConfig,
    student: TriNet,
    teacher: TriNet,
    bad_teacher: Option<TriNet>,
    buffer: ReplayBuffer,
    hyper: HyperParams,
    rng: ChaCha8Rng,
    request_log: Vec<RequestRecord>,
    active: BTreeMap<String, BTreeSet<usize>>,
    learned_classes: BTreeSet<usize>,
    forgotten_classes: BTreeSet<usize>,
}

impl Engine {
    /// Student and teacher start from the same initialization.
    pub fn new(net_config: NetConfig, hyper: HyperParams, buffer_capacity: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let student = TriNet::init(&net_config)?;
        let teacher = student.clone();
        let buffer = ReplayBuffer::new(buffer_capacity)?.with_reset_seen_on_purge(hyper.reset_seen_on_purge);
        Ok(Self {
            net_config,
            student,
            teacher,
            bad_teacher: None,
            buffer,
            hyper,
            rng: ChaCha8Rng::seed_from_u64(seed),
            request_log: Vec::new(),
            active: BTreeMap::new(),
            learned_classes: BTreeSet::new(),
            forgotten_classes: BTreeSet::new(),
        })
    }

    pub fn student(&self) -> &TriNet {
        &self.student
    }

    pub fn teacher(&self) -> &TriNet {
        &self.teacher
    }

    pub fn bad_teacher(&self) -> Option<&TriNet> {
        self.bad_teacher.as_ref()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net_config
    }

    pub fn request_log(&self) -> &[RequestRecord] {
        &self.request_log
    }

    /// Classes of every task that was ever learned.
    pub fn learned_classes(&self) -> &BTreeSet<usize> {
        &self.learned_classes
    }

    /// Classes of unlearned tasks that were not learned again since.
    pub fn forgotten_classes(&self) -> &BTreeSet<usize> {
        &self.forgotten_classes
    }

    /// Classes of tasks currently learned.
    pub fn retained_classes(&self) -> BTreeSet<usize> {
        self.active.values().flatten().copied().collect()
    }

    pub fn is_learned(&self, task_id: &str) -> bool {
        self.active.contains_key(task_id)
    }

    /// Mutable access for tests and custom drivers.
    pub fn student_mut(&mut self) -> &mut TriNet {
        &mut self.student
    }

    pub fn teacher_mut(&mut self) -> &mut TriNet {
        &mut self.teacher
    }

    pub fn set_bad_teacher(&mut self, bad: Option<TriNet>) {
        self.bad_teacher = bad;
    }

    pub fn buffer_mut(&mut self) -> &mut ReplayBuffer {
        &mut self.buffer
    }

    fn check_finite(&self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(EngineError::Divergence { request: self.request_log.len() + 1 })
        }
    }

    /// Runs one request to completion and returns its record.
    pub fn process_request(&mut self, req: &TaskRequest) -> Result<&RequestRecord> {
        if req.data.is_empty() {
            return Err(EngineError::Request(format!("task {} has no data", req.task_id)));
        }
        if let Some(s) = req.data.iter().find(|s| !req.classes.contains(&s.y)) {
            return Err(EngineError::Request(format!(
                "task {} contains class {} outside its class set",
                req.task_id, s.y
            )));
        }
        let record = match req.ulabel {
            Ulabel::Learn => self.run_learn(req)?,
            Ulabel::Unlearn => {
                if !self.is_learned(&req.task_id) {
                    return Err(EngineError::Request(format!("cannot unlearn {}: it was never learned", req.task_id)));
                }
                let seed = self.rng.next_u64();
                self.bad_teacher = Some(spawn_bad_teacher(&self.net_config, seed)?);
                let out = self.run_unlearn(req);
                self.bad_teacher = None;
                RequestRecord { bad_teacher_seed: Some(seed), ..out? }
            }
        };
        self.request_log.push(record);
        Ok(self.request_log.last().expect("just pushed"))
    }

    fn buffer_batch(&mut self) -> Vec<Sample> {
        let mut batch = self.buffer.sample_batch(self.hyper.buffer_batch_size, &mut self.rng);
        batch.retain(|s| !self.forgotten_classes.contains(&s.y));
        batch
    }

    fn maybe_momentum(&mut self) -> Result<bool> {
        let x = sample_bernoulli(self.hyper.bernoulli_p, &mut self.rng);
        momentum_update(&mut self.teacher, &self.student, self.hyper.momentum, x)?;
        Ok(x)
    }

    fn run_learn(&mut self, req: &TaskRequest) -> Result<RequestRecord> {
        // a task learned again is no longer forgotten
        for c in &req.classes {
            self.forgotten_classes.remove(c);
        }
        let mut order: Vec<usize> = (0..req.data.len()).collect();
        let mut record = self.new_record(req);
        for epoch in 0..self.hyper.epochs_per_task {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.hyper.batch_size) {
                let task_batch: Vec<Sample> = chunk.iter().map(|&i| req.data[i].clone()).collect();
                let buffer_batch = self.buffer_batch();
                let loss = self.learn_step(&task_batch, &buffer_batch)?;
                total += loss;
                batches += 1;
                record.steps += 1;
                if epoch == 0 {
                    for s in task_batch {
                        self.buffer.insert(s, &mut self.rng);
                    }
                }
                if self.hyper.momentum_schedule == MomentumSchedule::PerStep && self.maybe_momentum()? {
                    record.teacher_updates += 1;
                }
            }
            if self.hyper.momentum_schedule == MomentumSchedule::PerEpoch && self.maybe_momentum()? {
                record.teacher_updates += 1;
            }
            record.epoch_losses.push(total / batches as f64);
        }
        self.active.insert(req.task_id.clone(), req.classes.clone());
        self.learned_classes.extend(req.classes.iter().copied());
        Ok(record)
    }

    fn run_unlearn(&mut self, req: &TaskRequest) -> Result<RequestRecord> {
        self.active.remove(&req.task_id);
        self.forgotten_classes.extend(req.classes.iter().copied());
        let mut record = self.new_record(req);
        record.purged = self.buffer.purge_classes(&req.classes);
        let mut order: Vec<usize> = (0..req.data.len()).collect();
        for _ in 0..self.hyper.epochs_per_task {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.hyper.batch_size) {
                let forget_batch: Vec<Sample> = chunk.iter().map(|&i| req.data[i].clone()).collect();
                let buffer_batch = self.buffer_batch();
                total += self.unlearn_step(&forget_batch, &buffer_batch)?;
                batches += 1;
                record.steps += 1;
                if self.hyper.momentum_schedule == MomentumSchedule::PerStep && self.maybe_momentum()? {
                    record.teacher_updates += 1;
                }
            }
            if self.hyper.momentum_schedule == MomentumSchedule::PerEpoch && self.maybe_momentum()? {
                record.teacher_updates += 1;
            }
            record.epoch_losses.push(total / batches as f64);
        }
        Ok(record)
    }

    fn new_record(&self, req: &TaskRequest) -> RequestRecord {
        RequestRecord {
            index: self.request_log.len() + 1,
            task_id: req.task_id.clone(),
            ulabel: req.ulabel,
            classes: req.classes.iter().copied().collect(),
            epoch_losses: Vec::new(),
            steps: 0,
            teacher_updates: 0,
            purged: 0,
            bad_teacher_seed: None,
        }
    }

    /// Buffer distillation terms (scaled by the ER weight) on rows
    /// `start..` of the student's features and logits.
    fn buffer_terms(
        &self,
        tape: &mut Tape,
        vars: &crate::model::NetVars,
        feats: crate::tensor::Var,
        logits: crate::tensor::Var,
        start: usize,
        buffer_batch: &[Sample],
        comps: &mut Components,
    ) -> Result<()> {
        if buffer_batch.is_empty() {
            return Ok(());
        }
        let end = start + buffer_batch.len();
        let rows: Vec<&Sample> = buffer_batch.iter().collect();
        let labels: Vec<usize> = buffer_batch.iter().map(|s| s.y).collect();
        let (t_logits, t_z) = self.teacher.classify_and_project(&batch_tensor(&rows)?)?;
        let s_logits = tape.slice_rows(logits, start, end)?;
        let s_feats = tape.slice_rows(feats, start, end)?;
        let s_z = vars.project_features(tape, s_feats)?;
        let w = &self.hyper.weights;
        let er = self.hyper.er_weight;
        let od = losses::online_distillation(tape, &t_logits, s_logits, &labels, w.rho)?;
        let cd = losses::contrastive_distillation(tape, s_z, &t_z, &labels, w.tau)?;
        let scd = losses::supervised_contrastive(tape, s_z, &labels, w.tau)?;
        comps.od = Some(tape.scale(od, er));
        comps.cd = Some(tape.scale(cd, er));
        comps.scd = Some(tape.scale(scd, er));
        Ok(())
    }

    /// One gradient step on the learning objective. Returns the loss before
    /// the step.
    pub fn learn_step(&mut self, task_batch: &[Sample], buffer_batch: &[Sample]) -> Result<f64> {
        if task_batch.is_empty() {
            return Err(EngineError::Contract("learn_step needs a nonempty task batch".into()));
        }
        let n_task = task_batch.len();
        let rows: Vec<&Sample> = task_batch.iter().chain(buffer_batch).collect();
        let labels: Vec<usize> = rows.iter().map(|s| s.y).collect();
        let mut tape = Tape::new();
        let vars = self.student.bind(&mut tape);
        let x = tape.leaf(batch_tensor(&rows)?);
        let feats = vars.features(&mut tape, x)?;
        let logits = vars.classify_features(&mut tape, feats)?;

        let mode = self.hyper.objective_mode;
        let ce = match mode {
            ObjectiveMode::PaperEq11 => losses::cross_entropy(&mut tape, logits, &labels)?,
            ObjectiveMode::Algorithm1 => {
                let task_logits = tape.slice_rows(logits, 0, n_task)?;
                losses::cross_entropy(&mut tape, task_logits, &labels[..n_task])?
            }
        };
        let mut comps = Components { ce: Some(ce), ..Default::default() };
        self.buffer_terms(&mut tape, &vars, feats, logits, n_task, buffer_batch, &mut comps)?;
        let loss = losses::combined_objective(&mut tape, mode, Ulabel::Learn, &comps, &self.hyper.weights)?;
        self.finish_step(tape, vars, loss)
    }

    /// One gradient step on the unlearning objective; needs a bad teacher.
    pub fn unlearn_step(&mut self, forget_batch: &[Sample], buffer_batch: &[Sample]) -> Result<f64> {
        let bad = self
            .bad_teacher
            .as_ref()
            .ok_or_else(|| EngineError::Contract("unlearn_step called without a bad teacher".into()))?;
        if forget_batch.is_empty() {
            return Err(EngineError::Contract("unlearn_step needs a nonempty forget batch".into()));
        }
        let n_forget = forget_batch.len();
        let rows: Vec<&Sample> = forget_batch.iter().chain(buffer_batch).collect();
        let mut tape = Tape::new();
        let vars = self.student.bind(&mut tape);
        let x_all = batch_tensor(&rows)?;
        let x = tape.leaf(x_all.clone());
        let feats = vars.features(&mut tape, x)?;
        let logits = vars.classify_features(&mut tape, feats)?;

        let mode = self.hyper.objective_mode;
        let mut comps = Components::default();
        match mode {
            ObjectiveMode::PaperEq11 => {
                let teacher_logits = self.teacher.classify(&x_all)?;
                let bad_logits = bad.classify(&x_all)?;
                let forget: Vec<bool> = (0..rows.len()).map(|i| i < n_forget).collect();
                comps.cu = Some(losses::unlearning_loss_weighted(
                    &mut tape,
                    &teacher_logits,
                    &bad_logits,
                    logits,
                    &forget,
                    self.hyper.er_weight,
                )?);
            }
            ObjectiveMode::Algorithm1 => {
                let forget_rows: Vec<&Sample> = forget_batch.iter().collect();
                let bad_logits = bad.classify(&batch_tensor(&forget_rows)?)?;
                let s_logits = tape.slice_rows(logits, 0, n_forget)?;
                comps.kl_bad = Some(losses::kl_divergence(&mut tape, &bad_logits, s_logits)?);
                self.buffer_terms(&mut tape, &vars, feats, logits, n_forget, buffer_batch, &mut comps)?;
            }
        }
        let loss = losses::combined_objective(&mut tape, mode, Ulabel::Unlearn, &comps, &self.hyper.weights)?;
        self.finish_step(tape, vars, loss)
    }

    fn finish_step(&mut self, tape: Tape, vars: crate::model::NetVars, loss: crate::tensor::Var) -> Result<f64> {
        let value = tape.value(loss).item();
        self.check_finite(value)?;
        let grads = tape.backward(loss)?;
        self.student.sgd_step(&vars, &grads, self.hyper.learning_rate);
        Ok(value)
    }

    /// Teacher parameters, buffer snapshot and request log as one text block.
    pub fn checkpoint_text(&self) -> String {
        let mut s = String::from("uniclun-checkpoint 1\n[requests]\n");
        for r in &self.request_log {
            let _ = writeln!(s, "{}", r.log_line());
        }
        s.push_str("[teacher]\n");
        s.push_str(&self.teacher.params_text());
        s.push_str("[buffer]\n");
        s.push_str(&self.buffer.snapshot());
        s
    }
}

/// Parsed form of [`Engine::checkpoint_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub request_log: Vec<String>,
    pub teacher: TriNet,
    pub buffer: ReplayBuffer,
}

impl Checkpoint {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| EngineError::Checkpoint(m.to_string());
        let rest = text.strip_prefix("uniclun-checkpoint 1\n[requests]\n").ok_or_else(|| bad("missing header"))?;
        let (requests, rest) = rest.split_once("[teacher]\n").ok_or_else(|| bad("missing [teacher]"))?;
        let (teacher, buffer) = rest.split_once("[buffer]\n").ok_or_else(|| bad("missing [buffer]"))?;
        Ok(Self {
            request_log: requests.lines().map(str::to_string).collect(),
            teacher: TriNet::read_params(teacher.as_bytes())?,
            buffer: ReplayBuffer::from_snapshot(buffer)?,
        })
    }
}
