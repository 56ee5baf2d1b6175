//! Property suites: gradient checks, loss fixed points, reservoir
//! uniformity, Bernoulli draws and the trade-off algebra.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::buffer::{ReplayBuffer, Sample};
use crate::engine::sample_bernoulli;
use crate::eval::{self, TradeoffModel};
use crate::losses::{self, LossError, LossWeights};
use crate::model::{NetConfig, TriNet};
use crate::tensor::{self, grad_check, Tape, Tensor, TensorError, Var};

/// `KL(softmax(p) ‖ softmax(q))` batch mean, as a plain value.
pub type KlFn = fn(&Tensor, &Tensor) -> Result<f64, LossError>;

/// The library's KL.
pub fn reference_kl(p: &Tensor, q: &Tensor) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let kl = losses::kl_divergence(&mut tape, p, qv)?;
    Ok(tape.value(kl).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub kl: KlFn,
    pub grad_instances: usize,
    pub grad_eps: f64,
    pub grad_tol: f64,
    pub random_pairs: usize,
    pub reservoir_capacity: usize,
    pub reservoir_stream: usize,
    pub reservoir_trials: usize,
    pub bernoulli_draws: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            kl: reference_kl,
            grad_instances: 100,
            grad_eps: 1e-5,
            grad_tol: 1e-4,
            random_pairs: 1000,
            reservoir_capacity: 10,
            reservoir_stream: 100,
            reservoir_trials: 20_000,
            bernoulli_draws: 100_000,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    vec![gradient_suite(opts), fixed_point_suite(opts), reservoir_suite(opts), bernoulli_suite(opts), tradeoff_suite()]
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn as_tensor_err(e: LossError) -> TensorError {
    TensorError::Invalid { op: "loss", msg: e.to_string() }
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> tensor::Result<Var>>;

/// One random instance of every loss: a closure plus the parameter values
/// it is checked at.
fn loss_instances(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Check, Vec<Tensor>)> {
    let n = rng.random_range(2..=6);
    let c = rng.random_range(2..=5);
    let k = rng.random_range(2..=4);
    let ys = labels(rng, n, c.min(3));
    let rho = rng.random_range(0.5..3.0);
    let tau = rng.random_range(0.3..1.0);
    let teacher = gaussian(rng, &[n, c], 2.0);
    let bad = gaussian(rng, &[n, c], 2.0);
    let teacher_z = tensor::l2_normalize(&gaussian(rng, &[n, k], 1.0)).expect("nonzero rows");
    let forget: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let logits = gaussian(rng, &[n, c], 2.0);
    let raw_z = gaussian(rng, &[n, k], 1.0);

    let mut out: Vec<(&'static str, Check, Vec<Tensor>)> = Vec::new();
    let y = ys.clone();
    out.push((
        "cross_entropy",
        Box::new(move |t, v| losses::cross_entropy(t, v[0], &y).map_err(as_tensor_err)),
        vec![logits.clone()],
    ));
    let (y, tl) = (ys.clone(), teacher.clone());
    out.push((
        "online_distillation",
        Box::new(move |t, v| losses::online_distillation(t, &tl, v[0], &y, rho).map_err(as_tensor_err)),
        vec![logits.clone()],
    ));
    let (y, tz) = (ys.clone(), teacher_z.clone());
    out.push((
        "contrastive_distillation",
        Box::new(move |t, v| {
            let z = t.l2_normalize(v[0])?;
            losses::contrastive_distillation(t, z, &tz, &y, tau).map_err(as_tensor_err)
        }),
        vec![raw_z.clone()],
    ));
    let y = ys.clone();
    out.push((
        "supervised_contrastive",
        Box::new(move |t, v| {
            let z = t.l2_normalize(v[0])?;
            losses::supervised_contrastive(t, z, &y, tau).map_err(as_tensor_err)
        }),
        vec![raw_z.clone()],
    ));
    let p = teacher.clone();
    out.push((
        "kl_divergence",
        Box::new(move |t, v| losses::kl_divergence(t, &p, v[0]).map_err(as_tensor_err)),
        vec![logits.clone()],
    ));
    let (tl, bl) = (teacher.clone(), bad.clone());
    out.push((
        "unlearning_loss",
        Box::new(move |t, v| losses::unlearning_loss(t, &tl, &bl, v[0], &forget).map_err(as_tensor_err)),
        vec![logits.clone()],
    ));
    let (y, tl) = (ys.clone(), teacher.clone());
    let tz = teacher_z.clone();
    let w = LossWeights { rho, tau, ..Default::default() };
    out.push((
        "cl_total",
        Box::new(move |t, v| {
            let ce = losses::cross_entropy(t, v[0], &y).map_err(as_tensor_err)?;
            let od = losses::online_distillation(t, &tl, v[0], &y, w.rho).map_err(as_tensor_err)?;
            let z = t.l2_normalize(v[1])?;
            let cd = losses::contrastive_distillation(t, z, &tz, &y, w.tau).map_err(as_tensor_err)?;
            let scd = losses::supervised_contrastive(t, z, &y, w.tau).map_err(as_tensor_err)?;
            losses::cl_total(t, losses::ClParts { ce, od, cd, scd }, &w).map_err(as_tensor_err)
        }),
        vec![logits, raw_z],
    ));
    out
}

/// The learning objective through a small network, checked against every
/// network parameter.
fn network_instance(rng: &mut ChaCha8Rng) -> (Check, Vec<Tensor>) {
    let cfg = NetConfig { input_dim: 3, hidden_dims: vec![5], num_classes: 3, embed_dim: 3, init_seed: rng.random() };
    let net = TriNet::init(&cfg).expect("valid config");
    let teacher = TriNet::init(&NetConfig { init_seed: rng.random(), ..cfg.clone() }).expect("valid config");
    let x = gaussian(rng, &[4, 3], 1.0);
    let y = labels(rng, 4, 2);
    let (t_logits, t_z) = teacher.classify_and_project(&x).expect("shapes match");
    let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
    let w = LossWeights::default();
    let check: Check = Box::new(move |t, v| {
        // parameter order: theta weight, theta bias, phi weight, phi bias, psi weight, psi bias
        let xv = t.leaf(x.clone());
        let h = t.linear(xv, v[0], v[1])?;
        let h = t.relu(h);
        let logits = t.linear(h, v[2], v[3])?;
        let raw = t.linear(h, v[4], v[5])?;
        let z = t.l2_normalize(raw)?;
        let ce = losses::cross_entropy(t, logits, &y).map_err(as_tensor_err)?;
        let od = losses::online_distillation(t, &t_logits, logits, &y, w.rho).map_err(as_tensor_err)?;
        let cd = losses::contrastive_distillation(t, z, &t_z, &y, w.tau).map_err(as_tensor_err)?;
        let scd = losses::supervised_contrastive(t, z, &y, w.tau).map_err(as_tensor_err)?;
        losses::cl_total(t, losses::ClParts { ce, od, cd, scd }, &w).map_err(as_tensor_err)
    });
    (check, params)
}

/// Central-difference check of every loss over random instances.
pub fn gradient_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut note = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(entry) => entry.1 = entry.1.max(err),
        None => worst.push((name, err)),
    };
    for i in 0..opts.grad_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
        for (name, f, params) in loss_instances(&mut rng) {
            note(name, grad_check(f, &params, opts.grad_eps).unwrap_or(f64::INFINITY));
        }
        let (f, params) = network_instance(&mut rng);
        note("network_objective", grad_check(f, &params, opts.grad_eps).unwrap_or(f64::INFINITY));
    }
    let passed = worst.iter().all(|(_, e)| *e < opts.grad_tol);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    SuiteReport {
        name: "gradients",
        passed,
        detail: format!("max relative error over {} instances (< {:e}): {detail}", opts.grad_instances, opts.grad_tol),
    }
}

/// Losses vanish at their fixed points, KL is nonnegative and the critic
/// stays within its range.
pub fn fixed_point_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut failures = Vec::new();

    let t = gaussian(&mut rng, &[5, 4], 2.0);
    let b = gaussian(&mut rng, &[5, 4], 2.0);
    let ys = labels(&mut rng, 5, 4);
    let mut tape = Tape::new();
    let s = tape.leaf(t.clone());
    let od = losses::online_distillation(&mut tape, &t, s, &ys, 2.0).map(|v| tape.value(v).item());
    if od.as_ref().map_or(true, |v| *v != 0.0) {
        failures.push(format!("online_distillation(T, T) = {od:?}"));
    }
    let kl_same = (opts.kl)(&t, &t);
    if kl_same.as_ref().map_or(true, |v| v.abs() > 1e-12) {
        failures.push(format!("KL(p, p) = {kl_same:?}"));
    }
    let forget = [true, false, true, false, false];
    let mut selected = Vec::new();
    for (i, &f) in forget.iter().enumerate() {
        selected.extend_from_slice(if f { b.row(i) } else { t.row(i) });
    }
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::matrix(5, 4, selected).expect("5x4"));
    let ul = losses::unlearning_loss(&mut tape, &t, &b, s, &forget).map(|v| tape.value(v).item());
    if ul.as_ref().map_or(true, |v| v.abs() > 1e-12) {
        failures.push(format!("unlearning_loss at its selected targets = {ul:?}"));
    }

    let mut kl_min = f64::INFINITY;
    for _ in 0..opts.random_pairs {
        let c = rng.random_range(2..=10);
        let p = gaussian(&mut rng, &[1, c], 3.0);
        let q = gaussian(&mut rng, &[1, c], 3.0);
        match (opts.kl)(&p, &q) {
            Ok(v) => kl_min = kl_min.min(v),
            Err(e) => failures.push(format!("KL error {e}")),
        }
    }
    if !(kl_min >= 0.0) {
        failures.push(format!("KL min over random pairs = {kl_min:e}"));
    }

    let mut critic_bad = 0;
    for _ in 0..opts.random_pairs {
        let k = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..2.0);
        let zi = tensor::l2_normalize(&gaussian(&mut rng, &[1, k], 1.0)).expect("nonzero");
        let zj = tensor::l2_normalize(&gaussian(&mut rng, &[1, k], 1.0)).expect("nonzero");
        match losses::critic_h(zi.data(), zj.data(), tau) {
            Ok(h) if h >= (-2.0 / tau).exp() && h <= 1.0 => {}
            _ => critic_bad += 1,
        }
    }
    if critic_bad > 0 {
        failures.push(format!("critic_h out of range on {critic_bad} pairs"));
    }

    SuiteReport {
        name: "fixed_points",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("fixed points hold; min KL over {} pairs = {kl_min:.3e}; critic in range", opts.random_pairs)
        } else {
            failures.join("; ")
        },
    }
}

/// Per-item inclusion frequencies of reservoir sampling against
/// `capacity / stream` within three standard errors.
pub fn reservoir_suite(opts: &VerifyOptions) -> SuiteReport {
    let (cap, len, trials) = (opts.reservoir_capacity, opts.reservoir_stream, opts.reservoir_trials);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut counts = vec![0usize; len];
    for _ in 0..trials {
        let mut buf = ReplayBuffer::new(cap).expect("positive capacity");
        for i in 0..len {
            buf.insert(Sample::new(vec![i as f64], 0), &mut rng);
        }
        for s in buf.items() {
            counts[s.x[0] as usize] += 1;
        }
    }
    let p = cap as f64 / len as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    let (worst_i, worst_dev) = counts
        .iter()
        .map(|&c| (c as f64 / trials as f64 - p).abs())
        .enumerate()
        .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    SuiteReport {
        name: "reservoir",
        passed: worst_dev <= 3.0 * se,
        detail: format!("largest deviation {worst_dev:.5} (item {worst_i}) vs 3 SE = {:.5}, target {p}", 3.0 * se),
    }
}

pub fn bernoulli_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p = 0.2;
    let hits = (0..opts.bernoulli_draws).filter(|_| sample_bernoulli(p, &mut rng)).count();
    let mean = hits as f64 / opts.bernoulli_draws as f64;
    let zero = (0..1000).all(|_| !sample_bernoulli(0.0, &mut rng));
    let one = (0..1000).all(|_| sample_bernoulli(1.0, &mut rng));
    SuiteReport {
        name: "bernoulli",
        passed: (mean - p).abs() <= 0.004 && zero && one,
        detail: format!(
            "mean {mean:.5} over {} draws at p = {p}; p=0 and p=1 exact: {}",
            opts.bernoulli_draws,
            zero && one
        ),
    }
}

/// Zeros at N = 1 and N = β, and recovery of a planted model.
pub fn tradeoff_suite() -> SuiteReport {
    let planted = TradeoffModel { alpha: 1.5, beta: 20.0 };
    let zeros = eval::total_performance(1.0, &planted) == 0.0 && eval::total_performance(planted.beta, &planted) == 0.0;
    let pts: Vec<(f64, f64)> =
        [25.0, 50.0, 100.0, 500.0, 2000.0].iter().map(|&n| (n, eval::total_performance(n, &planted))).collect();
    let fit = eval::fit_tradeoff(&pts);
    let recovered = fit
        .as_ref()
        .map(|f| (f.model.alpha - 1.5).abs() <= 1e-4 && (f.model.beta - 20.0).abs() <= 1e-4)
        .unwrap_or(false);
    SuiteReport {
        name: "tradeoff",
        passed: zeros && recovered,
        detail: format!(
            "exact zeros: {zeros}; planted (1.5, 20) fit: {:?}",
            fit.map(|f| (f.model.alpha, f.model.beta)).ok()
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_kl(p: &Tensor, q: &Tensor) -> Result<f64, LossError> {
        reference_kl(p, q).map(|v| -v)
    }

    #[test]
    fn default_suites_pass() {
        let opts = VerifyOptions { grad_instances: 10, reservoir_trials: 2000, ..Default::default() };
        for r in run_all(&opts) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn corrupted_kl_is_caught() {
        let opts = VerifyOptions { kl: flipped_kl, ..Default::default() };
        let r = fixed_point_suite(&opts);
        assert!(!r.passed);
        assert!(r.detail.contains("KL min"), "{}", r.detail);
    }
}
