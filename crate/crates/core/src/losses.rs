//! Training objectives as tape expressions.
//!
//! Student-side inputs are [`Var`]s; teacher and bad-teacher outputs are
//! plain [`Tensor`]s, so no gradient ever reaches them. Batch reductions are
//! arithmetic means.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tape, Tensor, TensorError, Var};

/// Tolerance on `|‖z‖ - 1|` for embeddings fed to the contrastive terms.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{what}: expected {expected} labels/flags, got {got}")]
    Count { what: &'static str, expected: usize, got: usize },
    #[error("embedding row {row} is not unit norm (norm {norm})")]
    NotUnit { row: usize, norm: f64 },
    #[error("invalid loss parameter: {0}")]
    Param(String),
    #[error("objective needs the {0} component")]
    MissingComponent(&'static str),
    #[error("unknown objective mode '{0}' (expected paper_eq11 or algorithm1)")]
    InvalidMode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Coefficients and temperatures of the continual-learning objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Temperature of the distillation weight.
    pub rho: f64,
    /// Temperature of the critic.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 1.0, alpha3: 1.0, rho: 2.0, tau: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let alphas = [self.alpha1, self.alpha2, self.alpha3];
        if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(LossError::Param(format!("alphas must be finite and >= 0, got {alphas:?}")));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(LossError::Param(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::Param(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(LossError::Count { what: "labels", expected: rows, got: labels.len() });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::Label { label, classes });
    }
    Ok(())
}

fn check_unit_rows(z: &Tensor) -> Result<()> {
    for i in 0..z.rows() {
        let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotUnit { row: i, norm });
        }
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }.into());
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = tape.value(logits);
    let (n, c) = (lv.rows(), lv.cols());
    check_labels(labels, n, c)?;
    let mut w = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        w[i * c + y] = -1.0 / n as f64;
    }
    let lsm = tape.log_softmax(logits)?;
    Ok(tape.weighted_sum(lsm, Tensor::matrix(n, c, w)?)?)
}

/// The teacher's tempered softmax probability of the true label.
pub fn distill_weight(teacher_logits: &[f64], y: usize, rho: f64) -> Result<f64> {
    if y >= teacher_logits.len() {
        return Err(LossError::Label { label: y, classes: teacher_logits.len() });
    }
    if !(rho > 0.0) {
        return Err(LossError::Param(format!("rho must be > 0, got {rho}")));
    }
    let scaled: Vec<f64> = teacher_logits.iter().map(|v| v / rho).collect();
    let lsm = tensor::log_softmax(&Tensor::matrix(1, scaled.len(), scaled)?)?;
    Ok(lsm.data()[y].exp())
}

/// `mean_i ω_i ‖teacher_i − student_i‖²`.
pub fn online_distillation(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: Var,
    labels: &[usize],
    rho: f64,
) -> Result<Var> {
    same_shape(teacher_logits, tape.value(student_logits), "online_distillation")?;
    let (n, c) = (teacher_logits.rows(), teacher_logits.cols());
    check_labels(labels, n, c)?;
    let mut w = Vec::with_capacity(n * c);
    for (i, &y) in labels.iter().enumerate() {
        let omega = distill_weight(teacher_logits.row(i), y, rho)?;
        w.extend(std::iter::repeat_n(omega / n as f64, c));
    }
    let t = tape.leaf(teacher_logits.clone());
    let diff = tape.sub(student_logits, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.weighted_sum(sq, Tensor::matrix(n, c, w)?)?)
}

/// `exp(cos(z_i, z_j)/τ) / exp(1/τ)` for unit vectors.
pub fn critic_h(zi: &[f64], zj: &[f64], tau: f64) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(TensorError::ShapeMismatch { op: "critic_h", left: vec![zi.len()], right: vec![zj.len()] }.into());
    }
    if !(tau > 0.0) {
        return Err(LossError::Param(format!("tau must be > 0, got {tau}")));
    }
    for (row, z) in [zi, zj].into_iter().enumerate() {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotUnit { row, norm });
        }
    }
    let cos: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
    Ok(((cos - 1.0) / tau).exp())
}

/// Weight matrix `-1 / (n |P(i)|)` on positive pairs, where `positive`
/// decides membership. Anchors without positives add 0 but still count in n.
fn positive_weights(n: usize, m: usize, positive: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut w = vec![0.0; n * m];
    for i in 0..n {
        let count = (0..m).filter(|&j| positive(i, j)).count();
        if count == 0 {
            continue;
        }
        let wi = -1.0 / (n as f64 * count as f64);
        for j in (0..m).filter(|&j| positive(i, j)) {
            w[i * m + j] = wi;
        }
    }
    Tensor::matrix(n, m, w).expect("positive dims")
}

/// Student anchors against teacher positives and negatives. The log-ratio
/// `log h_ij − log Σ_k h_ik` is a row log-softmax of `cos/τ`.
pub fn contrastive_distillation(
    tape: &mut Tape,
    student_z: Var,
    teacher_z: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let sv = tape.value(student_z);
    same_shape(teacher_z, sv, "contrastive_distillation")?;
    check_labels(labels, sv.rows(), usize::MAX)?;
    if !(tau > 0.0) {
        return Err(LossError::Param(format!("tau must be > 0, got {tau}")));
    }
    check_unit_rows(sv)?;
    check_unit_rows(teacher_z)?;
    let n = sv.rows();
    let t = tape.leaf(teacher_z.clone());
    let cos = tape.matmul_nt(student_z, t)?;
    let logits = tape.scale(cos, 1.0 / tau);
    let lsm = tape.log_softmax(logits)?;
    let w = positive_weights(n, n, |i, j| labels[i] == labels[j]);
    Ok(tape.weighted_sum(lsm, w)?)
}

/// Supervised contrastive term over student embeddings only; the anchor is
/// excluded from both its positives and its denominator.
pub fn supervised_contrastive(tape: &mut Tape, student_z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let sv = tape.value(student_z);
    check_labels(labels, sv.rows(), usize::MAX)?;
    if !(tau > 0.0) {
        return Err(LossError::Param(format!("tau must be > 0, got {tau}")));
    }
    check_unit_rows(sv)?;
    let n = sv.rows();
    let cos = tape.matmul_nt(student_z, student_z)?;
    let logits = tape.scale(cos, 1.0 / tau);
    let mask = (0..n * n).map(|idx| idx / n != idx % n).collect();
    let lsm = tape.log_softmax_masked(logits, mask)?;
    let w = positive_weights(n, n, |i, j| i != j && labels[i] == labels[j]);
    Ok(tape.weighted_sum(lsm, w)?)
}

/// The four continual-learning parts.
#[derive(Debug, Clone, Copy)]
pub struct ClParts {
    pub ce: Var,
    pub od: Var,
    pub cd: Var,
    pub scd: Var,
}

/// `ce + α1·od + α2·cd + α3·scd`.
pub fn cl_total(tape: &mut Tape, parts: ClParts, weights: &LossWeights) -> Result<Var> {
    let od = tape.scale(parts.od, weights.alpha1);
    let cd = tape.scale(parts.cd, weights.alpha2);
    let scd = tape.scale(parts.scd, weights.alpha3);
    let s = tape.add(parts.ce, od)?;
    let s = tape.add(s, cd)?;
    Ok(tape.add(s, scd)?)
}

/// `Σ_i w_i KL(softmax(reference_i) ‖ softmax(q_i))`, gradient into `q` only.
pub fn weighted_kl(tape: &mut Tape, reference_logits: &Tensor, q_logits: Var, row_weights: &[f64]) -> Result<Var> {
    same_shape(reference_logits, tape.value(q_logits), "kl_divergence")?;
    let (n, c) = (reference_logits.rows(), reference_logits.cols());
    if row_weights.len() != n {
        return Err(LossError::Count { what: "row weights", expected: n, got: row_weights.len() });
    }
    let log_p = tensor::log_softmax(reference_logits)?;
    // p = 0 entries get weight 0, which realizes 0·log 0 := 0
    let w: Vec<f64> = log_p.data().iter().enumerate().map(|(idx, lp)| row_weights[idx / c] * lp.exp()).collect();
    let lp = tape.leaf(log_p);
    let lq = tape.log_softmax(q_logits)?;
    let diff = tape.sub(lp, lq)?;
    Ok(tape.weighted_sum(diff, Tensor::matrix(n, c, w)?)?)
}

/// Batch mean of `KL(softmax(p_logits) ‖ softmax(q_logits))`.
pub fn kl_divergence(tape: &mut Tape, p_logits: &Tensor, q_logits: Var) -> Result<Var> {
    let n = p_logits.rows();
    weighted_kl(tape, p_logits, q_logits, &vec![1.0 / n as f64; n])
}

/// Per-sample selector between retaining (teacher) and forgetting (bad
/// teacher) targets, averaged over the batch. `forget[i]` is the per-sample
/// unlearning flag.
pub fn unlearning_loss(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    bad_logits: &Tensor,
    student_logits: Var,
    forget: &[bool],
) -> Result<Var> {
    unlearning_loss_weighted(tape, teacher_logits, bad_logits, student_logits, forget, 1.0)
}

/// As [`unlearning_loss`] with retained samples scaled by `retain_weight`.
pub fn unlearning_loss_weighted(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    bad_logits: &Tensor,
    student_logits: Var,
    forget: &[bool],
    retain_weight: f64,
) -> Result<Var> {
    same_shape(teacher_logits, bad_logits, "unlearning_loss")?;
    same_shape(teacher_logits, tape.value(student_logits), "unlearning_loss")?;
    let (n, c) = (teacher_logits.rows(), teacher_logits.cols());
    if forget.len() != n {
        return Err(LossError::Count { what: "unlearning flags", expected: n, got: forget.len() });
    }
    let mut reference = Vec::with_capacity(n * c);
    let mut weights = Vec::with_capacity(n);
    for (i, &f) in forget.iter().enumerate() {
        if f {
            reference.extend_from_slice(bad_logits.row(i));
            weights.push(1.0 / n as f64);
        } else {
            reference.extend_from_slice(teacher_logits.row(i));
            weights.push(retain_weight / n as f64);
        }
    }
    weighted_kl(tape, &Tensor::matrix(n, c, reference)?, student_logits, &weights)
}

/// How learn and unlearn objectives are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Continual-learning loss for learning, per-sample unlearning loss for
    /// unlearning.
    #[default]
    PaperEq11,
    /// Branch loss on task samples plus buffer distillation terms always.
    Algorithm1,
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveMode::PaperEq11 => "paper_eq11",
            ObjectiveMode::Algorithm1 => "algorithm1",
        })
    }
}

impl FromStr for ObjectiveMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_eq11" => Ok(ObjectiveMode::PaperEq11),
            "algorithm1" => Ok(ObjectiveMode::Algorithm1),
            other => Err(LossError::InvalidMode(other.to_string())),
        }
    }
}

/// Learn (1) or unlearn (0) request flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ulabel {
    Learn,
    Unlearn,
}

impl Ulabel {
    pub fn as_flag(self) -> u8 {
        match self {
            Ulabel::Learn => 1,
            Ulabel::Unlearn => 0,
        }
    }
}

/// Loss terms available to [`combined_objective`]. Buffer terms that are
/// absent (empty buffer) count as zero; branch terms are required.
#[derive(Debug, Clone, Copy, Default)]
pub struct Components {
    pub ce: Option<Var>,
    pub od: Option<Var>,
    pub cd: Option<Var>,
    pub scd: Option<Var>,
    /// Per-sample unlearning loss over forget and retained samples.
    pub cu: Option<Var>,
    /// KL from the bad teacher on forget samples only.
    pub kl_bad: Option<Var>,
}

pub fn combined_objective(
    tape: &mut Tape,
    mode: ObjectiveMode,
    ulabel: Ulabel,
    comps: &Components,
    weights: &LossWeights,
) -> Result<Var> {
    let mut zero = None;
    let mut or_zero = |tape: &mut Tape, v: Option<Var>| {
        v.unwrap_or_else(|| *zero.get_or_insert_with(|| tape.leaf(Tensor::scalar(0.0))))
    };
    match (mode, ulabel) {
        (ObjectiveMode::PaperEq11, Ulabel::Learn) => {
            let ce = comps.ce.ok_or(LossError::MissingComponent("ce"))?;
            let parts =
                ClParts { ce, od: or_zero(tape, comps.od), cd: or_zero(tape, comps.cd), scd: or_zero(tape, comps.scd) };
            cl_total(tape, parts, weights)
        }
        (ObjectiveMode::PaperEq11, Ulabel::Unlearn) => comps.cu.ok_or(LossError::MissingComponent("cu")),
        (ObjectiveMode::Algorithm1, u) => {
            let branch = match u {
                Ulabel::Learn => comps.ce.ok_or(LossError::MissingComponent("ce"))?,
                Ulabel::Unlearn => comps.kl_bad.ok_or(LossError::MissingComponent("kl_bad"))?,
            };
            let parts = ClParts {
                ce: branch,
                od: or_zero(tape, comps.od),
                cd: or_zero(tape, comps.cd),
                scd: or_zero(tape, comps.scd),
            };
            cl_total(tape, parts, weights)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).item())
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn cross_entropy_examples() {
        close(
            eval(|t| {
                let l = t.leaf(m(&[&[0.0, 0.0]]));
                cross_entropy(t, l, &[0])
            })
            .unwrap(),
            2f64.ln(),
            1e-15,
        );
        assert!(
            eval(|t| {
                let l = t.leaf(m(&[&[30.0, -30.0]]));
                cross_entropy(t, l, &[0])
            })
            .unwrap()
                < 1e-20
        );
        assert_eq!(
            eval(|t| {
                let l = t.leaf(m(&[&[0.0, 0.0]]));
                cross_entropy(t, l, &[5])
            })
            .unwrap_err(),
            LossError::Label { label: 5, classes: 2 }
        );
    }

    #[test]
    fn distill_weight_examples() {
        close(distill_weight(&[0.3; 10], 4, 1.0).unwrap(), 0.1, 1e-15);
        close(distill_weight(&[2.0, 0.0], 0, 1.0).unwrap(), E * E / (E * E + 1.0), 1e-15);
        close(distill_weight(&[2.0, 0.0], 0, 100.0).unwrap(), 0.505, 1e-4);
        assert!(distill_weight(&[2.0, 0.0], 2, 1.0).is_err());
    }

    #[test]
    fn distill_weights_sum_to_one_across_classes() {
        let logits = [0.4, -1.2, 2.5, 0.0];
        let s: f64 = (0..4).map(|y| distill_weight(&logits, y, 2.0).unwrap()).sum();
        close(s, 1.0, 1e-12);
    }

    #[test]
    fn online_distillation_examples() {
        let od = |teacher: Tensor, student: Tensor, labels: &[usize]| {
            eval(|t| {
                let s = t.leaf(student);
                online_distillation(t, &teacher, s, labels, 1.0)
            })
            .unwrap()
        };
        let x = m(&[&[0.2, -0.4], &[1.0, 3.0]]);
        assert_eq!(od(x.clone(), x, &[0, 1]), 0.0);
        close(od(m(&[&[1.0, 0.0]]), m(&[&[0.0, 0.0]]), &[0]), E / (E + 1.0), 1e-15);
        // doubling the difference quadruples the loss at fixed teacher
        let a = od(m(&[&[1.0, 0.5]]), m(&[&[0.5, 0.0]]), &[1]);
        let b = od(m(&[&[1.0, 0.5]]), m(&[&[0.0, -0.5]]), &[1]);
        close(b, 4.0 * a, 1e-14);
    }

    #[test]
    fn online_distillation_shape_mismatch() {
        let r = eval(|t| {
            let s = t.leaf(Tensor::zeros(&[1, 3]));
            online_distillation(t, &Tensor::zeros(&[1, 2]), s, &[0], 1.0)
        });
        assert!(matches!(r, Err(LossError::Tensor(TensorError::ShapeMismatch { .. }))));
    }

    #[test]
    fn critic_examples() {
        close(critic_h(&[0.6, 0.8], &[0.6, 0.8], 0.3).unwrap(), 1.0, 1e-15);
        close(critic_h(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), (-2f64).exp(), 1e-15);
        close(critic_h(&[1.0, 0.0], &[-1.0, 0.0], 1.0).unwrap(), (-2f64).exp(), 1e-15);
        assert!(matches!(critic_h(&[1.0, 1.0], &[1.0, 0.0], 1.0), Err(LossError::NotUnit { row: 0, .. })));
    }

    #[test]
    fn contrastive_distillation_hand_value() {
        let z = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = eval(|t| {
            let s = t.leaf(z.clone());
            contrastive_distillation(t, s, &z, &[0, 1], 1.0)
        })
        .unwrap();
        close(v, (1.0 + (-1f64).exp()).ln(), 1e-15);
        close(v, 0.3133, 1e-4);
    }

    #[test]
    fn contrastive_distillation_rejects_non_unit() {
        let z = m(&[&[1.0, 1.0]]);
        let r = eval(|t| {
            let s = t.leaf(z.clone());
            contrastive_distillation(t, s, &z, &[0], 1.0)
        });
        assert!(matches!(r, Err(LossError::NotUnit { .. })));
    }

    #[test]
    fn supervised_contrastive_examples() {
        let scd = |z: Tensor, labels: &[usize]| {
            eval(|t| {
                let s = t.leaf(z);
                supervised_contrastive(t, s, labels, 1.0)
            })
            .unwrap()
        };
        assert_eq!(scd(m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]), &[0, 1, 2]), 0.0);
        close(scd(m(&[&[1.0, 0.0], &[0.6, 0.8]]), &[3, 3]), 0.0, 1e-15);
        let v = scd(m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]), &[0, 0, 1]);
        close(v, 2.0 / 3.0 * (1.0 + (-1f64).exp()).ln(), 1e-15);
        close(v, 0.2089, 1e-4);
    }

    #[test]
    fn cl_total_examples() {
        let parts = |t: &mut Tape, v: [f64; 4]| ClParts {
            ce: t.leaf(Tensor::scalar(v[0])),
            od: t.leaf(Tensor::scalar(v[1])),
            cd: t.leaf(Tensor::scalar(v[2])),
            scd: t.leaf(Tensor::scalar(v[3])),
        };
        let w0 = LossWeights { alpha1: 0.0, alpha2: 0.0, alpha3: 0.0, ..Default::default() };
        assert_eq!(
            eval(|t| {
                let p = parts(t, [0.7, 3.0, 2.0, 1.0]);
                cl_total(t, p, &w0)
            })
            .unwrap(),
            0.7
        );
        assert_eq!(
            eval(|t| {
                let p = parts(t, [0.0; 4]);
                cl_total(t, p, &LossWeights::default())
            })
            .unwrap(),
            0.0
        );
        let w = LossWeights { alpha1: 0.5, alpha2: 0.5, alpha3: 0.5, ..Default::default() };
        assert_eq!(
            eval(|t| {
                let p = parts(t, [1.0; 4]);
                cl_total(t, p, &w)
            })
            .unwrap(),
            2.5
        );
    }

    #[test]
    fn kl_examples() {
        let kl = |p: Tensor, q: Tensor| {
            eval(|t| {
                let q = t.leaf(q);
                kl_divergence(t, &p, q)
            })
            .unwrap()
        };
        let x = m(&[&[0.1, 2.0, -1.0]]);
        assert_eq!(kl(x.clone(), x), 0.0);
        close(kl(m(&[&[1000.0, 0.0]]), m(&[&[0.0, 0.0]])), 2f64.ln(), 1e-12);
        // logits ln(0.9), ln(0.1) give p = (0.9, 0.1)
        let p = m(&[&[0.9f64.ln(), 0.1f64.ln()]]);
        let q = m(&[&[0.1f64.ln(), 0.9f64.ln()]]);
        close(kl(p, q), 0.8 * 9f64.ln(), 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let v = eval(|t| {
                let q = t.leaf(Tensor::matrix(1, 5, q).unwrap());
                kl_divergence(t, &Tensor::matrix(1, 5, p).unwrap(), q)
            })
            .unwrap();
            assert!(v >= 0.0, "{v}");
        }
    }

    #[test]
    fn unlearning_loss_selects_per_sample() {
        let teacher = m(&[&[2.0, 0.0], &[0.0, 0.0]]);
        let bad = m(&[&[0.0, 0.0], &[0.9f64.ln(), 0.1f64.ln()]]);
        // student equals teacher on row 0 (retained) and bad on row 1 (forget)
        let student = m(&[&[2.0, 0.0], &[0.9f64.ln(), 0.1f64.ln()]]);
        let v = eval(|t| {
            let s = t.leaf(student.clone());
            unlearning_loss(t, &teacher, &bad, s, &[false, true])
        })
        .unwrap();
        assert_eq!(v, 0.0);

        // only forget rows: reduces to KL(bad ‖ student)
        let s2 = m(&[&[0.0, 0.0], &[0.1f64.ln(), 0.9f64.ln()]]);
        let only_forget = eval(|t| {
            let s = t.leaf(s2.clone());
            unlearning_loss(t, &teacher, &bad, s, &[true, true])
        })
        .unwrap();
        let kl_bad = eval(|t| {
            let s = t.leaf(s2.clone());
            kl_divergence(t, &bad, s)
        })
        .unwrap();
        assert_eq!(only_forget, kl_bad);

        // mixed batch: row 0 retained with p = (1, 0) vs uniform, row 1 forgotten
        // with p = (0.9, 0.1) vs (0.1, 0.9); mean of ln 2 and 0.8 ln 9
        let teacher = m(&[&[1000.0, 0.0], &[0.0, 0.0]]);
        let mixed = eval(|t| {
            let s = t.leaf(m(&[&[0.0, 0.0], &[0.1f64.ln(), 0.9f64.ln()]]));
            unlearning_loss(t, &teacher, &bad, s, &[false, true])
        })
        .unwrap();
        close(mixed, (2f64.ln() + 0.8 * 9f64.ln()) / 2.0, 1e-12);
    }

    #[test]
    fn objective_mode_parsing() {
        assert_eq!("paper_eq11".parse::<ObjectiveMode>().unwrap(), ObjectiveMode::PaperEq11);
        assert_eq!("algorithm1".parse::<ObjectiveMode>().unwrap(), ObjectiveMode::Algorithm1);
        assert_eq!("eq12".parse::<ObjectiveMode>().unwrap_err(), LossError::InvalidMode("eq12".into()));
        assert_eq!(ObjectiveMode::Algorithm1.to_string(), "algorithm1");
    }

    #[test]
    fn combined_objective_cases() {
        let w = LossWeights { alpha1: 1.0, alpha2: 1.0, alpha3: 1.0, ..Default::default() };
        let build = |t: &mut Tape, cu: f64| Components {
            ce: Some(t.leaf(Tensor::scalar(0.5))),
            od: Some(t.leaf(Tensor::scalar(0.25))),
            cd: Some(t.leaf(Tensor::scalar(0.125))),
            scd: Some(t.leaf(Tensor::scalar(1.0))),
            cu: Some(t.leaf(Tensor::scalar(cu))),
            kl_bad: Some(t.leaf(Tensor::scalar(2.0))),
        };
        let run = |mode, u, cu| {
            eval(|t| {
                let c = build(t, cu);
                combined_objective(t, mode, u, &c, &w)
            })
            .unwrap()
        };
        assert_eq!(run(ObjectiveMode::PaperEq11, Ulabel::Learn, 3.0), 0.5 + 0.25 + 0.125 + 1.0);
        assert_eq!(run(ObjectiveMode::PaperEq11, Ulabel::Unlearn, 3.0), 3.0);
        assert_eq!(run(ObjectiveMode::Algorithm1, Ulabel::Unlearn, 3.0), 2.0 + 0.25 + 0.125 + 1.0);
        // learning objective ignores the unlearning component and vice versa
        assert_eq!(
            run(ObjectiveMode::PaperEq11, Ulabel::Learn, 3.0),
            run(ObjectiveMode::PaperEq11, Ulabel::Learn, 9.0)
        );
        let missing =
            eval(|t| combined_objective(t, ObjectiveMode::PaperEq11, Ulabel::Unlearn, &Components::default(), &w));
        assert_eq!(missing.unwrap_err(), LossError::MissingComponent("cu"));
        let empty_buffer = eval(|t| {
            let c = Components { ce: Some(t.leaf(Tensor::scalar(0.5))), ..Default::default() };
            combined_objective(t, ObjectiveMode::Algorithm1, Ulabel::Learn, &c, &w)
        });
        assert_eq!(empty_buffer.unwrap(), 0.5);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { tau: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { alpha2: -0.1, ..Default::default() }.validate().is_err());
    }
}
