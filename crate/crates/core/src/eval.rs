//! Per-class accuracy tables and the buffer-size trade-off model.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::Sample;
use crate::model::{ModelError, TriNet};
use crate::tensor::Tensor;

pub use crate::experiment::retrain_oracle;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected {expected} accuracies, got {got}")]
    Width { expected: usize, got: usize },
    #[error("accuracy {0} is outside [0, 100]")]
    Range(f64),
    #[error("fit needs at least 3 distinct N values, got {0}")]
    TooFewPoints(usize),
    #[error("invalid trade-off input: {0}")]
    Input(String),
    #[error("matrix table line {line}: {msg}")]
    Table { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of correctly classified test samples per class. Classes in
/// `masked` are excluded from the argmax. Classes with no test samples are
/// `None`.
pub fn per_class_accuracy(net: &TriNet, test: &[Sample], masked: &BTreeSet<usize>) -> Result<Vec<Option<f64>>> {
    let c = net.config().num_classes;
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    if !test.is_empty() {
        let x =
            Tensor::from_rows(&test.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>()).map_err(ModelError::from)?;
        let logits = net.classify(&x)?;
        for (i, s) in test.iter().enumerate() {
            if s.y >= c {
                return Err(EvalError::Input(format!("test label {} outside {c} classes", s.y)));
            }
            let mut row = logits.row(i).to_vec();
            for &m in masked {
                if m < c {
                    row[m] = f64::NEG_INFINITY;
                }
            }
            total[s.y] += 1;
            if argmax(&row) == s.y {
                correct[s.y] += 1;
            }
        }
    }
    Ok((0..c).map(|k| (total[k] > 0).then(|| 100.0 * correct[k] as f64 / total[k] as f64)).collect())
}

/// Mean of the present cells among `classes`, if any.
pub fn mean_over(acc: &[Option<f64>], classes: &BTreeSet<usize>) -> Option<f64> {
    let vals: Vec<f64> = classes.iter().filter_map(|&c| acc.get(c).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub accuracies: Vec<Option<f64>>,
}

/// One row of per-class accuracies (percent) per processed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_classes: usize,
    rows: Vec<MatrixRow>,
}

impl AccuracyMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, rows: Vec::new() }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> &[MatrixRow] {
        &self.rows
    }

    pub fn record_row(&mut self, label: impl Into<String>, accuracies: Vec<Option<f64>>) -> Result<()> {
        if accuracies.len() != self.num_classes {
            return Err(EvalError::Width { expected: self.num_classes, got: accuracies.len() });
        }
        if let Some(bad) = accuracies.iter().flatten().find(|a| !(0.0..=100.0).contains(*a)) {
            return Err(EvalError::Range(*bad));
        }
        self.rows.push(MatrixRow { label: label.into(), accuracies });
        Ok(())
    }

    /// `request,C0,...` header, then one line per request with cells to one
    /// decimal place; absent cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("request");
        for c in 0..self.num_classes {
            let _ = write!(s, ",C{c}");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.label);
            for a in &row.accuracies {
                match a {
                    Some(v) => {
                        let _ = write!(s, ",{v:.1}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`AccuracyMatrix::to_csv`] output (cells keep one decimal).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(EvalError::Table { line: 1, msg: "empty table".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"request") || cols[1..].iter().enumerate().any(|(i, c)| *c != format!("C{i}")) {
            return Err(EvalError::Table { line: 1, msg: format!("bad header '{header}'") });
        }
        let mut m = Self::new(cols.len() - 1);
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| EvalError::Table { line: i + 1, msg };
            let mut cells = line.split(',');
            let label = cells.next().unwrap_or_default().to_string();
            let accs =
                cells
                    .map(|c| {
                        if c.is_empty() {
                            Ok(None)
                        } else {
                            c.parse::<f64>().map(Some).map_err(|e| bad(e.to_string()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
            m.record_row(label, accs).map_err(|e| bad(e.to_string()))?;
        }
        Ok(m)
    }
}

/// `α ln N`.
pub fn p_cl(n: f64, alpha: f64) -> f64 {
    alpha * n.ln()
}

/// `1 − β / N`.
pub fn e_ul(n: f64, beta: f64) -> f64 {
    1.0 - beta / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffModel {
    pub alpha: f64,
    pub beta: f64,
}

pub fn total_performance(n: f64, model: &TradeoffModel) -> f64 {
    p_cl(n, model.alpha) * e_ul(n, model.beta)
}

/// `d/dN [α ln N (1 − β/N)] = α [(1 − β/N)/N + β ln N / N²]`.
pub fn total_performance_derivative(n: f64, model: &TradeoffModel) -> f64 {
    model.alpha * ((1.0 - model.beta / n) / n + model.beta * n.ln() / (n * n))
}

/// The single zero of the derivative on `N > 1`, i.e. the root of
/// `N − β + β ln N = 0`. It lies in `(1, β)` for `β > 1` and is a minimum:
/// the product is negative between 1 and β and grows without bound past β.
pub fn stationary_point(beta: f64) -> Result<f64> {
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(EvalError::Input(format!("stationary point needs beta > 1, got {beta}")));
    }
    let g = |n: f64| n - beta + beta * n.ln();
    let (mut lo, mut hi) = (1.0, beta);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffFit {
    pub model: TradeoffModel,
    pub rss: f64,
    /// Measurements carry no usable signal (flat or non-positive trend); the
    /// reported model then has `alpha = 0`.
    pub degenerate: bool,
}

const BETA_MIN: f64 = 1e-6;
const BETA_MAX: f64 = 1e6;

/// Least-squares fit of `α ln N (1 − β/N)`. For fixed β the optimal α is
/// closed-form, so only β is searched: a log-spaced grid, then repeated
/// zooming around the best grid point on a fixed schedule.
pub fn fit_tradeoff(points: &[(f64, f64)]) -> Result<TradeoffFit> {
    if let Some(&(n, y)) = points.iter().find(|(n, y)| !(n.is_finite() && *n >= 1.0 && y.is_finite())) {
        return Err(EvalError::Input(format!("point ({n}, {y}) needs finite N >= 1 and a finite measurement")));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EvalError::TooFewPoints(distinct.len()));
    }

    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let spread = points.iter().map(|p| (p.1 - mean).abs()).fold(0.0, f64::max);
    let flat_rss = || points.iter().map(|p| p.1 * p.1).sum::<f64>();
    if spread <= 1e-12 * mean.abs().max(1.0) {
        return Ok(TradeoffFit { model: TradeoffModel { alpha: 0.0, beta: 1.0 }, rss: flat_rss(), degenerate: true });
    }

    // profile: best α ≥ 0 for a given β, and its residual
    let profile = |beta: f64| -> (f64, f64) {
        let g: Vec<f64> = points.iter().map(|&(n, _)| n.ln() * (1.0 - beta / n)).collect();
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let gy: f64 = g.iter().zip(points).map(|(gv, p)| gv * p.1).sum();
        let alpha = if gg > 0.0 { (gy / gg).max(0.0) } else { 0.0 };
        let rss = g.iter().zip(points).map(|(gv, p)| (alpha * gv - p.1).powi(2)).sum();
        (alpha, rss)
    };

    let (lo, hi) = (BETA_MIN.ln(), BETA_MAX.ln());
    let coarse = 481;
    let mut best = (lo, f64::INFINITY);
    for i in 0..coarse {
        let t = lo + (hi - lo) * i as f64 / (coarse - 1) as f64;
        let rss = profile(t.exp()).1;
        if rss < best.1 {
            best = (t, rss);
        }
    }
    let mut step = (hi - lo) / (coarse - 1) as f64;
    for _ in 0..80 {
        let centre = best.0;
        for k in -10..=10 {
            let t = (centre + step * k as f64 / 10.0).clamp(lo, hi);
            let rss = profile(t.exp()).1;
            if rss < best.1 {
                best = (t, rss);
            }
        }
        step /= 5.0;
    }
    let beta = best.0.exp();
    let (alpha, rss) = profile(beta);
    let degenerate = alpha <= 1e-12;
    Ok(TradeoffFit { model: TradeoffModel { alpha, beta }, rss, degenerate })
}

/// `N,total_performance` lines on an evenly spaced grid.
pub fn tradeoff_series(model: &TradeoffModel, n_min: f64, n_max: f64, points: usize) -> String {
    let mut s = String::from("N,total_performance\n");
    let points = points.max(2);
    for i in 0..points {
        let n = n_min + (n_max - n_min) * i as f64 / (points - 1) as f64;
        // `+ 0.0` turns a negative zero into a plain one
        let _ = writeln!(s, "{n},{}", total_performance(n, model) + 0.0);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, NetConfig};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    /// Identity features, logits = x, so argmax(x) is the prediction.
    fn identity_net(c: usize, bias: Vec<f64>) -> TriNet {
        let cfg = NetConfig { input_dim: c, hidden_dims: vec![c], num_classes: c, embed_dim: 2, init_seed: 0 };
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let id = |b: Vec<f64>| Layer {
            weight: Tensor::matrix(c, c, eye.clone()).unwrap(),
            bias: Tensor::vector(b).unwrap(),
        };
        let psi = Layer { weight: Tensor::zeros(&[c, 2]), bias: Tensor::vector(vec![1.0, 0.0]).unwrap() };
        TriNet::from_layers(cfg, vec![id(vec![0.0; c])], id(bias), psi).unwrap()
    }

    fn onehot(c: usize, k: usize) -> Sample {
        let mut x = vec![0.0; c];
        x[k] = 1.0;
        Sample::new(x, k)
    }

    #[test]
    fn accuracy_examples() {
        let test: Vec<Sample> = (0..3).flat_map(|k| vec![onehot(3, k); 4]).collect();
        let perfect = identity_net(3, vec![0.0; 3]);
        assert_eq!(per_class_accuracy(&perfect, &test, &BTreeSet::new()).unwrap(), vec![Some(100.0); 3]);

        let constant = identity_net(3, vec![10.0, 0.0, 0.0]);
        assert_eq!(
            per_class_accuracy(&constant, &test, &BTreeSet::new()).unwrap(),
            vec![Some(100.0), Some(0.0), Some(0.0)]
        );
        // masking class 0 hands the prediction to the next-best logit
        let masked = per_class_accuracy(&constant, &test, &BTreeSet::from([0])).unwrap();
        assert_eq!(masked, vec![Some(0.0), Some(100.0), Some(100.0)]);

        let only_one: Vec<Sample> = vec![onehot(3, 1)];
        assert_eq!(per_class_accuracy(&perfect, &only_one, &BTreeSet::new()).unwrap(), vec![None, Some(100.0), None]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn matrix_rows_and_csv() {
        let mut m = AccuracyMatrix::new(3);
        m.record_row("Learn T1", vec![Some(99.4), Some(99.25), Some(0.0)]).unwrap();
        m.record_row("Unlearn T1", vec![Some(0.0), None, Some(12.0)]).unwrap();
        assert_eq!(m.rows().len(), 2);
        assert_eq!(m.rows()[0].label, "Learn T1");
        let csv = m.to_csv();
        assert_eq!(csv, "request,C0,C1,C2\nLearn T1,99.4,99.2,0.0\nUnlearn T1,0.0,,12.0\n");
        let back = AccuracyMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert!(m.record_row("x", vec![Some(1.0)]).is_err());
        assert!(m.record_row("x", vec![Some(101.0), None, None]).is_err());
    }

    #[test]
    fn tradeoff_examples() {
        close(p_cl(1.0, 3.0), 0.0, 0.0);
        close(p_cl(std::f64::consts::E, 2.0), 2.0, 1e-15);
        close(p_cl(100.0, 1.0), 4.6052, 1e-4);
        assert_eq!(e_ul(10.0, 10.0), 0.0);
        close(e_ul(1000.0, 10.0), 0.99, 1e-15);
        close(e_ul(1e9, 10.0), 1.0, 1e-7);
        let m = TradeoffModel { alpha: 1.0, beta: 10.0 };
        assert_eq!(total_performance(10.0, &m), 0.0);
        assert_eq!(total_performance(1.0, &m), 0.0);
        close(total_performance(100.0, &m), 4.1447, 1e-4);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let m = TradeoffModel { alpha: 1.5, beta: 20.0 };
        for n in [1.5, 3.0, 20.0, 400.0] {
            let h = 1e-6;
            let fd = (total_performance(n + h, &m) - total_performance(n - h, &m)) / (2.0 * h);
            close(total_performance_derivative(n, &m), fd, 1e-6);
        }
    }

    #[test]
    fn stationary_point_is_the_grid_minimum() {
        let m = TradeoffModel { alpha: 1.5, beta: 20.0 };
        let n_star = stationary_point(m.beta).unwrap();
        close(total_performance_derivative(n_star, &m), 0.0, 1e-12);
        let step = 1e-3;
        let grid = (0..=((m.beta - 1.0) / step) as usize).map(|i| 1.0 + i as f64 * step);
        let argmin = grid.min_by(|a, b| total_performance(*a, &m).total_cmp(&total_performance(*b, &m))).unwrap();
        assert!((argmin - n_star).abs() <= step, "{argmin} vs {n_star}");
    }

    #[test]
    fn fit_recovers_planted_model() {
        let planted = TradeoffModel { alpha: 1.5, beta: 20.0 };
        let pts: Vec<(f64, f64)> =
            [25.0, 50.0, 100.0, 500.0, 2000.0].iter().map(|&n| (n, total_performance(n, &planted))).collect();
        let fit = fit_tradeoff(&pts).unwrap();
        close(fit.model.alpha, 1.5, 1e-4);
        close(fit.model.beta, 20.0, 1e-4);
        assert!(!fit.degenerate);
        assert_eq!(fit, fit_tradeoff(&pts).unwrap());
    }

    #[test]
    fn fit_edge_cases() {
        let flat = fit_tradeoff(&[(10.0, 5.0), (20.0, 5.0), (30.0, 5.0)]).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.model.alpha, 0.0);
        assert!(matches!(fit_tradeoff(&[(10.0, 1.0), (20.0, 2.0)]), Err(EvalError::TooFewPoints(2))));
        assert!(matches!(fit_tradeoff(&[(10.0, 1.0), (10.0, 2.0), (20.0, 2.0)]), Err(EvalError::TooFewPoints(2))));
    }

    #[test]
    fn series_export() {
        let s = tradeoff_series(&TradeoffModel { alpha: 1.0, beta: 10.0 }, 1.0, 10.0, 3);
        assert_eq!(s, "N,total_performance\n1,0\n5.5,-1.3947938936496205\n10,0\n");
    }
}
