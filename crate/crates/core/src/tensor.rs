//! Dense `f64` tensors and a define-by-run tape for reverse-mode gradients.
//!
//! A [`Tape`] records every primitive as a node holding its forward value.
//! Leaves are created with [`Tape::leaf`]; everything that is a leaf gets a
//! gradient, so parameters and constants are handled the same way. Values
//! that must not receive gradient (teacher outputs) are simply computed on a
//! different tape and inserted as leaves whose gradient is ignored.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: row {row} has zero norm")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor. Scalars have shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Builds an `n x k` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * k);
        for r in rows {
            let r = r.as_ref();
            if r.len() != k {
                return Err(TensorError::ShapeMismatch { op: "from_rows", left: vec![k], right: vec![r.len()] });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(n, k, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.cols();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::NotMatrix { op, shape: self.shape.clone() });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_it * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is `m x k`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` where `a` is `n x k` and `b` is `n x m`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == 0.0 {
                continue;
            }
            let orow = &mut out[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_it * bv;
            }
        }
    }
    out
}

/// Row-wise log-softmax over the entries where `mask` is true (all when
/// `None`). Excluded entries are written as 0.
fn log_softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let k = x.cols();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let keep = |j: usize| mask.is_none_or(|m| m[i * k + j]);
        let max = (0..k).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let sum: f64 = (0..k).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
        let lse = max + sum.ln();
        for j in (0..k).filter(|&j| keep(j)) {
            out[i * k + j] = row[j] - lse;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

/// Plain (untaped) row-wise log-softmax.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    x.require_matrix("log_softmax")?;
    Ok(log_softmax_rows(x, None))
}

/// Plain (untaped) row-wise softmax.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.map(f64::exp))
}

/// Plain (untaped) row-wise L2 normalization.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (n, k) = x.require_matrix("l2_normalize")?;
    let mut out = x.data.clone();
    for i in 0..n {
        let row = &mut out[i * k..(i + 1) * k];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TensorError::DegenerateRow { op: "l2_normalize", row: i });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Relu { x: Var },
    LogSoftmax { x: Var, mask: Option<Vec<bool>> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Shift { x: Var },
    WeightedSum { x: Var, weights: Tensor },
    SliceRows { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications. Node inputs always precede
/// the node itself, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `x (n x d) * w (d x k) + b (k)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = xv.require_matrix("linear")?;
        let (d2, k) = wv.require_matrix("linear")?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch { op: "linear", left: xv.shape.clone(), right: wv.shape.clone() });
        }
        if bv.len() != k {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                left: wv.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let mut out = matmul(&xv.data, &wv.data, n, d, k);
        for row in out.chunks_mut(k) {
            for (o, &bj) in row.iter_mut().zip(&bv.data) {
                *o += bj;
            }
        }
        Ok(self.push(Tensor { shape: vec![n, k], data: out }, Op::Linear { x, w, b }))
    }

    /// `a (n x k) * b^T` with `b` of shape `m x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.require_matrix("matmul_nt")?;
        let (m, k2) = bv.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let out = matmul_nt(&av.data, &bv.data, n, k, m);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMulNt { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // written so that NaN passes through instead of being clipped to 0
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.value(x).require_matrix("log_softmax")?;
        let out = log_softmax_rows(self.value(x), None);
        Ok(self.push(out, Op::LogSoftmax { x, mask: None }))
    }

    /// Log-softmax restricted to entries with `mask == true`. Excluded
    /// entries have value 0 and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        xv.require_matrix("log_softmax_masked")?;
        if mask.len() != xv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax_masked",
                left: xv.shape.clone(),
                right: vec![mask.len()],
            });
        }
        let out = log_softmax_rows(xv, Some(&mask));
        Ok(self.push(out, Op::LogSoftmax { x, mask: Some(mask) }))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = xv.require_matrix("l2_normalize")?;
        let mut norms = Vec::with_capacity(n);
        let mut out = xv.data.clone();
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            // non-finite rows propagate so the loss check reports the divergence
            if norm == 0.0 {
                return Err(TensorError::DegenerateRow { op: "l2_normalize", row: i });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(Tensor { shape: vec![n, k], data: out }, Op::L2Normalize { x, norms }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale { x, k })
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Shift { x })
    }

    /// Scalar `sum(weights * x)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                left: xv.shape.clone(),
                right: weights.shape.clone(),
            });
        }
        let s = xv.data.iter().zip(&weights.data).map(|(a, w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ones = Tensor::filled(self.value(x).shape(), 1.0);
        self.weighted_sum(x, ones).expect("shapes agree by construction")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = xv.require_matrix("slice_rows")?;
        if start >= end || end > n {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of bounds for {n} rows"),
            });
        }
        let out = Tensor { shape: vec![end - start, k], data: xv.data[start * k..end * k].to_vec() };
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Reverse sweep from a scalar node. Fan-out gradients are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, d) = (xv.shape[0], xv.shape[1]);
                    let k = wv.shape[1];
                    // dx = g W^T, dW = x^T g, db = column sums of g
                    let dx = matmul_nt(&g.data, &wv.data, n, k, d);
                    let dw = matmul_tn(&xv.data, &g.data, n, d, k);
                    let mut db = vec![0.0; k];
                    for row in g.data.chunks(k) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    let bshape = self.value(*b).shape.clone();
                    acc(*x, Tensor { shape: vec![n, d], data: dx });
                    acc(*w, Tensor { shape: vec![d, k], data: dw });
                    acc(*b, Tensor { shape: bshape, data: db });
                }
                Op::MatMulNt { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k) = (av.shape[0], av.shape[1]);
                    let m = bv.shape[0];
                    // C = A B^T: dA = G B, dB = G^T A
                    let da = matmul(&g.data, &bv.data, n, m, k);
                    let db = matmul_tn(&g.data, &av.data, n, m, k);
                    acc(*a, Tensor { shape: vec![n, k], data: da });
                    acc(*b, Tensor { shape: vec![m, k], data: db });
                }
                Op::Relu { x } => {
                    let dx = self.value(*x).zip(&g, |v, gv| if v > 0.0 { gv } else { 0.0 });
                    acc(*x, dx);
                }
                Op::LogSoftmax { x, mask } => {
                    let y = &node.value;
                    let k = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * k + j]);
                        let gsum: f64 = (0..k).filter(|&j| keep(j)).map(|j| g.data[i * k + j]).sum();
                        for j in (0..k).filter(|&j| keep(j)) {
                            let p = y.data[i * k + j].exp();
                            dx[i * k + j] = g.data[i * k + j] - p * gsum;
                        }
                    }
                    acc(*x, Tensor { shape: y.shape.clone(), data: dx });
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let k = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        let yr = &y.data[i * k..(i + 1) * k];
                        let gr = &g.data[i * k..(i + 1) * k];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dx[i * k + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    acc(*x, Tensor { shape: y.shape.clone(), data: dx });
                }
                Op::Add { a, b } => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub { a, b } => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g.clone());
                }
                Op::Mul { a, b } => {
                    let da = g.zip(self.value(*b), |gv, bv| gv * bv);
                    let db = g.zip(self.value(*a), |gv, av| gv * av);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale { x, k } => acc(*x, g.map(|v| v * k)),
                Op::Shift { x } => acc(*x, g.clone()),
                Op::WeightedSum { x, weights } => {
                    let gv = g.item();
                    let shape = self.value(*x).shape.clone();
                    acc(*x, Tensor { shape, data: weights.data.iter().map(|w| w * gv).collect() });
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let k = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * k..start * k + g.len()].copy_from_slice(&g.data);
                    acc(*x, Tensor { shape: xv.shape.clone(), data: dx });
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one scalar with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` does not reach
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Compares tape gradients of `f` at `params` against central differences
/// and returns `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid { op: "grad_check", msg: format!("eps must be positive, got {eps}") });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, (var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(*var, p);
        for j in 0..p.len() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
