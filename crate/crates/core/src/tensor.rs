//! Dense row-major `f64` tensors and the forward half of every primitive.
//!
//! Each function here is pure. The [`Tape`](crate::tape::Tape) calls into
//! these for its forward pass and records a backward rule next to the
//! result, so the eager and recorded paths can never disagree.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "bad shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into an `[rows, dim]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Invalid("cannot stack zero rows".into()));
        };
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::shape("from_rows", &[dim], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), dim, data)
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

    /// Value of a `[1]`-shaped tensor.
    pub fn item(&self) -> Option<f64> {
        (self.shape == [1]).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing size of a matrix, 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::domain(op, format!("expected a matrix, got shape {other:?}"))),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "mul", |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("div", a.shape(), b.shape()));
    }
    if b.data().contains(&0.0) {
        return Err(Error::domain("div", "division by zero"));
    }
    a.zip_with(b, "div", |x, y| x / y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn ln(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::domain("ln", "logarithm of a non-positive value"));
    }
    Ok(a.map(f64::ln))
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
}

pub fn l2norm(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `[m, k] x [k, n] -> [m, n]`. A rank-1 right operand is treated as a
/// column and the result is a vector.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n, vector_rhs) = match b.shape() {
        [k2] => (*k2, 1, true),
        [k2, n] => (*k2, *n, false),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let shape = if vector_rhs { vec![m] } else { vec![m, n] };
    Ok(Tensor::from_parts(shape, out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_matrix("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Adds a `[d]` vector to every row of an `[n, d]` batch.
pub fn add_row_broadcast(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = require_matrix("add_row_broadcast", x)?;
    if v.shape() != [d] {
        return Err(Error::shape("add_row_broadcast", x.shape(), v.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (o, b) in row.iter_mut().zip(v.data()) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Euclidean norm of every row: `[n, d] -> [n]`.
pub fn row_norms(x: &Tensor) -> Result<Tensor> {
    require_matrix("row_norms", x)?;
    let out = x
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect::<Vec<_>>();
    Ok(Tensor::from_parts(vec![out.len()], out))
}

/// Divides row `i` of `[n, d]` by `s[i]`.
pub fn div_rows(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, d) = require_matrix("div_rows", x)?;
    if s.shape() != [n] {
        return Err(Error::shape("div_rows", x.shape(), s.shape()));
    }
    if s.data().contains(&0.0) {
        return Err(Error::domain("div_rows", "division by a zero row scale"));
    }
    let mut out = x.data().to_vec();
    for (row, &sv) in out.chunks_mut(d).zip(s.data()) {
        for o in row {
            *o /= sv;
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Numerically stable `log(sum(exp(row)))` per row: `[n, m] -> [n]`.
pub fn row_logsumexp(x: &Tensor) -> Result<Tensor> {
    require_matrix("row_logsumexp", x)?;
    let out = x.row_iter().map(logsumexp).collect::<Vec<_>>();
    Ok(Tensor::from_parts(vec![out.len()], out))
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, m) = require_matrix("softmax_rows", x)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.row_iter() {
        let lse = logsumexp(row);
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Ok(Tensor::from_parts(vec![x.rows(), m], out))
}

/// `out[i] = x[i, cols[i]]`.
pub fn pick_cols(x: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (n, m) = require_matrix("pick_cols", x)?;
    if cols.len() != n {
        return Err(Error::shape("pick_cols", x.shape(), &[cols.len()]));
    }
    if let Some(&c) = cols.iter().find(|&&c| c >= m) {
        return Err(Error::domain("pick_cols", format!("column {c} out of range for width {m}")));
    }
    let out = cols.iter().enumerate().map(|(i, &c)| x.data()[i * m + c]).collect::<Vec<_>>();
    Ok(Tensor::from_parts(vec![n], out))
}

/// Stacks matrices with a common width on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::Invalid("concat_rows needs at least one operand".into()));
    };
    let (_, d) = require_matrix("concat_rows", first)?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = require_matrix("concat_rows", p)?;
        if c != d {
            return Err(Error::shape("concat_rows", first.shape(), p.shape()));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, d], data))
}

/// Row lookup into a `[V, d]` table.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = require_matrix("gather_rows", table)?;
    if ids.is_empty() {
        return Err(Error::Invalid("gather_rows needs at least one id".into()));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::domain("gather_rows", format!("id {id} out of range for {v} rows")));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], data))
}

/// Mean of the looked-up rows for each id segment: `[V, d] -> [segments, d]`.
pub fn segment_mean(table: &Tensor, segments: &[Vec<usize>]) -> Result<Tensor> {
    let (v, d) = require_matrix("segment_mean", table)?;
    if segments.is_empty() {
        return Err(Error::Invalid("segment_mean needs at least one segment".into()));
    }
    let mut data = vec![0.0; segments.len() * d];
    for (seg, out) in segments.iter().zip(data.chunks_mut(d)) {
        if seg.is_empty() {
            return Err(Error::domain("segment_mean", "empty segment"));
        }
        for &id in seg {
            if id >= v {
                return Err(Error::domain("segment_mean", format!("id {id} out of range for {v} rows")));
            }
            for (o, t) in out.iter_mut().zip(table.row(id)) {
                *o += t;
            }
        }
        let inv = 1.0 / seg.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(Tensor::from_parts(vec![segments.len(), d], data))
}

/// Column means: `[n, d] -> [1, d]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (n, d) = require_matrix("mean_rows", x)?;
    let mut out = vec![0.0; d];
    for row in x.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(Tensor::from_parts(vec![1, d], out))
}
