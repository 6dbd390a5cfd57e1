//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every primitive appends one node holding its result and the indices of
//! its operands, so the node list is topologically ordered by
//! construction. [`Tape::backward`] walks it in reverse and accumulates
//! gradients into each node that can reach a parameter.
//!
//! ```
//! use disco_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param("x", &Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Named parameter arrays. Ordered so iteration (and everything derived
/// from it: checkpoints, optimizer updates) is deterministic.
pub type Params = BTreeMap<String, Tensor>;

/// Gradient per parameter name, shape-matched to the parameter.
pub type Gradients = BTreeMap<String, Tensor>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBroadcast(usize, usize),
    RowNorms(usize),
    DivRows(usize, usize),
    RowLogSumExp(usize),
    SoftmaxRows(usize),
    PickCols(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SegmentMean(usize, Vec<Vec<usize>>),
    MeanRows(usize),
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddRowBroadcast(a, b)
            | DivRows(a, b) => vec![*a, *b],
            Scale(a, _) | Exp(a) | Ln(a) | Tanh(a) | Sum(a) | Mean(a) | L2Norm(a) | Transpose(a)
            | RowNorms(a) | RowLogSumExp(a) | SoftmaxRows(a) | PickCols(a, _) | GatherRows(a, _)
            | SegmentMean(a, _) | MeanRows(a) => vec![*a],
            ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// A single-run recording of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable tensor under `name`.
    pub fn param(&self, name: &str, value: &Tensor) -> Result<Var> {
        if self.nodes.borrow().iter().any(|n| n.param.as_deref() == Some(name)) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        Ok(self.push_node(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(name.to_string()),
        }))
    }

    /// Registers every entry of `params`, trainable or not.
    pub fn bind(&self, params: &Params, trainable: bool) -> Result<BTreeMap<String, Var>> {
        params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(name, t)?
                } else {
                    self.constant(t.clone())
                };
                Ok((name.clone(), v))
            })
            .collect()
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        })
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.idx].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.idx].value.shape().to_vec())
    }

    /// Scalar value of a `[1]` node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let t = self.value(v)?;
        t.item().ok_or_else(|| Error::NotScalar(t.shape().to_vec()))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.borrow().len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn record(
        &self,
        op_name: &'static str,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor]) -> Result<Tensor>,
        op: impl FnOnce(&[usize]) -> Op,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.idx].value).collect();
            let value = forward(&vals)?;
            (value, inputs.iter().any(|v| nodes[v.idx].needs_grad))
        };
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.idx).collect();
        Ok(self.push_node(Node {
            value,
            op: op(&idx),
            needs_grad,
            param: None,
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.record("add", &[a, b], |v| tensor::add(v[0], v[1]), |i| Op::Add(i[0], i[1]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.record("sub", &[a, b], |v| tensor::sub(v[0], v[1]), |i| Op::Sub(i[0], i[1]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.record("mul", &[a, b], |v| tensor::mul(v[0], v[1]), |i| Op::Mul(i[0], i[1]))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.record("div", &[a, b], |v| tensor::div(v[0], v[1]), |i| Op::Div(i[0], i[1]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.record("scale", &[a], |v| Ok(tensor::scale(v[0], c)), |i| Op::Scale(i[0], c))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.record("exp", &[a], |v| Ok(tensor::exp(v[0])), |i| Op::Exp(i[0]))
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.record("ln", &[a], |v| tensor::ln(v[0]), |i| Op::Ln(i[0]))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.record("tanh", &[a], |v| Ok(tensor::tanh(v[0])), |i| Op::Tanh(i[0]))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.record("sum", &[a], |v| Ok(tensor::sum(v[0])), |i| Op::Sum(i[0]))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.record("mean", &[a], |v| Ok(tensor::mean(v[0])), |i| Op::Mean(i[0]))
    }

    pub fn l2norm(&self, a: Var) -> Result<Var> {
        self.record("l2norm", &[a], |v| Ok(tensor::l2norm(v[0])), |i| Op::L2Norm(i[0]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.record("matmul", &[a, b], |v| tensor::matmul(v[0], v[1]), |i| Op::MatMul(i[0], i[1]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.record("transpose", &[a], |v| tensor::transpose(v[0]), |i| Op::Transpose(i[0]))
    }

    pub fn add_row_broadcast(&self, x: Var, v: Var) -> Result<Var> {
        self.record(
            "add_row_broadcast",
            &[x, v],
            |t| tensor::add_row_broadcast(t[0], t[1]),
            |i| Op::AddRowBroadcast(i[0], i[1]),
        )
    }

    pub fn row_norms(&self, x: Var) -> Result<Var> {
        self.record("row_norms", &[x], |v| tensor::row_norms(v[0]), |i| Op::RowNorms(i[0]))
    }

    pub fn div_rows(&self, x: Var, s: Var) -> Result<Var> {
        self.record("div_rows", &[x, s], |v| tensor::div_rows(v[0], v[1]), |i| Op::DivRows(i[0], i[1]))
    }

    pub fn row_logsumexp(&self, x: Var) -> Result<Var> {
        self.record("row_logsumexp", &[x], |v| tensor::row_logsumexp(v[0]), |i| Op::RowLogSumExp(i[0]))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        self.record("softmax_rows", &[x], |v| tensor::softmax_rows(v[0]), |i| Op::SoftmaxRows(i[0]))
    }

    pub fn pick_cols(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let owned = cols.to_vec();
        self.record("pick_cols", &[x], |v| tensor::pick_cols(v[0], cols), |i| Op::PickCols(i[0], owned))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.record("concat_rows", parts, tensor::concat_rows, |i| Op::ConcatRows(i.to_vec()))
    }

    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let owned = ids.to_vec();
        self.record("gather_rows", &[table], |v| tensor::gather_rows(v[0], ids), |i| Op::GatherRows(i[0], owned))
    }

    pub fn segment_mean(&self, table: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let owned = segments.to_vec();
        self.record(
            "segment_mean",
            &[table],
            |v| tensor::segment_mean(v[0], segments),
            |i| Op::SegmentMean(i[0], owned),
        )
    }

    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        self.record("mean_rows", &[x], |v| tensor::mean_rows(v[0]), |i| Op::MeanRows(i[0]))
    }

    /// Scales every row of `[n, d]` to unit length.
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        let norms = self.row_norms(x)?;
        self.div_rows(x, norms)
    }

    /// Gradients of a `[1]`-shaped `loss` with respect to every parameter
    /// registered on this tape. Parameters the loss does not depend on get
    /// an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.idx].value.shape();
        if loss_shape != [1] {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = backward_rule(&nodes, node, &g)?;
            for (operand, contrib) in node.op.operands().into_iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !nodes[operand].needs_grad {
                    continue;
                }
                match &mut grads[operand] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if node.param.is_some() {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (idx, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Per-operand gradient contributions for one node, in operand order.
/// `None` marks an operand that cannot receive gradient through this op.
fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    let shaped = |like: &Tensor, data: Vec<f64>| Tensor::from_parts(like.shape().to_vec(), data);

    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub(_, _) => vec![Some(g.clone()), Some(tensor::scale(g, -1.0))],
        Op::Mul(a, b) => vec![Some(tensor::mul(g, val(*b))?), Some(tensor::mul(g, val(*a))?)],
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = tensor::div(g, bv)?;
            let gb = g
                .data()
                .iter()
                .zip(av.data())
                .zip(bv.data())
                .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                .collect();
            vec![Some(ga), Some(shaped(bv, gb))]
        }
        Op::Scale(_, c) => vec![Some(tensor::scale(g, *c))],
        Op::Exp(_) => vec![Some(tensor::mul(g, out)?)],
        Op::Ln(a) => vec![Some(tensor::div(g, val(*a))?)],
        Op::Tanh(_) => {
            let d = g.data().iter().zip(out.data()).map(|(&gi, &y)| gi * (1.0 - y * y)).collect();
            vec![Some(shaped(out, d))]
        }
        Op::Sum(a) => {
            let av = val(*a);
            vec![Some(shaped(av, vec![g.data()[0]; av.len()]))]
        }
        Op::Mean(a) => {
            let av = val(*a);
            vec![Some(shaped(av, vec![g.data()[0] / av.len() as f64; av.len()]))]
        }
        Op::L2Norm(a) => {
            let av = val(*a);
            let norm = out.data()[0];
            let d = if norm == 0.0 {
                vec![0.0; av.len()]
            } else {
                av.data().iter().map(|&x| g.data()[0] * x / norm).collect()
            };
            vec![Some(shaped(av, d))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if bv.shape().len() == 1 {
                // a: [m, k], b: [k], g: [m]
                let (m, k) = (av.rows(), av.cols());
                let gcol = g.clone().reshaped(vec![m, 1]);
                let ga = tensor::matmul(&gcol, &bv.clone().reshaped(vec![1, k]))?;
                let gb = tensor::matmul(&tensor::transpose(av)?, g)?;
                vec![Some(ga), Some(gb)]
            } else {
                let ga = tensor::matmul(g, &tensor::transpose(bv)?)?;
                let gb = tensor::matmul(&tensor::transpose(av)?, g)?;
                vec![Some(ga), Some(gb)]
            }
        }
        Op::Transpose(_) => vec![Some(tensor::transpose(g)?)],
        Op::AddRowBroadcast(_, v) => {
            let d = val(*v).len();
            let mut gv = vec![0.0; d];
            for row in g.row_iter() {
                for (o, x) in gv.iter_mut().zip(row) {
                    *o += x;
                }
            }
            vec![Some(g.clone()), Some(shaped(val(*v), gv))]
        }
        Op::RowNorms(x) => {
            let xv = val(*x);
            let d = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            for (i, (row, norm)) in xv.row_iter().zip(out.data()).enumerate() {
                if *norm == 0.0 {
                    continue;
                }
                let s = g.data()[i] / norm;
                for (o, x) in gx[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o = s * x;
                }
            }
            vec![Some(shaped(xv, gx))]
        }
        Op::DivRows(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let d = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            let mut gs = vec![0.0; sv.len()];
            for i in 0..xv.rows() {
                let si = sv.data()[i];
                let grow = g.row(i);
                let xrow = xv.row(i);
                let mut acc = 0.0;
                for j in 0..d {
                    gx[i * d + j] = grow[j] / si;
                    acc += grow[j] * xrow[j];
                }
                gs[i] = -acc / (si * si);
            }
            vec![Some(shaped(xv, gx)), Some(shaped(sv, gs))]
        }
        Op::RowLogSumExp(x) => {
            let sm = tensor::softmax_rows(val(*x))?;
            let m = sm.cols();
            let mut d = sm.into_data();
            for (i, row) in d.chunks_mut(m).enumerate() {
                let gi = g.data()[i];
                row.iter_mut().for_each(|p| *p *= gi);
            }
            vec![Some(shaped(val(*x), d))]
        }
        Op::SoftmaxRows(_) => {
            let m = out.cols();
            let mut d = vec![0.0; out.len()];
            for i in 0..out.rows() {
                let y = out.row(i);
                let gr = g.row(i);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    d[i * m + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![Some(shaped(out, d))]
        }
        Op::PickCols(x, cols) => {
            let xv = val(*x);
            let m = xv.cols();
            let mut d = vec![0.0; xv.len()];
            for (i, &c) in cols.iter().enumerate() {
                d[i * m + c] = g.data()[i];
            }
            vec![Some(shaped(xv, d))]
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let pv = val(p);
                    let slice = g.data()[offset..offset + pv.len()].to_vec();
                    offset += pv.len();
                    Some(shaped(pv, slice))
                })
                .collect()
        }
        Op::GatherRows(t, ids) => {
            let tv = val(*t);
            let d = tv.cols();
            let mut gt = vec![0.0; tv.len()];
            for (row, &id) in g.row_iter().zip(ids) {
                for (o, x) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *o += x;
                }
            }
            vec![Some(shaped(tv, gt))]
        }
        Op::SegmentMean(t, segments) => {
            let tv = val(*t);
            let d = tv.cols();
            let mut gt = vec![0.0; tv.len()];
            for (row, seg) in g.row_iter().zip(segments) {
                let inv = 1.0 / seg.len() as f64;
                for &id in seg {
                    for (o, x) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *o += x * inv;
                    }
                }
            }
            vec![Some(shaped(tv, gt))]
        }
        Op::MeanRows(x) => {
            let xv = val(*x);
            let n = xv.rows() as f64;
            let mut d = Vec::with_capacity(xv.len());
            for _ in 0..xv.rows() {
                d.extend(g.data().iter().map(|v| v / n));
            }
            vec![Some(shaped(xv, d))]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param("x", &Tensor::matrix(2, 3, vec![0.5; 6]).unwrap()).unwrap();
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["x"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_sum_gradient_is_2x() {
        let tape = Tape::new();
        let x = tape.param("x", &vec_t(&[1.0, 2.0, 3.0])).unwrap();
        let loss = tape.sum(tape.mul(x, x).unwrap()).unwrap();
        assert_eq!(tape.backward(loss).unwrap()["x"].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let tape = Tape::new();
        let x = tape.param("x", &vec_t(&[4.0, -1.0, 0.0, 9.0])).unwrap();
        let loss = tape.mean(x).unwrap();
        assert_eq!(tape.backward(loss).unwrap()["x"].data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param("x", &vec_t(&[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.param("x", &vec_t(&[1.0])).unwrap();
        assert!(matches!(b.sum(x), Err(Error::ForeignVar)));
        assert!(matches!(b.backward(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn constants_receive_no_gradient_and_unused_params_get_zeros() {
        let tape = Tape::new();
        let x = tape.param("x", &vec_t(&[1.0, 2.0])).unwrap();
        tape.param("unused", &vec_t(&[7.0])).unwrap();
        let c = tape.constant(vec_t(&[3.0, 4.0]));
        let loss = tape.sum(tape.mul(x, c).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["x"].data(), &[3.0, 4.0]);
        assert_eq!(g["unused"].data(), &[0.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn duplicate_param_rejected() {
        let tape = Tape::new();
        tape.param("w", &vec_t(&[1.0])).unwrap();
        assert!(matches!(tape.param("w", &vec_t(&[1.0])), Err(Error::DuplicateParam(_))));
    }

    #[test]
    fn reused_operand_accumulates() {
        // loss = sum(x + x + x) -> grad 3
        let tape = Tape::new();
        let x = tape.param("x", &vec_t(&[1.0, -1.0])).unwrap();
        let y = tape.add(tape.add(x, x).unwrap(), x).unwrap();
        let g = tape.backward(tape.sum(y).unwrap()).unwrap();
        assert_eq!(g["x"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn forward_errors_propagate() {
        let tape = Tape::new();
        let x = tape.param("x", &vec_t(&[0.0, 1.0])).unwrap();
        assert!(tape.ln(x).is_err());
        let y = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(x, y), Err(Error::Shape { .. })));
    }
}
