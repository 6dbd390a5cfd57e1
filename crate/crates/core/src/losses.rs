//! Distillation and contrastive objectives.
//!
//! All three losses are built from tape primitives so the same
//! finite-difference harness verifies them, projection included.
//!
//! * [`kd_mse_loss`]: sum over the batch of the per-pair mean squared
//!   error between (optionally projected) student and teacher embeddings.
//! * [`ckd_loss`]: InfoNCE where student embedding `i` must pick out
//!   teacher embedding `i` among the in-batch teacher embeddings plus the
//!   memory bank contents. Mean over anchors.
//! * [`supervised_cl_loss`]: InfoNCE over student-encoded triplets, with
//!   every positive and every hard negative in the batch as candidates.
//!   Mean over anchors.

use crate::bank::MemoryBank;
use crate::encoder::project;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::Invalid(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine", "degenerate embedding with zero norm"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn matrix_shape(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    match tape.shape(v)?.as_slice() {
        [n, d] => Ok((*n, *d)),
        other => Err(Error::Invalid(format!(
            "{what} must be an [n, d] embedding batch, got {other:?}"
        ))),
    }
}

/// Re-enters a value as a constant so nothing upstream of it can receive
/// gradient.
fn detach(tape: &Tape, v: Var) -> Result<Var> {
    Ok(tape.constant(tape.value(v)?))
}

fn student_side(tape: &Tape, hs: Var, projection: Option<Var>) -> Result<Var> {
    match projection {
        Some(m) => project(tape, hs, m),
        None => Ok(hs),
    }
}

/// Sum over pairs of the per-dimension mean squared error.
pub fn kd_mse_loss(tape: &Tape, hs: Var, ht: Var, projection: Option<Var>) -> Result<Var> {
    let (ns, _) = matrix_shape(tape, hs, "student batch")?;
    let (nt, dt) = matrix_shape(tape, ht, "teacher batch")?;
    if ns != nt {
        return Err(Error::Invalid(format!(
            "student batch has {ns} embeddings, teacher batch has {nt}"
        )));
    }
    let student = student_side(tape, hs, projection)?;
    let ht = detach(tape, ht)?;
    let diff = tape.sub(student, ht)?;
    let sq = tape.sum(tape.mul(diff, diff)?)?;
    tape.scale(sq, 1.0 / dt as f64)
}

/// InfoNCE of each anchor's cosine logits against its positive column,
/// averaged over anchors. `candidates` rows are the logits' columns and
/// anchor `i`'s positive is column `i`.
fn info_nce(tape: &Tape, anchors: Var, candidates: Var, tau: Temperature) -> Result<Var> {
    let (n, _) = matrix_shape(tape, anchors, "anchors")?;
    let a = tape.normalize_rows(anchors)?;
    let c = tape.normalize_rows(candidates)?;
    let sims = tape.matmul(a, tape.transpose(c)?)?;
    let logits = tape.scale(sims, 1.0 / tau.value())?;
    let lse = tape.row_logsumexp(logits)?;
    let diag: Vec<usize> = (0..n).collect();
    let pos = tape.pick_cols(logits, &diag)?;
    tape.mean(tape.sub(lse, pos)?)
}

/// Contrastive distillation with memory-bank negatives. Teacher
/// embeddings and bank entries are constants.
pub fn ckd_loss(
    tape: &Tape,
    hs: Var,
    ht: Var,
    bank: &MemoryBank,
    tau: Temperature,
    projection: Option<Var>,
) -> Result<Var> {
    let (ns, _) = matrix_shape(tape, hs, "student batch")?;
    let (nt, dt) = matrix_shape(tape, ht, "teacher batch")?;
    if ns != nt {
        return Err(Error::Invalid(format!(
            "student batch has {ns} embeddings, teacher batch has {nt}"
        )));
    }
    if bank.dim() != dt {
        return Err(Error::shape("ckd_loss", &[nt, dt], &[bank.fill(), bank.dim()]));
    }
    let student = student_side(tape, hs, projection)?;
    let teacher = detach(tape, ht)?;
    let candidates = match bank.to_tensor() {
        Some(stored) => {
            let stored = tape.constant(stored);
            tape.concat_rows(&[teacher, stored])?
        }
        None => teacher,
    };
    info_nce(tape, student, candidates, tau)
}

/// Supervised contrastive loss over `(anchor, positive, negative)` batches,
/// all produced by the student.
pub fn supervised_cl_loss(
    tape: &Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    tau: Temperature,
) -> Result<Var> {
    let a = matrix_shape(tape, anchors, "anchors")?;
    let p = matrix_shape(tape, positives, "positives")?;
    let n = matrix_shape(tape, negatives, "negatives")?;
    if a != p || a != n {
        return Err(Error::Invalid(format!(
            "triplet batches disagree: anchors {a:?}, positives {p:?}, negatives {n:?}"
        )));
    }
    let candidates = tape.concat_rows(&[positives, negatives])?;
    info_nce(tape, anchors, candidates, tau)
}
