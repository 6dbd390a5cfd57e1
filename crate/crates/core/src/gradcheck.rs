//! Central-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Params, Tape, Var};

/// Entries whose gradient magnitude falls below this are compared by
/// absolute rather than relative error.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error, or absolute error under the fallback.
    pub error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &EntryCheck> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.error.total_cmp(&b.error))
    }
}

fn compare(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Evaluates `loss_fn` once on a fresh tape with `params` registered as
/// trainable leaves.
pub fn evaluate<F>(loss_fn: &F, params: &Params) -> Result<(f64, Gradients)>
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = tape.bind(params, true)?;
    let loss = loss_fn(&tape, &vars)?;
    let value = tape.item(loss)?;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

fn value_at<F>(loss_fn: &F, params: &Params) -> Result<f64>
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = tape.bind(params, false)?;
    let loss = loss_fn(&tape, &vars)?;
    tape.item(loss)
}

/// Checks tape gradients of `loss_fn` against central finite differences
/// at every entry of every parameter.
pub fn grad_check<F>(loss_fn: F, params: &Params, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let (_, grads) = evaluate(&loss_fn, params)?;
    compare_gradients(loss_fn, params, &grads, h, tol)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients.
pub fn compare_gradients<F>(
    loss_fn: F,
    params: &Params,
    analytic: &Gradients,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let first = value_at(&loss_fn, params)?;
    let second = value_at(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, p) in params {
        let g = analytic.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("grad_check", p.shape(), g.shape()));
        }
        for index in 0..p.len() {
            let orig = p.data()[index];
            probe.get_mut(name).expect("cloned").data_mut()[index] = orig + h;
            let plus = value_at(&loss_fn, &probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[index] = orig - h;
            let minus = value_at(&loss_fn, &probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = g.data()[index];
            let error = compare(analytic, numeric);
            report.entries.push(EntryCheck {
                param: name.clone(),
                index,
                analytic,
                numeric,
                error,
                passed: error <= tol,
            });
        }
    }
    Ok(report)
}
