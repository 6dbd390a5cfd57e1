//! STS evaluation: cosine scoring, Spearman rank correlation, and the
//! alignment / uniformity diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEncoder;
use crate::error::{Error, Result};
use crate::losses::cosine;
use crate::tensor::{logsumexp, Tensor};
use crate::vocab::Sentence;

/// Default gold-score cutoff for treating an STS pair as a positive pair.
pub const DEFAULT_POSITIVE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub a: Sentence,
    pub b: Sentence,
    pub gold: f64,
}

impl StsPair {
    pub fn new(a: Sentence, b: Sentence, gold: f64) -> Result<Self> {
        if !gold.is_finite() {
            return Err(Error::Invalid(format!("gold score must be finite, got {gold}")));
        }
        Ok(Self { a, b, gold })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    /// `None` when the correlation is undefined (constant ranks).
    pub rho: Option<f64>,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str = "name\trho\tcount\talign\tuniform";

    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.name,
            opt(self.rho),
            self.count,
            opt(self.align),
            opt(self.uniform)
        )
    }
}

/// Fixed-width table for terminal output.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>6}  {:>8}  {:>8}", "dataset", "rho", "pairs", "align", "uniform");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>6}  {:>8}  {:>8}",
            r.name,
            opt(r.rho),
            r.count,
            opt(r.align),
            opt(r.uniform)
        );
    }
    out
}

/// 1-based ranks with ties sharing the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho. `Ok(None)` when either input has no rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!(
            "spearman: sequences differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Invalid("spearman: need at least two observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

fn normalized_rows(x: &Tensor, op: &'static str) -> Result<Vec<Vec<f64>>> {
    x.row_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::domain(op, "degenerate embedding with zero norm"));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between L2-normalized positive-pair embeddings.
/// Row `i` of `a` pairs with row `i` of `b`.
pub fn alignment_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape("alignment_loss", a.shape(), b.shape()));
    }
    let na = normalized_rows(a, "alignment_loss")?;
    let nb = normalized_rows(b, "alignment_loss")?;
    let total: f64 = na.iter().zip(&nb).map(|(u, v)| squared_distance(u, v)).sum();
    Ok(total / na.len() as f64)
}

/// `log mean exp(-2 |f(v) - f(w)|^2)` over distinct unordered row pairs of
/// L2-normalized embeddings.
pub fn uniformity_loss(x: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || x.rows() < 2 {
        return Err(Error::Invalid("uniformity_loss needs at least two embeddings".into()));
    }
    let rows = normalized_rows(x, "uniformity_loss")?;
    let mut terms = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            terms.push(-2.0 * squared_distance(&rows[i], &rows[j]));
        }
    }
    let value = logsumexp(&terms) - (terms.len() as f64).ln();
    Ok(value.min(0.0))
}

/// Cosine of each pair's embeddings.
pub fn predict_similarities(pairs: &[StsPair], encoder: &dyn SentenceEncoder) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let a: Vec<Sentence> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Sentence> = pairs.iter().map(|p| p.b.clone()).collect();
    let ea = encoder.embed(&a)?;
    let eb = encoder.embed(&b)?;
    if ea.shape() != eb.shape() || ea.rows() != pairs.len() {
        return Err(Error::shape("sts_evaluate", ea.shape(), eb.shape()));
    }
    let preds = ea
        .row_iter()
        .zip(eb.row_iter())
        .map(|(u, v)| cosine(u, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((ea, eb, preds))
}

/// Spearman between predicted cosines and gold scores.
pub fn sts_evaluate(name: &str, pairs: &[StsPair], encoder: &dyn SentenceEncoder) -> Result<EvalReport> {
    sts_evaluate_with(name, pairs, encoder, None)
}

/// [`sts_evaluate`], plus alignment over pairs with gold at or above
/// `positive_threshold` and uniformity over every embedded sentence when a
/// threshold is given.
pub fn sts_evaluate_with(
    name: &str,
    pairs: &[StsPair],
    encoder: &dyn SentenceEncoder,
    positive_threshold: Option<f64>,
) -> Result<EvalReport> {
    if pairs.len() < 2 {
        return Err(Error::Invalid(format!("{name}: need at least two STS pairs, got {}", pairs.len())));
    }
    let (ea, eb, preds) = predict_similarities(pairs, encoder)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    let rho = spearman(&preds, &gold)?;
    let mut note = None;
    if rho.is_none() {
        note = Some(if preds.iter().all(|&p| p == preds[0]) {
            "all predicted similarities are equal; correlation undefined".to_string()
        } else {
            "gold scores are constant; correlation undefined".to_string()
        });
    }

    let (mut align, mut uniform) = (None, None);
    if let Some(threshold) = positive_threshold {
        let positive: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].gold >= threshold).collect();
        if !positive.is_empty() {
            let pa = Tensor::from_rows(&positive.iter().map(|&i| ea.row(i)).collect::<Vec<_>>())?;
            let pb = Tensor::from_rows(&positive.iter().map(|&i| eb.row(i)).collect::<Vec<_>>())?;
            align = Some(alignment_loss(&pa, &pb)?);
        }
        let all = Tensor::from_rows(&ea.row_iter().chain(eb.row_iter()).collect::<Vec<_>>())?;
        uniform = Some(uniformity_loss(&all)?);
    }

    Ok(EvalReport {
        name: name.to_string(),
        rho,
        count: pairs.len(),
        align,
        uniform,
        note,
    })
}
