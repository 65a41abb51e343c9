//! Soft orthogonality loss, task losses and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::cosine_similarity;
use crate::model::{Ctx, ModalityReps};
use crate::synth::{Label, TaskKind};
use crate::tape::Var;

/// Pooled vectors of one modality entering the orthogonality loss.
#[derive(Debug, Clone)]
pub struct OrthoTerms<'a> {
    pub common: &'a [f64],
    /// Frozen encoder representation.
    pub base: &'a [f64],
    /// One private representation per active combination.
    pub private: Vec<&'a [f64]>,
}

/// `sum_i sum_m [cos(R_com^m, R_prt^{m,i}) - cos(R_com^m, R^m)]`.
///
/// Degenerate (near-zero) vectors contribute 0 through the cosine convention.
pub fn orthogonality_loss(terms: &[OrthoTerms<'_>]) -> f64 {
    terms
        .iter()
        .map(|t| {
            let tie = cosine_similarity(t.common, t.base).0;
            t.private
                .iter()
                .map(|p| cosine_similarity(t.common, p).0 - tie)
                .sum::<f64>()
        })
        .sum()
}

/// Differentiable orthogonality loss for a batch drawn from one combination:
/// each modality's bracketed term is averaged over the batch, then summed
/// over modalities.
pub fn orthogonality_loss_tape(ctx: &mut Ctx, reps: &[ModalityReps]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for r in reps {
        let (Some(prt), Some(com)) = (r.private, r.common) else {
            return Err(Error::contract(
                "orthogonality loss needs private and common representations",
            ));
        };
        let split = ctx.tape.cosine_rows(com, prt)?;
        let tie = ctx.tape.cosine_rows(com, r.base)?;
        let diff = ctx.tape.sub(split, tie)?;
        let term = ctx.tape.mean(diff);
        total = Some(match total {
            None => term,
            Some(acc) => ctx.tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::contract("orthogonality loss over zero modalities"))
}

/// Cross-entropy of `softmax(pred)` at the label, or squared error.
pub fn task_loss(pred: &[f64], label: Label, kind: TaskKind) -> Result<f64> {
    match (kind, label) {
        (TaskKind::Classification, Label::Class(c)) => {
            if c >= pred.len() {
                return Err(Error::contract(format!(
                    "label {c} out of range for {} classes",
                    pred.len()
                )));
            }
            let max = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + pred.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok(lse - pred[c])
        }
        (TaskKind::Regression, Label::Score(y)) => {
            if pred.len() != 1 {
                return Err(Error::contract("regression expects a scalar prediction"));
            }
            Ok((pred[0] - y).powi(2))
        }
        (kind, label) => Err(Error::contract(format!(
            "label {label:?} does not match task {kind}"
        ))),
    }
}

/// Mean task loss over a batch of predictions `y_last` (`B x C` or `B x 1`).
pub fn task_loss_tape(ctx: &mut Ctx, pred: Var, labels: &[Label], kind: TaskKind) -> Result<Var> {
    match kind {
        TaskKind::Classification => {
            let classes = labels
                .iter()
                .map(|l| l.class().ok_or_else(|| Error::contract("regression label in classification batch")))
                .collect::<Result<Vec<_>>>()?;
            ctx.tape.cross_entropy(pred, &classes)
        }
        TaskKind::Regression => {
            let targets: Vec<f64> = labels.iter().map(|l| l.value()).collect();
            ctx.tape.squared_error(pred, &targets)
        }
    }
}

pub fn total_loss(l_task: f64, l_ort: f64, beta: f64) -> f64 {
    l_task + beta * l_ort
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_task: f64,
    pub l_ort: f64,
    pub l_total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(l_task: f64, l_ort: f64, beta: f64) -> Self {
        Self {
            l_task,
            l_ort,
            l_total: total_loss(l_task, l_ort, beta),
            beta,
        }
    }
}
