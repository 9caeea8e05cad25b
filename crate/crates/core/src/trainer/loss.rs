//! Duration-weighted next-item and next-intent losses.

use seqintent_tensor::{Graph, Tensor, Var};

use crate::config::{DurationWeighting, HeadSpec, MultiLabelScoring};
use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::model::ForwardOut;

/// `ln(1 + d)` per entry, rescaled so the mean is 1. All-zero durations give
/// unit weights.
pub fn duration_weights(durations: &[f64], scheme: DurationWeighting) -> Vec<f64> {
    if scheme == DurationWeighting::Uniform || durations.is_empty() {
        return vec![1.0; durations.len()];
    }
    let raw: Vec<f64> = durations.iter().map(|d| d.max(0.0).ln_1p()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean <= 0.0 || raw.iter().all(|&w| w == raw[0]) {
        return vec![1.0; raw.len()];
    }
    raw.into_iter().map(|w| w / mean).collect()
}

/// Durations of the prediction targets: position `k` is weighted by
/// interaction `k + 1`. One entry per position that has a target.
pub fn target_durations(seq: &[Interaction]) -> Vec<f64> {
    seq.iter().skip(1).map(|i| i.duration).collect()
}

/// Weighted cross-entropy averaged over positions that have a target.
pub fn item_loss(logits: &Tensor, targets: &[Option<usize>], weights: &[f64]) -> Result<f64> {
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let l = g.softmax_cross_entropy(x, targets, weights)?;
    Ok(g.value(l).data()[0] / count as f64)
}

/// Loss of one intent head averaged over positions that have a target.
/// Single-label heads use cross-entropy. Multi-label heads use
/// cross-entropy against a uniform distribution over the positive labels, or
/// with sigmoid scoring binary cross-entropy on the positive labels only.
pub fn intent_loss(
    logits: &Tensor,
    targets: &[Option<Vec<usize>>],
    weights: &[f64],
    spec: &HeadSpec,
) -> Result<f64> {
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let l = head_loss(&mut g, x, targets, weights, spec)?;
    Ok(g.value(l).data()[0] / count as f64)
}

fn head_loss(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[Option<Vec<usize>>],
    weights: &[f64],
    spec: &HeadSpec,
) -> Result<Var> {
    if targets.iter().flatten().any(|t| t.is_empty()) {
        return Err(Error::validation(
            spec.name.clone(),
            "target has no positive label",
        ));
    }
    if spec.multi_label {
        let positives: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| t.clone().unwrap_or_default())
            .collect();
        match spec.scoring {
            MultiLabelScoring::Softmax => {
                // Uniform target distribution over the positives.
                let w: Vec<f64> = positives
                    .iter()
                    .zip(weights)
                    .map(|(p, w)| {
                        if p.is_empty() {
                            0.0
                        } else {
                            w / p.len() as f64
                        }
                    })
                    .collect();
                Ok(g.softmax_multi_cross_entropy(logits, &positives, &w)?)
            }
            MultiLabelScoring::Sigmoid => Ok(g.positive_bce(logits, &positives, weights)?),
        }
    } else {
        let labels: Vec<Option<usize>> = targets.iter().map(|t| t.as_ref().map(|t| t[0])).collect();
        Ok(g.softmax_cross_entropy(logits, &labels, weights)?)
    }
}

/// `item + λ Σ intents`.
pub fn total_loss(item: f64, intents: &[f64], lambda: f64) -> f64 {
    item + lambda * intents.iter().sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub item: Var,
    pub intents: Vec<Var>,
    pub total: Var,
}

/// Loss nodes of one sequence. `weights` has one entry per target position
/// (`len - 1`) and `norm` scales every term, typically one over the number
/// of target positions in the batch.
pub fn sequence_loss(
    g: &mut Graph<'_>,
    out: &ForwardOut,
    heads: &[HeadSpec],
    seq: &[Interaction],
    weights: &[f64],
    norm: f64,
    lambda: f64,
) -> Result<LossVars> {
    let n = seq.len();
    if weights.len() + 1 != n {
        return Err(Error::Numeric(format!(
            "{} weights for a sequence of {n} interactions",
            weights.len()
        )));
    }
    let mut w = weights.to_vec();
    w.push(0.0);
    let item_targets: Vec<Option<usize>> =
        (0..n).map(|k| seq.get(k + 1).map(|t| t.item_id)).collect();
    let item = g.softmax_cross_entropy(out.item_logits, &item_targets, &w)?;
    let item = g.scale(item, norm);
    let mut intents = Vec::with_capacity(heads.len());
    for (spec, head) in heads.iter().zip(&out.heads) {
        let targets: Vec<Option<Vec<usize>>> = (0..n)
            .map(|k| seq.get(k + 1).map(|t| spec.target.labels(t)))
            .collect();
        let l = head_loss(g, head.logits, &targets, &w, spec)?;
        intents.push(g.scale(l, norm));
    }
    let total = match intents.split_first() {
        None => item,
        Some((first, rest)) => {
            let mut s = *first;
            for &l in rest {
                s = g.add(s, l)?;
            }
            let s = g.scale(s, lambda);
            g.add(item, s)?
        }
    };
    Ok(LossVars {
        item,
        intents,
        total,
    })
}
