//! Intent heads and the attention-weighted intent embedding `Z`.

use seqintent_tensor::{Graph, Var};

use crate::config::HeadSpec;
use crate::error::{Error, Result};
use crate::nn::{self, Init};

pub(crate) fn init_heads(init: &mut Init<'_>, heads: &[HeadSpec], d_enc: usize) -> Result<()> {
    for h in heads {
        init.linear(&format!("head.{}", h.name), d_enc, h.cardinality)?;
    }
    Ok(())
}

pub(crate) fn init_aggregation(
    init: &mut Init<'_>,
    heads: &[HeadSpec],
    d_proj: usize,
) -> Result<()> {
    for h in heads {
        init.linear(&format!("proj.{}", h.name), h.cardinality, d_proj)?;
    }
    init.weight("att.w", d_proj, 1)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: Var,
    /// Softmax rows, or element-wise sigmoid for multi-label heads scored
    /// that way.
    pub scores: Var,
}

pub fn predict_head(g: &mut Graph<'_>, enc: Var, spec: &HeadSpec) -> Result<HeadOutput> {
    let logits = nn::linear(g, enc, &format!("head.{}", spec.name))?;
    let scores = if spec.sigmoid_scores() {
        g.sigmoid(logits)
    } else {
        g.softmax(logits)
    };
    Ok(HeadOutput { logits, scores })
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    /// Per-head projections, each `[n × d_proj]`.
    pub projections: Vec<Var>,
    /// `[n × M]` attention logits.
    pub alpha_logits: Var,
    /// `[n × M]`, rows sum to 1.
    pub alpha: Var,
    /// `[n × d_proj]`.
    pub z: Var,
}

/// Projects each head's scores, scores the projections with the shared
/// attention vector and mixes them with the softmaxed weights.
pub fn aggregate_intent_embedding(
    g: &mut Graph<'_>,
    heads: &[HeadSpec],
    scores: &[Var],
) -> Result<Aggregate> {
    if heads.is_empty() || heads.len() != scores.len() {
        return Err(Error::config(format!(
            "aggregation over {} heads given {} score blocks",
            heads.len(),
            scores.len()
        )));
    }
    let att = g.param_named("att.w")?;
    let mut projections = Vec::with_capacity(heads.len());
    let mut logits = Vec::with_capacity(heads.len());
    for (h, &s) in heads.iter().zip(scores) {
        let p = nn::linear(g, s, &format!("proj.{}", h.name))?;
        logits.push(g.matmul(p, att)?);
        projections.push(p);
    }
    let alpha_logits = g.concat_cols(&logits)?;
    let (alpha, z) = mix_projections(g, &projections, alpha_logits)?;
    Ok(Aggregate {
        projections,
        alpha_logits,
        alpha,
        z,
    })
}

/// `Z = Σ_i softmax(α)_i · proj_i`, returning `(softmax(α), Z)`.
pub fn mix_projections(
    g: &mut Graph<'_>,
    projections: &[Var],
    alpha_logits: Var,
) -> Result<(Var, Var)> {
    let alpha = g.softmax(alpha_logits);
    let z = g.mix(alpha, projections)?;
    Ok((alpha, z))
}
