//! Next-item scoring over the full catalog.

use seqintent_tensor::{Graph, Var};

use crate::error::Result;
use crate::nn::{self, Init};

pub(crate) fn init_item_head(init: &mut Init<'_>, d_enc: usize, num_items: usize) -> Result<()> {
    init.linear("item.out", d_enc, num_items)
}

/// `[n × |I|]` logits; softmax of a row is the next-item distribution.
pub fn item_logits(g: &mut Graph<'_>, enc: Var) -> Result<Var> {
    nn::linear(g, enc, "item.out")
}

/// Logits and their softmax.
pub fn predict_item_scores(g: &mut Graph<'_>, enc: Var) -> Result<(Var, Var)> {
    let logits = item_logits(g, enc)?;
    let probs = g.softmax(logits);
    Ok((logits, probs))
}
