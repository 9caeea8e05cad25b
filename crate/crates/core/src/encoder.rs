//! Causal transformer encoder with timestamp-bucket positional encoding.

use seqintent_tensor::{Graph, Var};

use crate::error::Result;
use crate::nn::{self, Init};

/// Log-spaced bucket of the time since the first interaction.
///
/// Bucket 0 holds `delta <= 0`; buckets `1..B` split `(0, max_delta]` evenly
/// in `ln(1 + delta)`. Larger deltas clip to `B - 1`.
pub fn time_bucket(delta: i64, buckets: usize, max_delta: i64) -> usize {
    if delta <= 0 {
        return 0;
    }
    let frac = (delta as f64).ln_1p() / (max_delta as f64).ln_1p();
    let b = 1 + ((buckets - 2) as f64 * frac).floor() as usize;
    b.min(buckets - 1)
}

pub fn time_buckets(ts: &[i64], buckets: usize, max_delta: i64) -> Vec<usize> {
    let start = ts.first().copied().unwrap_or(0);
    ts.iter()
        .map(|&t| time_bucket(t - start, buckets, max_delta))
        .collect()
}

/// Shape of one encoder; parameters live under `prefix`.
#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub prefix: String,
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub time_buckets: usize,
    pub max_time_delta: i64,
}

impl EncoderSpec {
    pub(crate) fn init(&self, init: &mut Init<'_>) -> Result<()> {
        let p = &self.prefix;
        init.linear(&format!("{p}.fc"), self.d_in, self.d_model)?;
        init.layer_norm(&format!("{p}.ln0"), self.d_model)?;
        init.embedding(&format!("{p}.time"), self.time_buckets, self.d_model)?;
        for l in 0..self.layers {
            init.block(&format!("{p}.l{l}"), self.d_model, self.d_ff)?;
        }
        Ok(())
    }

    /// `[n × d_in]` inputs to `[n × d_model]` encodings; row `k` sees rows `<= k` only.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ts: &[i64]) -> Result<Var> {
        let p = &self.prefix;
        let h = nn::linear(g, x, &format!("{p}.fc"))?;
        let h = nn::layer_norm(g, h, &format!("{p}.ln0"))?;
        let table = g.param_named(&format!("{p}.time"))?;
        let pos = g.embedding(
            table,
            &time_buckets(ts, self.time_buckets, self.max_time_delta),
        )?;
        let mut h = g.add(h, pos)?;
        for l in 0..self.layers {
            h = nn::block(g, h, &format!("{p}.l{l}"), self.heads, true)?;
        }
        Ok(h)
    }
}
