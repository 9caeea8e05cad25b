//! Parameter initialization and the small building blocks shared by the
//! encoders: affine maps, layer norm and post-LN transformer blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqintent_tensor::{Graph, ParamSet, Tensor, Var};

use crate::error::Result;

/// Draws every parameter from its own stream keyed by name, so variants that
/// share a component start it from identical values.
pub(crate) struct Init<'a> {
    pub params: &'a mut ParamSet,
    seed: u64,
    scale: f64,
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl<'a> Init<'a> {
    pub fn new(params: &'a mut ParamSet, seed: u64, scale: f64) -> Self {
        Self {
            params,
            seed,
            scale,
        }
    }

    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_stream(&name));
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.params
            .insert(name, Tensor::matrix(rows, cols, data)?)?;
        Ok(())
    }

    fn constant(&mut self, name: String, n: usize, value: f64) -> Result<()> {
        self.params
            .insert(name, Tensor::filled(vec![1, n], value)?)?;
        Ok(())
    }

    /// Glorot-uniform weight `{prefix}.w` plus zero bias `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), d_in, d_out)?;
        self.constant(format!("{prefix}.b"), d_out, 0.0)
    }

    pub fn weight(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        let bound = self.scale * (6.0 / (d_in + d_out) as f64).sqrt();
        self.uniform(name.to_string(), d_in, d_out, bound)
    }

    /// Rows with unit expected squared norm.
    pub fn embedding(&mut self, name: &str, rows: usize, d: usize) -> Result<()> {
        let bound = self.scale * (3.0 / d as f64).sqrt();
        self.uniform(name.to_string(), rows, d, bound)
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.constant(format!("{prefix}.g"), d, 1.0)?;
        self.constant(format!("{prefix}.b"), d, 0.0)
    }

    pub fn block(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<()> {
        for w in ["wq", "wk", "wv"] {
            self.weight(&format!("{prefix}.{w}"), d, d)?;
        }
        self.linear(&format!("{prefix}.wo"), d, d)?;
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        self.linear(&format!("{prefix}.ff1"), d, d_ff)?;
        self.linear(&format!("{prefix}.ff2"), d_ff, d)?;
        self.layer_norm(&format!("{prefix}.ln2"), d)
    }
}

pub(crate) fn linear(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param_named(&format!("{prefix}.w"))?;
    let b = g.param_named(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

pub(crate) fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param_named(&format!("{prefix}.g"))?;
    let bias = g.param_named(&format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Query/key/value projections of a block.
pub(crate) fn qkv(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<[Var; 3]> {
    let mut out = [x; 3];
    for (slot, w) in out.iter_mut().zip(["wq", "wk", "wv"]) {
        let w = g.param_named(&format!("{prefix}.{w}"))?;
        *slot = g.matmul(x, w)?;
    }
    Ok(out)
}

/// Output projection, residual, norm, feed-forward, residual, norm.
pub(crate) fn block_tail(g: &mut Graph<'_>, x: Var, attended: Var, prefix: &str) -> Result<Var> {
    let a = linear(g, attended, &format!("{prefix}.wo"))?;
    let h = g.add(x, a)?;
    let h = layer_norm(g, h, &format!("{prefix}.ln1"))?;
    let f = linear(g, h, &format!("{prefix}.ff1"))?;
    let f = g.relu(f);
    let f = linear(g, f, &format!("{prefix}.ff2"))?;
    let out = g.add(h, f)?;
    layer_norm(g, out, &format!("{prefix}.ln2"))
}

pub(crate) fn block(
    g: &mut Graph<'_>,
    x: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let [q, k, v] = qkv(g, x, prefix)?;
    let a = g.attention(q, k, v, heads, causal)?;
    block_tail(g, x, a, prefix)
}
