//! Input features: the per-interaction vector `F_k`, the trailing-window
//! short-term interest vector `S_k`, and their concatenation.

use seqintent_tensor::{Graph, Tensor, Var};

use crate::config::{FeatureConfig, ShortEncoderKind, NUM_NUMERIC_FEATURES};
use crate::data::{Interaction, NUM_ACTION_TYPES, NUM_GENRES, NUM_MOVIE_SHOW, NUM_TSR};
use crate::error::Result;
use crate::nn::{self, Init};

/// Smallest `i <= k` with `ts[k] - ts[i] <= h`. Indices are 0-based.
///
/// # Panics
/// If `k` is out of bounds.
pub fn select_window(ts: &[i64], k: usize, h: i64) -> usize {
    let tk = ts[k];
    ts[..=k].partition_point(|&t| tk - t > h)
}

pub(crate) fn init_feature_params(
    init: &mut Init<'_>,
    cfg: &FeatureConfig,
    num_items: usize,
) -> Result<()> {
    init.embedding("emb.item", num_items, cfg.d_item)?;
    init.embedding("emb.action", NUM_ACTION_TYPES, cfg.d_action)?;
    init.embedding("emb.genre", NUM_GENRES, cfg.d_genre)?;
    init.embedding("emb.movie_show", NUM_MOVIE_SHOW, cfg.d_movie_show)?;
    init.embedding("emb.tsr", NUM_TSR, cfg.d_tsr)
}

pub(crate) fn init_short_params(init: &mut Init<'_>, cfg: &FeatureConfig) -> Result<()> {
    let d = cfg.d_short;
    init.linear("short.in", cfg.d_full(), d)?;
    if cfg.short_enc == ShortEncoderKind::Transformer {
        init.block("short.block", d, cfg.d_short_ff)?;
    }
    init.linear("short.out", d, d)
}

/// `F = item ⊕ action ⊕ mean(genres) ⊕ movie_show ⊕ tsr ⊕ numerics`, one row
/// per interaction: `[n × d_full]`.
pub fn interaction_features(
    g: &mut Graph<'_>,
    seq: &[Interaction],
    cfg: &FeatureConfig,
) -> Result<Var> {
    let lookup = |g: &mut Graph<'_>, name: &str, ids: Vec<usize>| -> Result<Var> {
        let table = g.param_named(name)?;
        Ok(g.embedding(table, &ids)?)
    };
    let item = lookup(g, "emb.item", seq.iter().map(|i| i.item_id).collect())?;
    let action = lookup(g, "emb.action", seq.iter().map(|i| i.action_type).collect())?;
    let genre_table = g.param_named("emb.genre")?;
    let genre =
        g.embedding_bag_mean(genre_table, seq.iter().map(|i| i.genres.clone()).collect())?;
    let ms = lookup(
        g,
        "emb.movie_show",
        seq.iter().map(|i| i.movie_show).collect(),
    )?;
    let tsr = lookup(
        g,
        "emb.tsr",
        seq.iter().map(|i| i.time_since_release).collect(),
    )?;
    let numeric: Vec<f64> = seq.iter().flat_map(|i| cfg.numerics(i)).collect();
    let numeric = g.input(Tensor::matrix(seq.len(), NUM_NUMERIC_FEATURES, numeric)?);
    Ok(g.concat_cols(&[item, action, genre, ms, tsr, numeric])?)
}

/// `S_k` for every position: each row encodes only the window
/// `select_window(ts, k, H)..=k` of `features`. Output `[n × d_short]`.
pub fn short_term_features(
    g: &mut Graph<'_>,
    features: Var,
    ts: &[i64],
    cfg: &FeatureConfig,
) -> Result<Var> {
    let proj = nn::linear(g, features, "short.in")?;
    let qkv = match cfg.short_enc {
        ShortEncoderKind::Transformer => Some(nn::qkv(g, proj, "short.block")?),
        ShortEncoderKind::Mean => None,
    };
    let mut pooled = Vec::with_capacity(ts.len());
    for k in 0..ts.len() {
        let pos = select_window(ts, k, cfg.window.secs());
        let x = g.slice_rows(proj, pos, k + 1)?;
        let enc = match qkv {
            Some([q, kk, v]) => {
                let q = g.slice_rows(q, pos, k + 1)?;
                let kk = g.slice_rows(kk, pos, k + 1)?;
                let v = g.slice_rows(v, pos, k + 1)?;
                let a = g.attention(q, kk, v, 1, false)?;
                nn::block_tail(g, x, a, "short.block")?
            }
            None => x,
        };
        pooled.push(g.mean_rows(enc));
    }
    let stacked = g.concat_rows(&pooled)?;
    nn::linear(g, stacked, "short.out")
}

/// Features of one sequence as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub f: Var,
    pub s: Option<Var>,
    /// `F ⊕ S` when short-term features are on, else `F`.
    pub concat: Var,
}

pub fn input_sequence(
    g: &mut Graph<'_>,
    seq: &[Interaction],
    cfg: &FeatureConfig,
    short_term: bool,
) -> Result<InputVars> {
    let f = interaction_features(g, seq, cfg)?;
    if !short_term {
        return Ok(InputVars {
            f,
            s: None,
            concat: f,
        });
    }
    let ts: Vec<i64> = seq.iter().map(|i| i.timestamp).collect();
    let s = short_term_features(g, f, &ts, cfg)?;
    let concat = g.concat_cols(&[f, s])?;
    Ok(InputVars {
        f,
        s: Some(s),
        concat,
    })
}

/// Materialized features of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFeatureSeq {
    pub f: Tensor,
    pub s: Tensor,
    pub concat: Tensor,
    pub timestamps: Vec<i64>,
}

/// Evaluates [`input_sequence`] with short-term features against `params`.
pub fn build_input_sequence(
    params: &seqintent_tensor::ParamSet,
    seq: &[Interaction],
    cfg: &FeatureConfig,
) -> Result<InputFeatureSeq> {
    let mut g = Graph::with_params(params);
    let vars = input_sequence(&mut g, seq, cfg, true)?;
    Ok(InputFeatureSeq {
        f: g.value(vars.f).clone(),
        s: g.value(vars.s.expect("short-term on")).clone(),
        concat: g.value(vars.concat).clone(),
        timestamps: seq.iter().map(|i| i.timestamp).collect(),
    })
}

/// Fresh feature and short-term parameters for standalone use.
pub fn init_input_params(
    cfg: &FeatureConfig,
    num_items: usize,
    seed: u64,
) -> Result<seqintent_tensor::ParamSet> {
    let mut params = seqintent_tensor::ParamSet::new();
    let mut init = Init::new(&mut params, seed, 1.0);
    init_feature_params(&mut init, cfg, num_items)?;
    init_short_params(&mut init, cfg)?;
    Ok(params)
}
