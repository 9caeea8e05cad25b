//! Clustering and inspection of per-user intent embeddings.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::UserSequence;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEmbedding {
    pub user_id: u64,
    /// Intent embedding at the last position.
    pub z: Vec<f64>,
    /// Softmaxed head weights at the last position.
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<usize>,
}

/// Final-position `Z` and `α` for every user with at least one interaction.
pub fn embed_users(model: &Model, users: &[UserSequence]) -> Result<Vec<UserEmbedding>> {
    if !model.net.arch().is_hierarchical() {
        return Err(Error::config(format!(
            "variant {} has no intent embedding",
            model.net.arch()
        )));
    }
    let max_len = model.config().features.max_len;
    let mut out = Vec::with_capacity(users.len());
    for u in users.iter().filter(|u| !u.is_empty()) {
        let seq = u.truncated(max_len);
        let mut g = model.graph();
        let f = model.net.forward(&mut g, seq)?;
        let agg = f.aggregate.expect("hierarchical variants aggregate");
        let last = seq.len() - 1;
        out.push(UserEmbedding {
            user_id: u.user_id,
            z: g.value(agg.z).row(last).to_vec(),
            alpha: g.value(agg.alpha).row(last).to_vec(),
            latent: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd assignment step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

/// k-means++ seeding followed by Lloyd iterations until the largest center
/// shift is below `tol` or `max_iter` is reached.
pub fn kmeans_pp(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("k = {k} must be in 1..={n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::validation("points", "points differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // never re-pick a chosen point through rounding
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignments = vec![0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, dd) = nearest(p, &centers);
            assignments[i] = c;
            inertia += dd;
        }
        trace.push(inertia);
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            // an emptied cluster keeps its center
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift < tol {
            let inertia = points
                .iter()
                .zip(assignments.iter_mut())
                .map(|(p, a)| {
                    let (c, dd) = nearest(p, &centers);
                    *a = c;
                    dd
                })
                .sum();
            trace.push(inertia);
            break;
        }
    }
    Ok(KMeans {
        inertia: *trace.last().expect("at least one step"),
        assignments,
        centers,
        trace,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, one per output dimension.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    pub projected: Vec<Vec<f64>>,
}

/// Projection onto the top `out_dim` principal directions of the covariance.
/// Each direction's largest-magnitude loading is made positive.
pub fn pca_project(points: &[Vec<f64>], out_dim: usize) -> Result<Pca> {
    let n = points.len();
    if n < 2 {
        return Err(Error::config("PCA needs at least two points"));
    }
    let d = points[0].len();
    if out_dim == 0 || out_dim > d {
        return Err(Error::config(format!(
            "out_dim {out_dim} must be in 1..={d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(out_dim);
    let mut ratios = Vec::with_capacity(out_dim);
    for &c in order.iter().take(out_dim) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        ratios.push(if total > 0.0 {
            eig.eigenvalues[c].max(0.0) / total
        } else {
            0.0
        });
    }
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|v| (0..d).map(|j| centered[(i, j)] * v[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance_ratio: ratios,
        projected,
    })
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::validation(
            "labels",
            format!(
                "need equal non-empty lengths, got {} and {}",
                a.len(),
                b.len()
            ),
        ));
    }
    Ok(())
}

fn contingency(a: &[usize], b: &[usize]) -> BTreeMap<(usize, usize), usize> {
    let mut table = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
    }
    table
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(assignments, labels)?;
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((c, _), count) in contingency(assignments, labels) {
        let e = best.entry(c).or_insert(0);
        *e = (*e).max(count);
    }
    Ok(best.values().sum::<usize>() as f64 / assignments.len() as f64)
}

fn pairs(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index by pair counting. Two single-cluster labelings give 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    let table = contingency(a, b);
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(x, y), &c) in &table {
        *rows.entry(x).or_insert(0) += c;
        *cols.entry(y).or_insert(0) += c;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(a.len()).max(1.0);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryIntent {
    pub user_id: u64,
    pub head: usize,
    /// Gap between the top weight and the runner-up.
    pub margin: f64,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub heads: Vec<String>,
    pub users: Vec<PrimaryIntent>,
    pub histogram: Vec<usize>,
    /// Per head, up to `top_k` user ids with the largest margins.
    pub exemplars: Vec<Vec<u64>>,
}

/// Head with the largest weight; ties go to the lowest index and are flagged.
pub fn primary_intent(alpha: &[f64]) -> (usize, f64, bool) {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate() {
        if a > alpha[best] {
            best = i;
        }
    }
    let tie = alpha
        .iter()
        .enumerate()
        .any(|(i, &a)| i != best && a == alpha[best]);
    let runner = alpha
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &a)| a)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = if runner.is_finite() {
        alpha[best] - runner
    } else {
        alpha[best]
    };
    (best, margin, tie)
}

pub fn attention_report(
    heads: &[String],
    embeddings: &[UserEmbedding],
    top_k: usize,
) -> Result<AttentionReport> {
    if embeddings.is_empty() {
        return Err(Error::validation(
            "embeddings",
            "attention report over zero users",
        ));
    }
    let mut users = Vec::with_capacity(embeddings.len());
    let mut histogram = vec![0; heads.len()];
    for e in embeddings {
        if e.alpha.len() != heads.len() {
            return Err(Error::validation(
                "alpha",
                format!(
                    "user {} has {} weights for {} heads",
                    e.user_id,
                    e.alpha.len(),
                    heads.len()
                ),
            ));
        }
        let (head, margin, tie) = primary_intent(&e.alpha);
        histogram[head] += 1;
        users.push(PrimaryIntent {
            user_id: e.user_id,
            head,
            margin,
            tie,
        });
    }
    let exemplars = (0..heads.len())
        .map(|h| {
            let mut mine: Vec<&PrimaryIntent> = users.iter().filter(|u| u.head == h).collect();
            mine.sort_by(|a, b| {
                b.margin
                    .total_cmp(&a.margin)
                    .then(a.user_id.cmp(&b.user_id))
            });
            mine.iter().take(top_k).map(|u| u.user_id).collect()
        })
        .collect();
    Ok(AttentionReport {
        heads: heads.to_vec(),
        users,
        histogram,
        exemplars,
    })
}

/// Up to `count` users closest to each center, by index into `points`.
pub fn center_exemplars(points: &[Vec<f64>], km: &KMeans, count: usize) -> Vec<Vec<usize>> {
    (0..km.centers.len())
        .map(|c| {
            let mut members: Vec<(usize, f64)> = points
                .iter()
                .enumerate()
                .filter(|(i, _)| km.assignments[*i] == c)
                .map(|(i, p)| (i, sq_dist(p, &km.centers[c])))
                .collect();
            members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            members.into_iter().take(count).map(|(i, _)| i).collect()
        })
        .collect()
}
