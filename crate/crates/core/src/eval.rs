//! Ranking metrics over held-out next interactions and paired significance
//! tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::HeadSpec;
use crate::data::UserSequence;
use crate::error::{Error, Result};
use crate::model::Model;

/// `1 / rank` with rank `1 + #higher + (#equal - 1) / 2`, the expected
/// rank when ties are broken uniformly at random.
///
/// # Panics
/// If `target` is out of range.
pub fn reciprocal_rank(scores: &[f64], target: usize) -> f64 {
    let s = scores[target];
    let (mut higher, mut equal) = (0usize, 0usize);
    for &v in scores {
        if v > s {
            higher += 1;
        } else if v == s {
            equal += 1;
        }
    }
    1.0 / (1.0 + higher as f64 + (equal as f64 - 1.0) / 2.0)
}

/// Neumaier-compensated sum.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mrr(rrs: &[f64]) -> Result<f64> {
    if rrs.is_empty() {
        return Err(Error::Numeric("MRR over zero users".into()));
    }
    Ok(stable_sum(rrs.iter().copied()) / rrs.len() as f64)
}

/// Duration-weighted MRR. Equal durations give exactly [`mrr`].
pub fn wmrr(rrs: &[f64], durations: &[f64]) -> Result<f64> {
    if rrs.len() != durations.len() || rrs.is_empty() {
        return Err(Error::Numeric(format!(
            "WMRR needs matching non-empty inputs, got {} ranks and {} durations",
            rrs.len(),
            durations.len()
        )));
    }
    let total = stable_sum(durations.iter().copied());
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Numeric("WMRR with zero total duration".into()));
    }
    if durations.iter().all(|&d| d == durations[0]) {
        return mrr(rrs);
    }
    Ok(stable_sum(rrs.iter().zip(durations).map(|(r, d)| r * d)) / total)
}

/// RR of the best-ranked positive label.
pub fn label_reciprocal_rank(scores: &[f64], positives: &[usize]) -> f64 {
    positives
        .iter()
        .map(|&p| reciprocal_rank(scores, p))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    /// `None` when every difference is identical.
    pub t: Option<f64>,
    pub p: Option<f64>,
}

impl TTest {
    pub fn is_degenerate(&self) -> bool {
        self.t.is_none()
    }
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Numeric(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = stable_sum(diffs.iter().copied()) / n as f64;
    let var = stable_sum(diffs.iter().map(|d| (d - mean).powi(2))) / (n - 1) as f64;
    if var.is_nan() || var <= 0.0 {
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: None,
            p: None,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        n,
        mean_diff: mean,
        t: Some(t),
        p: Some(p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user_id: u64,
    pub item_rr: f64,
    pub duration: f64,
    /// Per head; `None` where the target falls outside the core labels.
    pub intent_rr: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub users: usize,
    pub item_mrr: f64,
    pub item_wmrr: f64,
    pub intent_mrr: BTreeMap<String, f64>,
    pub intent_users: BTreeMap<String, usize>,
    pub per_user: Vec<UserRank>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = in_unit(self.item_mrr)
            && in_unit(self.item_wmrr)
            && self.intent_mrr.values().all(|&v| in_unit(v))
            && self.per_user.len() == self.users;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(
                "report",
                "metrics out of [0, 1] or user count mismatch",
            ))
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!(
            "item_mrr,{}\nitem_wmrr,{}\n",
            self.item_mrr, self.item_wmrr
        ));
        for (k, v) in &self.intent_mrr {
            out.push_str(&format!("intent_mrr_{k},{v}\n"));
        }
        out.push_str(&format!("users,{}\n", self.users));
        out
    }
}

/// Per-user scores at the last context position for predicting the final
/// interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalScores {
    pub item: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
}

/// Scores for the final interaction from everything before it.
pub fn final_scores(model: &Model, seq: &UserSequence) -> Result<FinalScores> {
    let ctx = &seq.interactions[..seq.len() - 1];
    let ctx = &ctx[ctx.len().saturating_sub(model.config().features.max_len)..];
    let mut g = model.graph();
    let out = model.net.forward(&mut g, ctx)?;
    let last = ctx.len() - 1;
    Ok(FinalScores {
        item: g.value(out.item_logits).row(last).to_vec(),
        heads: out
            .heads
            .iter()
            .map(|h| g.value(h.scores).row(last).to_vec())
            .collect(),
    })
}

fn head_rr(spec: &HeadSpec, scores: &[f64], labels: &[usize]) -> Option<f64> {
    if spec.multi_label {
        Some(label_reciprocal_rank(scores, labels))
    } else {
        let l = labels[0];
        spec.is_core(l).then(|| reciprocal_rank(scores, l))
    }
}

/// Ranks each test user's final interaction. Users with fewer than two
/// interactions are skipped.
pub fn evaluate(model: &Model, test: &[UserSequence]) -> Result<EvalReport> {
    let heads = &model.net.heads;
    let users: Vec<&UserSequence> = test.iter().filter(|u| u.len() >= 2).collect();
    let mut per_user = Vec::with_capacity(users.len());
    for u in users {
        let scores = final_scores(model, u)?;
        let target = u.interactions.last().expect("len >= 2");
        if target.item_id >= scores.item.len() {
            return Err(Error::validation(
                "item_id",
                format!("{} outside the model's catalog", target.item_id),
            ));
        }
        let intent_rr = heads
            .iter()
            .zip(&scores.heads)
            .map(|(h, s)| head_rr(h, s, &h.target.labels(target)))
            .collect();
        per_user.push(UserRank {
            user_id: u.user_id,
            item_rr: reciprocal_rank(&scores.item, target.item_id),
            duration: target.duration,
            intent_rr,
        });
    }
    let rrs: Vec<f64> = per_user.iter().map(|u| u.item_rr).collect();
    let durs: Vec<f64> = per_user.iter().map(|u| u.duration).collect();
    let item_mrr = mrr(&rrs)?;
    let item_wmrr = if stable_sum(durs.iter().copied()) > 0.0 {
        wmrr(&rrs, &durs)?
    } else {
        item_mrr
    };
    let mut intent_mrr = BTreeMap::new();
    let mut intent_users = BTreeMap::new();
    for (i, h) in heads.iter().enumerate() {
        let vals: Vec<f64> = per_user.iter().filter_map(|u| u.intent_rr[i]).collect();
        intent_users.insert(h.name.clone(), vals.len());
        if !vals.is_empty() {
            intent_mrr.insert(h.name.clone(), mrr(&vals)?);
        }
    }
    Ok(EvalReport {
        variant: model.net.arch().to_string(),
        users: per_user.len(),
        item_mrr,
        item_wmrr,
        intent_mrr,
        intent_users,
        per_user,
    })
}

/// Relative change of `new` over `base` in percent.
pub fn pct_delta(new: f64, base: f64) -> f64 {
    if base == 0.0 {
        return 0.0;
    }
    (new - base) / base * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub item_mrr: (f64, f64),
    pub item_mrr_pct: f64,
    pub item_wmrr: (f64, f64),
    pub item_wmrr_pct: f64,
    pub intent_mrr_pct: BTreeMap<String, f64>,
    /// Paired test of report `b` against report `a` on users present in both.
    pub t_test: Option<TTest>,
}

/// `%Δ` of `b` relative to `a`, with a paired t-test on matched users.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    let rr_a: BTreeMap<u64, f64> = a.per_user.iter().map(|u| (u.user_id, u.item_rr)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for u in &b.per_user {
        if let Some(&x) = rr_a.get(&u.user_id) {
            xs.push(x);
            ys.push(u.item_rr);
        }
    }
    let t_test = if xs.len() >= 2 {
        Some(paired_t_test(&ys, &xs)?)
    } else {
        None
    };
    let intent_mrr_pct = b
        .intent_mrr
        .iter()
        .filter_map(|(k, v)| {
            a.intent_mrr
                .get(k)
                .map(|base| (k.clone(), pct_delta(*v, *base)))
        })
        .collect();
    Ok(Comparison {
        item_mrr: (a.item_mrr, b.item_mrr),
        item_mrr_pct: pct_delta(b.item_mrr, a.item_mrr),
        item_wmrr: (a.item_wmrr, b.item_wmrr),
        item_wmrr_pct: pct_delta(b.item_wmrr, a.item_wmrr),
        intent_mrr_pct,
        t_test,
    })
}
