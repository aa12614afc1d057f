//! Full-catalog top-K evaluation: Recall@K and NDCG@K.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, ItemId, Split, UserId};
use crate::eval::{forward, EvalWorkspace};
use crate::graph::MetricGraph;
use crate::train::Encoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("relevant set is empty")]
pub struct EmptyRelevant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: UserId,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users: usize,
    pub per_user: Vec<UserMetrics>,
    pub wall_time_secs: f64,
}

impl EvalReport {
    /// `key = value` block; `prefix` namespaces the keys (e.g. `test.`).
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut out = String::new();
        writeln!(out, "{prefix}k = {}", self.k).unwrap();
        writeln!(out, "{prefix}recall = {}", self.recall).unwrap();
        writeln!(out, "{prefix}ndcg = {}", self.ndcg).unwrap();
        writeln!(out, "{prefix}users = {}", self.users).unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Descending-score order over unmasked items; ties go to the lower id.
/// Non-finite scores sort last.
fn order(a: &(f64, ItemId), b: &(f64, ItemId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn sanitize(s: f64) -> f64 {
    if s.is_finite() {
        s
    } else {
        f64::NEG_INFINITY
    }
}

/// Ranks items by `scores`, skipping any id in the sorted `mask`.
pub fn rank_scores(scores: &[f64], mask: &[ItemId]) -> Vec<ItemId> {
    let mut pairs = candidates(scores, &[mask]);
    pairs.sort_by(order);
    pairs.into_iter().map(|(_, i)| i).collect()
}

/// First `k` items of [`rank_scores`] without sorting the whole catalog.
pub fn top_k(scores: &[f64], masks: &[&[ItemId]], k: usize) -> Vec<ItemId> {
    let mut pairs = candidates(scores, masks);
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k, order);
        pairs.truncate(k);
    }
    pairs.sort_by(order);
    pairs.into_iter().map(|(_, i)| i).collect()
}

fn candidates(scores: &[f64], masks: &[&[ItemId]]) -> Vec<(f64, ItemId)> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (sanitize(s), i as ItemId))
        .filter(|(_, i)| !masks.iter().any(|m| m.binary_search(i).is_ok()))
        .collect()
}

/// Scores every item for `user`.
pub fn score_items<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &E,
    user: UserId,
    ws: &mut EvalWorkspace,
) -> Vec<f64> {
    let pu = emb.user(user);
    (0..emb.n_items())
        .map(|i| forward(metric, pu, emb.item(i as ItemId), ws).unwrap_or(f64::NEG_INFINITY))
        .collect()
}

pub fn rank_items<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &E,
    user: UserId,
    mask: &[ItemId],
) -> Vec<ItemId> {
    let mut ws = EvalWorkspace::new(emb.dim());
    rank_scores(&score_items(metric, emb, user, &mut ws), mask)
}

pub fn metrics_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> Result<(f64, f64), EmptyRelevant> {
    if relevant.is_empty() {
        return Err(EmptyRelevant);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Ok((hits as f64 / relevant.len() as f64, dcg / idcg))
}

/// Evaluates on `split`. Training positives are masked; for the test split
/// the validation positives are masked as well.
pub fn evaluate<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &E,
    ds: &InteractionDataset,
    split: Split,
    k: usize,
) -> EvalReport {
    let train = ds.split(Split::Train);
    let valid = ds.split(Split::Valid);
    let masks: Vec<Vec<&[ItemId]>> = (0..ds.n_users())
        .map(|u| match split {
            Split::Test => vec![train[u].as_slice(), valid[u].as_slice()],
            _ => vec![train[u].as_slice()],
        })
        .collect();
    evaluate_lists(metric, emb, ds.split(split), &masks, k)
}

/// Mean Recall@K/NDCG@K over users with a non-empty `relevant` list.
/// `masks[u]` are sorted id lists excluded from user `u`'s ranking; an empty
/// `masks` slice means no masking.
pub fn evaluate_lists<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &E,
    relevant: &[Vec<ItemId>],
    masks: &[Vec<&[ItemId]>],
    k: usize,
) -> EvalReport {
    let start = Instant::now();
    let mut ws = EvalWorkspace::new(emb.dim());
    let mut per_user = Vec::new();
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let scores = score_items(metric, emb, u as UserId, &mut ws);
        let mask: &[&[ItemId]] = masks.get(u).map(Vec::as_slice).unwrap_or(&[]);
        let top = top_k(&scores, mask, k);
        let (recall, ndcg) = metrics_at_k(&top, rel, k).expect("non-empty");
        per_user.push(UserMetrics {
            user: u as UserId,
            recall,
            ndcg,
        });
    }
    let n = per_user.len();
    let mean = |f: fn(&UserMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / n as f64
        }
    };
    EvalReport {
        k,
        recall: mean(|m| m.recall),
        ndcg: mean(|m| m.ndcg),
        users: n,
        per_user,
        wall_time_secs: start.elapsed().as_secs_f64(),
    }
}
