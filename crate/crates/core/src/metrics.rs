//! Recall@K and nDCG@K with training items masked out of the ranked lists.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{InteractionDataset, SyntheticGroundTruth};
use crate::error::{Error, Result};
use crate::model::{propagate, EmbeddingModel, PropagatedEmbeddings};

/// Anything that assigns every item a score for a given user.
pub trait ItemScorer: Sync {
    fn n_items(&self) -> usize;
    fn user_scores(&self, user: usize) -> Vec<f64>;
}

impl ItemScorer for PropagatedEmbeddings {
    fn n_items(&self) -> usize {
        self.final_item.nrows()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        PropagatedEmbeddings::user_scores(self, user).to_vec()
    }
}

impl ItemScorer for SyntheticGroundTruth {
    fn n_items(&self) -> usize {
        self.true_item_embeddings.nrows()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        self.true_scores(user)
    }
}

/// User-independent baseline scoring each item by its training degree.
#[derive(Debug, Clone)]
pub struct Popularity {
    scores: Vec<f64>,
}

impl Popularity {
    pub fn fit(train: &InteractionDataset) -> Self {
        Self {
            scores: train.item_degrees().into_iter().map(|d| d as f64).collect(),
        }
    }
}

impl ItemScorer for Popularity {
    fn n_items(&self) -> usize {
        self.scores.len()
    }

    fn user_scores(&self, _user: usize) -> Vec<f64> {
        self.scores.clone()
    }
}

/// Top `k` items by score, skipping `exclude` (sorted). Ties go to the lower
/// item id.
pub fn top_k(scores: &[f64], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut candidates: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let order = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// Ranked list of at most `k` items for `user`, excluding `exclude`.
pub fn rank_items(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    user: usize,
    exclude: &[u32],
    k: usize,
) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::Argument("cutoff K must be at least 1".into()));
    }
    if prop.source_version != model.version() {
        return Err(Error::Contract("propagated embeddings are stale".into()));
    }
    if user >= model.n_users() {
        return Err(Error::Range {
            kind: "user",
            id: user,
            bound: model.n_users(),
        });
    }
    let mut exclude = exclude.to_vec();
    exclude.sort_unstable();
    Ok(top_k(&ItemScorer::user_scores(prop, user), &exclude, k))
}

fn relevant_set(relevant: &[u32]) -> Result<Vec<u32>> {
    if relevant.is_empty() {
        return Err(Error::Argument("empty relevant set".into()));
    }
    let mut set = relevant.to_vec();
    set.sort_unstable();
    set.dedup();
    Ok(set)
}

pub fn recall_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> Result<f64> {
    let set = relevant_set(relevant)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| set.binary_search(i).is_ok())
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Binary-gain nDCG with `log2(rank + 1)` discount; the ideal DCG places
/// `min(k, |relevant|)` hits at the top.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> Result<f64> {
    let set = relevant_set(relevant)?;
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| set.binary_search(i).is_ok())
        .map(|(pos, _)| discount(pos))
        .sum();
    let idcg: f64 = (0..k.min(set.len())).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub k: usize,
    #[serde(skip)]
    pub per_user: BTreeMap<u32, (f64, f64)>,
    pub recall: f64,
    pub ndcg: f64,
    pub n_evaluated: usize,
    pub n_skipped: usize,
}

impl MetricsReport {
    /// `{"k", "recall", "ndcg", "n_evaluated", "n_skipped"}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serialisable")
    }

    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user,recall,ndcg\n");
        for (u, (r, n)) in &self.per_user {
            let _ = writeln!(out, "{u},{r},{n}");
        }
        out
    }
}

/// Ranks `I \ train(u)` for every user with test positives and scores the
/// list against them.
pub fn evaluate_scorer<S: ItemScorer + ?Sized>(
    scorer: &S,
    train: &InteractionDataset,
    test: &InteractionDataset,
    k: usize,
) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::Argument("cutoff K must be at least 1".into()));
    }
    if train.n_items() != test.n_items() || train.n_users() != test.n_users() {
        return Err(Error::Dataset(format!(
            "train split is {}x{}, test split is {}x{}",
            train.n_users(),
            train.n_items(),
            test.n_users(),
            test.n_items()
        )));
    }
    if scorer.n_items() != train.n_items() {
        return Err(Error::Dataset(format!(
            "scorer covers {} items, data has {}",
            scorer.n_items(),
            train.n_items()
        )));
    }
    let users: Vec<usize> = (0..test.n_users())
        .filter(|&u| !test.positives(u).is_empty())
        .collect();
    let per_user: Vec<(u32, (f64, f64))> = users
        .par_iter()
        .map(|&u| {
            let ranked = top_k(&scorer.user_scores(u), train.positives(u), k);
            let relevant = test.positives(u);
            Ok((
                u as u32,
                (
                    recall_at_k(&ranked, relevant, k)?,
                    ndcg_at_k(&ranked, relevant, k)?,
                ),
            ))
        })
        .collect::<Result<_>>()?;
    let n = per_user.len();
    let (recall, ndcg) = if n == 0 {
        (0.0, 0.0)
    } else {
        let (r, g) = per_user
            .iter()
            .fold((0.0, 0.0), |(r, g), (_, (ru, gu))| (r + ru, g + gu));
        (r / n as f64, g / n as f64)
    };
    Ok(MetricsReport {
        k,
        per_user: per_user.into_iter().collect(),
        recall,
        ndcg,
        n_evaluated: n,
        n_skipped: test.n_users() - n,
    })
}

pub fn evaluate(
    model: &EmbeddingModel,
    train: &InteractionDataset,
    test: &InteractionDataset,
    k: usize,
) -> Result<MetricsReport> {
    let prop = propagate(model)?;
    evaluate_scorer(&prop, train, test, k)
}
