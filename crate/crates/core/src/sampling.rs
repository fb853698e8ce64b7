//! User-based mini-batches and adaptive in-batch negative re-sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::PropagatedEmbeddings;

/// Sampled users, all of their training positives, and the deduplicated
/// union of those positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub users: Vec<u32>,
    pub positives: Vec<Vec<u32>>,
    /// Sorted, duplicate-free.
    pub items: Vec<u32>,
}

impl MiniBatch {
    pub fn from_users(ds: &InteractionDataset, users: Vec<u32>) -> Result<Self> {
        let mut positives = Vec::with_capacity(users.len());
        for &u in &users {
            if u as usize >= ds.n_users() {
                return Err(Error::Range {
                    kind: "user",
                    id: u as usize,
                    bound: ds.n_users(),
                });
            }
            let items = ds.positives(u as usize);
            if items.is_empty() {
                return Err(Error::Dataset(format!("user {u} has no positives")));
            }
            positives.push(items.to_vec());
        }
        let mut items: Vec<u32> = positives.iter().flatten().copied().collect();
        items.sort_unstable();
        items.dedup();
        Ok(Self {
            users,
            positives,
            items,
        })
    }

    /// Every trainable user in ascending id order.
    pub fn full(ds: &InteractionDataset) -> Result<Self> {
        let users = ds.trainable_users();
        if users.is_empty() {
            return Err(Error::Dataset("no user has training positives".into()));
        }
        Self::from_users(ds, users)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Column of `item` within `items`.
    pub fn item_column(&self, item: u32) -> Option<usize> {
        self.items.binary_search(&item).ok()
    }
}

/// Draws `batch_users` distinct users uniformly from those with positives
/// (all of them when fewer are available).
pub fn sample_minibatch<R: Rng>(
    ds: &InteractionDataset,
    batch_users: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    let mut users = ds.trainable_users();
    if users.is_empty() {
        return Err(Error::Dataset("no user has training positives".into()));
    }
    let take = batch_users.min(users.len());
    let (chosen, _) = users.partial_shuffle(rng, take);
    let chosen = chosen.to_vec();
    MiniBatch::from_users(ds, chosen)
}

/// Walks shuffled passes over the trainable users. Each pass visits every
/// user once; the final batch of a pass may be short.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<u32>,
    cursor: usize,
    epoch: usize,
}

impl EpochSampler {
    pub fn new(ds: &InteractionDataset) -> Result<Self> {
        let order = ds.trainable_users();
        if order.is_empty() {
            return Err(Error::Dataset("no user has training positives".into()));
        }
        let cursor = order.len();
        Ok(Self {
            order,
            cursor,
            epoch: 0,
        })
    }

    /// Completed passes.
    pub fn epoch(&self) -> usize {
        if self.cursor >= self.order.len() {
            self.epoch
        } else {
            self.epoch - 1
        }
    }

    pub fn next_batch<R: Rng>(
        &mut self,
        ds: &InteractionDataset,
        batch_users: usize,
        rng: &mut R,
    ) -> Result<MiniBatch> {
        if batch_users == 0 {
            return Err(Error::Argument("batch_users must be positive".into()));
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + batch_users).min(self.order.len());
        let users = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        MiniBatch::from_users(ds, users)
    }
}

/// Draws `m` candidates with replacement, each with probability
/// `softmax(scores)`. `scores[k]` belongs to `candidates[k]`.
///
/// Returns `Ok(None)` when there are no candidates, in which case the caller
/// skips the user for this step.
pub fn ans_resample<R: Rng>(
    scores: &[f64],
    candidates: &[u32],
    m: usize,
    rng: &mut R,
) -> Result<Option<Vec<u32>>> {
    if m == 0 {
        return Err(Error::Argument(
            "ANS sample count must be at least 1".into(),
        ));
    }
    if scores.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            expected: candidates.len(),
            found: scores.len(),
        });
    }
    if candidates.is_empty() {
        return Ok(None);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = scores.iter().map(|s| (s - max).exp());
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::Argument(format!("invalid ANS weights: {e}")))?;
    Ok(Some((0..m).map(|_| candidates[dist.sample(rng)]).collect()))
}

/// Adaptive negatives for every batch user: `m` draws from the softmax of
/// the current scores over the user's unobserved batch items. Users whose
/// batch items are all positives get an empty list.
pub fn draw_ans_negatives<R: Rng>(
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    batch
        .users
        .iter()
        .zip(&batch.positives)
        .map(|(&u, positives)| {
            let user = prop.final_user.row(u as usize);
            let candidates: Vec<u32> = batch
                .items
                .iter()
                .copied()
                .filter(|i| positives.binary_search(i).is_err())
                .collect();
            let scores: Vec<f64> = candidates
                .iter()
                .map(|&i| user.dot(&prop.final_item.row(i as usize)))
                .collect();
            Ok(ans_resample(&scores, &candidates, m, rng)?.unwrap_or_default())
        })
        .collect()
}
