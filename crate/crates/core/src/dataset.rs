//! Interaction files, summary statistics and planted synthetic data.
//!
//! Files follow the LightGCN layout: one line per user, the first token is the
//! user id and the remaining tokens are the ids of that user's positive items.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Positive-only feedback: for every user, the sorted duplicate-free set of
/// items they interacted with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    positives: Vec<Vec<u32>>,
    split: SplitTag,
}

impl InteractionDataset {
    /// Builds a dataset from per-user item lists. Lists are sorted and
    /// deduplicated; every id is range checked.
    pub fn from_positives(
        n_users: usize,
        n_items: usize,
        mut positives: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if positives.len() > n_users {
            return Err(Error::Range {
                kind: "user",
                id: positives.len() - 1,
                bound: n_users,
            });
        }
        positives.resize(n_users, Vec::new());
        for items in &mut positives {
            items.sort_unstable();
            items.dedup();
            if let Some(&last) = items.last() {
                if last as usize >= n_items {
                    return Err(Error::Range {
                        kind: "item",
                        id: last as usize,
                        bound: n_items,
                    });
                }
            }
        }
        Ok(Self {
            n_users,
            n_items,
            positives,
            split: SplitTag::Train,
        })
    }

    pub fn empty(n_users: usize, n_items: usize) -> Self {
        Self {
            n_users,
            n_items,
            positives: vec![Vec::new(); n_users],
            split: SplitTag::Train,
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Sorted positive items of `user`.
    pub fn positives(&self, user: usize) -> &[u32] {
        &self.positives[user]
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.positives[user].binary_search(&item).is_ok()
    }

    pub fn n_interactions(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// Users with at least one positive, in ascending id order.
    pub fn trainable_users(&self) -> Vec<u32> {
        (0..self.n_users)
            .filter(|&u| !self.positives[u].is_empty())
            .map(|u| u as u32)
            .collect()
    }

    /// Number of users interacting with each item.
    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_items];
        for items in &self.positives {
            for &i in items {
                deg[i as usize] += 1;
            }
        }
        deg
    }

    /// Union of two datasets over the same id space.
    pub fn merge(&self, other: &InteractionDataset) -> Result<Self> {
        if self.n_users != other.n_users || self.n_items != other.n_items {
            return Err(Error::Dataset(format!(
                "cannot merge {}x{} with {}x{}",
                self.n_users, self.n_items, other.n_users, other.n_items
            )));
        }
        let positives = self
            .positives
            .iter()
            .zip(&other.positives)
            .map(|(a, b)| a.iter().chain(b).copied().collect())
            .collect();
        Self::from_positives(self.n_users, self.n_items, positives)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[u32])> {
        self.positives
            .iter()
            .enumerate()
            .map(|(u, p)| (u, p.as_slice()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatsReport {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub density: f64,
}

pub fn dataset_stats(ds: &InteractionDataset) -> StatsReport {
    let n_interactions = ds.n_interactions();
    let cells = ds.n_users as f64 * ds.n_items as f64;
    StatsReport {
        n_users: ds.n_users,
        n_items: ds.n_items,
        n_interactions,
        density: if cells > 0.0 {
            n_interactions as f64 / cells
        } else {
            0.0
        },
    }
}

fn parse_lines(text: &str) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let mut tokens = line.split_ascii_whitespace();
        let Some(first) = tokens.next() else {
            continue;
        };
        let parse = |tok: &str| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("malformed id token {tok:?}"),
            })
        };
        let user = parse(first)?;
        let items = tokens.map(parse).collect::<Result<Vec<_>>>()?;
        rows.push((user, items));
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses interaction text against declared id bounds.
pub fn parse_interactions(
    text: &str,
    n_users: usize,
    n_items: usize,
) -> Result<InteractionDataset> {
    let mut positives = vec![Vec::new(); n_users];
    for (user, items) in parse_lines(text)? {
        if user >= n_users {
            return Err(Error::Range {
                kind: "user",
                id: user,
                bound: n_users,
            });
        }
        for item in items {
            if item >= n_items {
                return Err(Error::Range {
                    kind: "item",
                    id: item,
                    bound: n_items,
                });
            }
            positives[user].push(item as u32);
        }
    }
    InteractionDataset::from_positives(n_users, n_items, positives)
}

pub fn load_interactions(
    path: impl AsRef<Path>,
    n_users: usize,
    n_items: usize,
) -> Result<InteractionDataset> {
    let path = path.as_ref();
    parse_interactions(&read_text(path)?, n_users, n_items)
}

/// Smallest `(n_users, n_items)` bounds admitting every id in the given files.
pub fn infer_bounds<P: AsRef<Path>>(paths: &[P]) -> Result<(usize, usize)> {
    let (mut n_users, mut n_items) = (0, 0);
    for path in paths {
        for (user, items) in parse_lines(&read_text(path.as_ref())?)? {
            n_users = n_users.max(user + 1);
            if let Some(&max) = items.iter().max() {
                n_items = n_items.max(max + 1);
            }
        }
    }
    Ok((n_users, n_items))
}

pub fn format_interactions(ds: &InteractionDataset) -> String {
    let mut out = String::new();
    for (user, items) in ds.iter() {
        if items.is_empty() {
            continue;
        }
        let _ = write!(out, "{user}");
        for item in items {
            let _ = write!(out, " {item}");
        }
        out.push('\n');
    }
    out
}

/// Writes the dataset in the same line format `load_interactions` reads.
/// Users without positives are omitted.
pub fn write_interactions(ds: &InteractionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_interactions(ds)).map_err(|e| Error::io(path, e))
}

/// Carves a per-user validation split out of `ds`. Each user with at least two
/// positives moves `round(fraction * n)` of them (keeping at least one) into
/// the holdout set.
pub fn split_holdout<R: Rng>(
    ds: &InteractionDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<(InteractionDataset, InteractionDataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Argument(format!(
            "holdout fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut train = Vec::with_capacity(ds.n_users);
    let mut holdout = Vec::with_capacity(ds.n_users);
    for (_, items) in ds.iter() {
        let mut items = items.to_vec();
        let take = if items.len() >= 2 {
            ((fraction * items.len() as f64).round() as usize).min(items.len() - 1)
        } else {
            0
        };
        items.shuffle(rng);
        let held = items.split_off(items.len() - take);
        train.push(items);
        holdout.push(held);
    }
    Ok((
        InteractionDataset::from_positives(ds.n_users, ds.n_items, train)?,
        InteractionDataset::from_positives(ds.n_users, ds.n_items, holdout)?
            .with_split(SplitTag::Test),
    ))
}

/// Planted embeddings behind a synthetic dataset. User `u` draws positives
/// with probability proportional to `exp(<true_user_u, true_item_i>)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    pub true_user_embeddings: Array2<f64>,
    pub true_item_embeddings: Array2<f64>,
}

impl SyntheticGroundTruth {
    pub fn dim(&self) -> usize {
        self.true_user_embeddings.ncols()
    }

    pub fn true_scores(&self, user: usize) -> Vec<f64> {
        self.true_item_embeddings
            .dot(&self.true_user_embeddings.row(user))
            .to_vec()
    }

    /// `kind<TAB>id<TAB>v_1<TAB>...<TAB>v_d`, users first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (kind, table) in [
            ("user", &self.true_user_embeddings),
            ("item", &self.true_item_embeddings),
        ] {
            for (id, row) in table.rows().into_iter().enumerate() {
                let _ = write!(out, "{kind}\t{id}");
                for v in row {
                    let _ = write!(out, "\t{v:.16e}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut users: Vec<Vec<f64>> = Vec::new();
        let mut items: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: idx + 1,
                message,
            };
            let mut fields = line.split('\t');
            let kind = fields.next().unwrap_or_default();
            let id: usize = fields
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("missing entity id".into()))?;
            let values = fields
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| bad(format!("bad value {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = match kind {
                "user" => &mut users,
                "item" => &mut items,
                other => return Err(bad(format!("unknown entity kind {other:?}"))),
            };
            if id != table.len() {
                return Err(bad(format!(
                    "expected {kind} id {}, found {id}",
                    table.len()
                )));
            }
            table.push(values);
        }
        let d = users.first().or(items.first()).map_or(0, Vec::len);
        let to_array = |rows: Vec<Vec<f64>>| {
            if let Some(row) = rows.iter().find(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            let n = rows.len();
            Ok(Array2::from_shape_vec((n, d), rows.concat()).expect("shape checked"))
        };
        Ok(Self {
            true_user_embeddings: to_array(users)?,
            true_item_embeddings: to_array(items)?,
        })
    }
}

/// Draws `k` distinct indices by sequential renormalised softmax draws over
/// `scores`. Returned in draw order.
pub fn softmax_sample_without_replacement<R: Rng>(
    scores: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut drawn = Vec::with_capacity(k);
    for _ in 0..k.min(scores.len()) {
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (idx, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            pick = Some(idx);
            if target < acc {
                break;
            }
        }
        let idx = pick.expect("at least one item with positive weight remains");
        weights[idx] = 0.0;
        drawn.push(idx);
    }
    drawn
}

const SYNTHETIC_STREAM: u64 = 0x5EED_DA7A;

/// Samples a dataset whose positives follow a planted exponential-family
/// density with uniform base measure.
pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    d: usize,
    positives_per_user: usize,
    seed: u64,
) -> Result<(InteractionDataset, SyntheticGroundTruth)> {
    if positives_per_user > n_items {
        return Err(Error::Argument(format!(
            "positives_per_user ({positives_per_user}) exceeds n_items ({n_items})"
        )));
    }
    if d == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A separate stream keeps the planted draws independent of a model
    // initialised from the same seed.
    rng.set_stream(SYNTHETIC_STREAM);
    let scale = 1.0 / (d as f64).sqrt();
    let mut gaussian = |rows: usize| {
        Array2::from_shape_simple_fn((rows, d), || scale * rng.sample::<f64, _>(StandardNormal))
    };
    let truth = SyntheticGroundTruth {
        true_user_embeddings: gaussian(n_users),
        true_item_embeddings: gaussian(n_items),
    };
    let positives = (0..n_users)
        .map(|u| {
            softmax_sample_without_replacement(&truth.true_scores(u), positives_per_user, &mut rng)
                .into_iter()
                .map(|i| i as u32)
                .collect()
        })
        .collect();
    let ds = InteractionDataset::from_positives(n_users, n_items, positives)?;
    Ok((ds, truth))
}

/// Test split holding, for each user, the `k` items with the highest planted
/// score among the items not already in `train`.
pub fn planted_test_split(
    train: &InteractionDataset,
    truth: &SyntheticGroundTruth,
    k: usize,
) -> Result<InteractionDataset> {
    let positives = (0..train.n_users())
        .map(|u| {
            let scores = truth.true_scores(u);
            let mut candidates: Vec<u32> = (0..train.n_items() as u32)
                .filter(|&i| !train.contains(u, i))
                .collect();
            candidates.sort_by(|&a, &b| {
                scores[b as usize]
                    .total_cmp(&scores[a as usize])
                    .then(a.cmp(&b))
            });
            candidates.truncate(k);
            candidates
        })
        .collect();
    Ok(
        InteractionDataset::from_positives(train.n_users(), train.n_items(), positives)?
            .with_split(SplitTag::Test),
    )
}
