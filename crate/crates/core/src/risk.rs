//! Mini-batch training risks and their analytic gradients.
//!
//! All three risks work on the score block between the batch users and the
//! batch item set `I_B`:
//!
//! * PDE: `-mean_{i in I_u+} f_u(i) + sum_{i in I_B} w_i f_u(i)` with
//!   `w = softmax(f_u(I_B))`,
//! * WD: as PDE but the softmax term only runs over `I_B \ I_u+`,
//! * pairwise: `mean_{i in I_u+, i' in N_u} softplus(f_u(i') - f_u(i))` over
//!   re-sampled negatives `N_u`.
//!
//! The per-user values are averaged over the users that were not skipped.
//! The objective adds `lambda * 0.5 * sum ||e||^2` over the layer-0 rows of the
//! batch users and batch items.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Backbone, EmbeddingModel, PropagatedEmbeddings};
use crate::sampling::MiniBatch;

/// Users per parallel work unit. Fixed so reductions do not depend on the
/// thread count.
const USER_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RiskKind {
    Pde,
    Wd,
    PairwiseAns,
}

impl fmt::Display for RiskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskKind::Pde => "pde",
            RiskKind::Wd => "wd",
            RiskKind::PairwiseAns => "pairwise-ans",
        })
    }
}

impl FromStr for RiskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pde" => Ok(RiskKind::Pde),
            "wd" => Ok(RiskKind::Wd),
            "pairwise-ans" | "pairwise_ans" => Ok(RiskKind::PairwiseAns),
            other => Err(Error::Argument(format!(
                "unknown risk {other:?}, expected one of pde, wd, pairwise-ans"
            ))),
        }
    }
}

/// Risk value for one mini-batch.
///
/// For PDE and WD, `positive_term` is the mean positive score and
/// `softmax_term` the mean softmax-weighted score, so
/// `total_risk = softmax_term - positive_term`. For the pairwise risk,
/// `softmax_term` holds the mean score of the sampled negatives and
/// `total_risk` is the mean softplus loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBreakdown {
    pub positive_term: f64,
    pub softmax_term: f64,
    pub total_risk: f64,
    pub l2_penalty: f64,
    pub lambda: f64,
    pub objective: f64,
    pub per_user_skipped: usize,
}

/// Sparse gradient of the objective with respect to the layer-0 tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub users: BTreeMap<u32, Array1<f64>>,
    pub items: BTreeMap<u32, Array1<f64>>,
}

impl GradientSet {
    pub fn user(&self, u: u32) -> Option<ArrayView1<'_, f64>> {
        self.users.get(&u).map(|g| g.view())
    }

    pub fn item(&self, i: u32) -> Option<ArrayView1<'_, f64>> {
        self.items.get(&i).map(|g| g.view())
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .values()
            .chain(self.items.values())
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    fn add_user(&mut self, u: u32, g: ArrayView1<f64>) {
        match self.users.get_mut(&u) {
            Some(acc) => *acc += &g,
            None => {
                self.users.insert(u, g.to_owned());
            }
        }
    }

    fn add_item(&mut self, i: u32, g: ArrayView1<f64>) {
        match self.items.get_mut(&i) {
            Some(acc) => *acc += &g,
            None => {
                self.items.insert(i, g.to_owned());
            }
        }
    }
}

fn softmax_weights(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

/// `sum_i softmax(s)_i * s_i`, max-shifted. Always within `[min s, max s]`.
pub fn softmax_weighted_mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument(
            "softmax-weighted mean of an empty score list".into(),
        ));
    }
    let w = softmax_weights(scores);
    Ok(w.iter().zip(scores).map(|(w, s)| w * s).sum())
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `0.5 * sum ||e||^2` over the layer-0 rows of the batch users and items,
/// each entity counted once.
pub fn l2_penalty(model: &EmbeddingModel, batch: &MiniBatch) -> f64 {
    let mut users = batch.users.clone();
    users.sort_unstable();
    users.dedup();
    let sq = |row: ArrayView1<f64>| row.dot(&row);
    let u: f64 = users
        .iter()
        .map(|&u| sq(model.user_emb().row(u as usize)))
        .sum();
    let i: f64 = batch
        .items
        .iter()
        .map(|&i| sq(model.item_emb().row(i as usize)))
        .sum();
    0.5 * (u + i)
}

struct UserTerm {
    positive: f64,
    negative: f64,
    risk: f64,
}

struct ChunkOut {
    terms: Vec<Option<UserTerm>>,
    /// d risk_u / d score, one row per user in the chunk, columns over `I_B`.
    score_grad: Array2<f64>,
}

fn columns(batch: &MiniBatch, items: &[u32]) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|&i| {
            batch.item_column(i).ok_or_else(|| {
                Error::Contract(format!("item {i} is not part of the batch item set"))
            })
        })
        .collect()
}

fn user_term(
    kind: RiskKind,
    scores: ArrayView1<f64>,
    pos_cols: &[usize],
    neg_cols: Option<&[usize]>,
    mut grad: ndarray::ArrayViewMut1<f64>,
) -> Option<UserTerm> {
    let n_pos = pos_cols.len() as f64;
    let positive = pos_cols.iter().map(|&c| scores[c]).sum::<f64>() / n_pos;
    match kind {
        RiskKind::Pde | RiskKind::Wd => {
            let cols: Vec<usize> = if kind == RiskKind::Pde {
                (0..scores.len()).collect()
            } else {
                let mut is_pos = vec![false; scores.len()];
                pos_cols.iter().for_each(|&c| is_pos[c] = true);
                (0..scores.len()).filter(|&c| !is_pos[c]).collect()
            };
            if cols.is_empty() {
                return None;
            }
            let s: Vec<f64> = cols.iter().map(|&c| scores[c]).collect();
            let w = softmax_weights(&s);
            let t: f64 = w.iter().zip(&s).map(|(w, s)| w * s).sum();
            for ((&c, &wc), &sc) in cols.iter().zip(&w).zip(&s) {
                grad[c] += wc * (1.0 + sc - t);
            }
            for &c in pos_cols {
                grad[c] -= 1.0 / n_pos;
            }
            Some(UserTerm {
                positive,
                negative: t,
                risk: t - positive,
            })
        }
        RiskKind::PairwiseAns => {
            let neg = neg_cols.filter(|n| !n.is_empty())?;
            let n_pairs = n_pos * neg.len() as f64;
            let mut loss = 0.0;
            for &p in pos_cols {
                for &n in neg {
                    let x = scores[n] - scores[p];
                    loss += softplus(x);
                    let g = sigmoid(x) / n_pairs;
                    grad[n] += g;
                    grad[p] -= g;
                }
            }
            let negative = neg.iter().map(|&c| scores[c]).sum::<f64>() / neg.len() as f64;
            Some(UserTerm {
                positive,
                negative,
                risk: loss / n_pairs,
            })
        }
    }
}

struct BatchEval {
    breakdown: RiskBreakdown,
    /// Rows aligned with `batch.users`.
    grad_final_users: Array2<f64>,
    /// Rows aligned with `batch.items`.
    grad_final_items: Array2<f64>,
}

fn evaluate_batch(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    kind: RiskKind,
    negatives: Option<&[Vec<u32>]>,
    lambda: f64,
    want_grad: bool,
) -> Result<BatchEval> {
    if batch.is_empty() || batch.items.is_empty() {
        return Err(Error::Argument("empty mini-batch".into()));
    }
    if prop.source_version != model.version() {
        return Err(Error::Contract("propagated embeddings are stale".into()));
    }
    if kind == RiskKind::PairwiseAns {
        match negatives {
            Some(n) if n.len() == batch.len() => {}
            Some(n) => {
                return Err(Error::DimensionMismatch {
                    expected: batch.len(),
                    found: n.len(),
                })
            }
            None => {
                return Err(Error::Argument(
                    "pairwise risk needs per-user negatives".into(),
                ))
            }
        }
    }

    let item_idx: Vec<usize> = batch.items.iter().map(|&i| i as usize).collect();
    let items_final = prop.final_item.select(Axis(0), &item_idx);
    let pos_cols = batch
        .positives
        .iter()
        .map(|p| {
            if p.is_empty() {
                Err(Error::Argument("batch user without positives".into()))
            } else {
                columns(batch, p)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let neg_cols = match negatives {
        Some(n) if kind == RiskKind::PairwiseAns => Some(
            n.iter()
                .map(|items| columns(batch, items))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let starts: Vec<usize> = (0..batch.len()).step_by(USER_CHUNK).collect();
    let chunks: Vec<ChunkOut> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + USER_CHUNK).min(batch.len());
            let user_idx: Vec<usize> = batch.users[start..end]
                .iter()
                .map(|&u| u as usize)
                .collect();
            let users_final = prop.final_user.select(Axis(0), &user_idx);
            let scores = users_final.dot(&items_final.t());
            let mut score_grad = Array2::zeros(scores.dim());
            let terms = (start..end)
                .zip(scores.rows())
                .zip(score_grad.rows_mut())
                .map(|((k, row), grad)| {
                    user_term(
                        kind,
                        row,
                        &pos_cols[k],
                        neg_cols.as_ref().map(|n| n[k].as_slice()),
                        grad,
                    )
                })
                .collect();
            ChunkOut { terms, score_grad }
        })
        .collect();

    let active = chunks.iter().flat_map(|c| &c.terms).flatten().count();
    let skipped = batch.len() - active;
    if active == 0 {
        return Err(Error::DegenerateBatch(format!(
            "all {} users skipped for the {kind} risk",
            batch.len()
        )));
    }
    let (mut pos, mut neg, mut risk) = (0.0, 0.0, 0.0);
    for t in chunks.iter().flat_map(|c| &c.terms).flatten() {
        pos += t.positive;
        neg += t.negative;
        risk += t.risk;
    }
    let n = active as f64;
    let l2 = l2_penalty(model, batch);
    let total_risk = risk / n;
    let breakdown = RiskBreakdown {
        positive_term: pos / n,
        softmax_term: neg / n,
        total_risk,
        l2_penalty: l2,
        lambda,
        objective: total_risk + lambda * l2,
        per_user_skipped: skipped,
    };

    let d = model.dim();
    let (grad_final_users, grad_final_items) = if want_grad {
        let parts: Vec<(Array2<f64>, Array2<f64>)> = starts
            .par_iter()
            .zip(&chunks)
            .map(|(&start, chunk)| {
                let end = (start + USER_CHUNK).min(batch.len());
                let user_idx: Vec<usize> = batch.users[start..end]
                    .iter()
                    .map(|&u| u as usize)
                    .collect();
                let users_final = prop.final_user.select(Axis(0), &user_idx);
                let g = &chunk.score_grad / n;
                (g.dot(&items_final), g.t().dot(&users_final))
            })
            .collect();
        let mut gu = Array2::zeros((batch.len(), d));
        let mut gi = Array2::zeros((batch.items.len(), d));
        for (&start, (u_part, i_part)) in starts.iter().zip(parts) {
            let end = start + u_part.nrows();
            gu.slice_mut(ndarray::s![start..end, ..]).assign(&u_part);
            gi += &i_part;
        }
        (gu, gi)
    } else {
        (Array2::zeros((0, d)), Array2::zeros((0, d)))
    };

    Ok(BatchEval {
        breakdown,
        grad_final_users,
        grad_final_items,
    })
}

fn collect_gradient(
    model: &EmbeddingModel,
    batch: &MiniBatch,
    eval: &BatchEval,
    lambda: f64,
) -> Result<GradientSet> {
    let mut out = GradientSet::default();
    match model.backbone() {
        Backbone::Mf => {
            for (k, &u) in batch.users.iter().enumerate() {
                out.add_user(u, eval.grad_final_users.row(k));
            }
            for (k, &i) in batch.items.iter().enumerate() {
                out.add_item(i, eval.grad_final_items.row(k));
            }
        }
        Backbone::Lgcn => {
            let d = model.dim();
            let mut gu = Array2::zeros((model.n_users(), d));
            let mut gi = Array2::zeros((model.n_items(), d));
            for (k, &u) in batch.users.iter().enumerate() {
                let mut row = gu.row_mut(u as usize);
                row += &eval.grad_final_users.row(k);
            }
            for (k, &i) in batch.items.iter().enumerate() {
                gi.row_mut(i as usize).assign(&eval.grad_final_items.row(k));
            }
            let (gu0, gi0) = model.backpropagate(gu.view(), gi.view())?;
            insert_nonzero(&mut out.users, gu0.view());
            insert_nonzero(&mut out.items, gi0.view());
        }
    }
    if lambda != 0.0 {
        let mut users = batch.users.clone();
        users.sort_unstable();
        users.dedup();
        for u in users {
            let reg = &model.user_emb().row(u as usize) * lambda;
            out.add_user(u, reg.view());
        }
        for &i in &batch.items {
            let reg = &model.item_emb().row(i as usize) * lambda;
            out.add_item(i, reg.view());
        }
    }
    Ok(out)
}

fn insert_nonzero(dst: &mut BTreeMap<u32, Array1<f64>>, table: ArrayView2<f64>) {
    for (id, row) in table.rows().into_iter().enumerate() {
        if row.iter().any(|&v| v != 0.0) {
            dst.insert(id as u32, row.to_owned());
        }
    }
}

/// Risk and objective for `kind`. `negatives` is required for the pairwise
/// risk and ignored otherwise.
pub fn risk(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    kind: RiskKind,
    negatives: Option<&[Vec<u32>]>,
    lambda: f64,
) -> Result<RiskBreakdown> {
    evaluate_batch(model, prop, batch, kind, negatives, lambda, false).map(|e| e.breakdown)
}

/// Risk together with the gradient of the objective on the layer-0 tables.
pub fn risk_and_gradient(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    kind: RiskKind,
    negatives: Option<&[Vec<u32>]>,
    lambda: f64,
) -> Result<(RiskBreakdown, GradientSet)> {
    let eval = evaluate_batch(model, prop, batch, kind, negatives, lambda, true)?;
    let grad = collect_gradient(model, batch, &eval, lambda)?;
    Ok((eval.breakdown, grad))
}

pub fn pde_risk(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    lambda: f64,
) -> Result<RiskBreakdown> {
    risk(model, prop, batch, RiskKind::Pde, None, lambda)
}

pub fn wd_risk(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    lambda: f64,
) -> Result<RiskBreakdown> {
    risk(model, prop, batch, RiskKind::Wd, None, lambda)
}

/// `negatives[k]` are the sampled negatives of `batch.users[k]`; users with
/// an empty list are skipped.
pub fn pairwise_ans_risk(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    negatives: &[Vec<u32>],
    lambda: f64,
) -> Result<RiskBreakdown> {
    risk(
        model,
        prop,
        batch,
        RiskKind::PairwiseAns,
        Some(negatives),
        lambda,
    )
}

pub fn grad_pde(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    lambda: f64,
) -> Result<GradientSet> {
    risk_and_gradient(model, prop, batch, RiskKind::Pde, None, lambda).map(|(_, g)| g)
}

pub fn grad_wd(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    lambda: f64,
) -> Result<GradientSet> {
    risk_and_gradient(model, prop, batch, RiskKind::Wd, None, lambda).map(|(_, g)| g)
}

pub fn grad_pairwise(
    model: &EmbeddingModel,
    prop: &PropagatedEmbeddings,
    batch: &MiniBatch,
    negatives: &[Vec<u32>],
    lambda: f64,
) -> Result<GradientSet> {
    risk_and_gradient(
        model,
        prop,
        batch,
        RiskKind::PairwiseAns,
        Some(negatives),
        lambda,
    )
    .map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::InteractionDataset;
    use crate::model::propagate;
    use ndarray::array;

    fn mf(users: Array2<f64>, items: Array2<f64>) -> EmbeddingModel {
        EmbeddingModel::from_tables(users, items, Backbone::Mf, 0, f64::INFINITY).unwrap()
    }

    #[test]
    fn softmax_mean_examples() {
        assert!((softmax_weighted_mean(&[2.5; 4]).unwrap() - 2.5).abs() < 1e-15);
        assert_eq!(softmax_weighted_mean(&[-1.25]).unwrap(), -1.25);
        let ln3 = 3f64.ln();
        let v = softmax_weighted_mean(&[0.0, ln3]).unwrap();
        assert!((v - 0.75 * ln3).abs() < 1e-15);
        assert!((v - 0.823959).abs() < 1e-6);
        assert!(softmax_weighted_mean(&[]).is_err());
        // Would overflow without the max shift.
        let big = softmax_weighted_mean(&[1000.0, 1000.0]).unwrap();
        assert!((big - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn single_item_batch_has_zero_risk() {
        let ds = InteractionDataset::from_positives(1, 2, vec![vec![1]]).unwrap();
        let m = mf(array![[0.3, -1.2]], array![[1.0, 1.0], [0.7, 2.0]]);
        let p = propagate(&m).unwrap();
        let b = MiniBatch::full(&ds).unwrap();
        let r = pde_risk(&m, &p, &b, 0.0).unwrap();
        assert!(r.total_risk.abs() < 1e-15);
        let g = grad_pde(&m, &p, &b, 0.0).unwrap();
        assert!(g.user(0).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(g.item(1).unwrap().iter().all(|v| v.abs() < 1e-15));
        // Only lambda * e survives.
        let g = grad_pde(&m, &p, &b, 0.5).unwrap();
        assert!((g.user(0).unwrap()[1] - (-0.6)).abs() < 1e-15);
    }

    #[test]
    fn wd_single_negative() {
        let ds = InteractionDataset::from_positives(2, 3, vec![vec![0, 1], vec![2]]).unwrap();
        let m = mf(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[0.5, 0.0], [1.5, 0.0], [2.0, 3.0]],
        );
        let p = propagate(&m).unwrap();
        let b = MiniBatch::from_users(&ds, vec![0]).unwrap();
        // I_B = {0, 1} = I_0+, nothing left to contrast against.
        assert!(matches!(
            wd_risk(&m, &p, &b, 0.0),
            Err(Error::DegenerateBatch(_))
        ));
        let b = MiniBatch::full(&ds).unwrap();
        let r = wd_risk(&m, &p, &b, 0.0).unwrap();
        // user 0: -(0.5 + 1.5)/2 + f(2) = -1 + 2; user 1: -3 + softmax mean over {0, 1} of (0, 0).
        assert!((r.total_risk - ((-1.0 + 2.0) + (-3.0 + 0.0)) / 2.0).abs() < 1e-12);
        assert_eq!(r.per_user_skipped, 0);
    }

    #[test]
    fn equal_scores_pairwise_is_ln2() {
        let ds = InteractionDataset::from_positives(1, 3, vec![vec![0, 1, 2]]).unwrap();
        let m = mf(array![[1.0]], array![[1.0], [1.0], [1.0]]);
        let p = propagate(&m).unwrap();
        let b = MiniBatch::full(&ds).unwrap();
        let r = pairwise_ans_risk(&m, &p, &b, &[vec![0, 2]], 0.0).unwrap();
        assert!((r.total_risk - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            pairwise_ans_risk(&m, &p, &b, &[vec![]], 0.0),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn objective_adds_scaled_penalty() {
        let ds = InteractionDataset::from_positives(1, 1, vec![vec![0]]).unwrap();
        let m = mf(array![[3.0, 4.0]], array![[0.0, 0.0]]);
        let p = propagate(&m).unwrap();
        let b = MiniBatch::full(&ds).unwrap();
        assert_eq!(l2_penalty(&m, &b), 12.5);
        let r = pde_risk(&m, &p, &b, 0.1).unwrap();
        assert_eq!(r.objective, r.total_risk + 0.1 * r.l2_penalty);
    }

    #[test]
    fn risk_names_parse() {
        assert_eq!(
            "pairwise-ans".parse::<RiskKind>().unwrap(),
            RiskKind::PairwiseAns
        );
        let err = "bpr".parse::<RiskKind>().unwrap_err().to_string();
        assert!(err.contains("pde, wd, pairwise-ans"));
    }
}
