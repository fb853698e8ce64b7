//! Brute-force reference quantities on small item universes.
//!
//! Everything here is evaluated by direct summation over the full item set in
//! `f64`, independent of the mini-batch code in [`crate::risk`]. Instances are
//! capped at [`MAX_ORACLE_ITEMS`] items.

use crate::error::{Error, Result};
use crate::risk::softplus;

pub const MAX_ORACLE_ITEMS: usize = 64;

/// Largest support for which [`w1_dual_enumeration`] walks all `2^n`
/// indicator functions.
pub const MAX_DUAL_ITEMS: usize = 20;

/// Per-user scores, positive sets and a base density over a shared item set.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    p0: Vec<f64>,
    scores: Vec<Vec<f64>>,
    positives: Vec<Vec<usize>>,
}

impl OracleInstance {
    pub fn new(p0: Vec<f64>, scores: Vec<Vec<f64>>, positives: Vec<Vec<usize>>) -> Result<Self> {
        let n = p0.len();
        if n == 0 || n > MAX_ORACLE_ITEMS {
            return Err(Error::Argument(format!(
                "oracle instances need 1..={MAX_ORACLE_ITEMS} items, got {n}"
            )));
        }
        if p0.iter().any(|&p| p.is_nan() || p < 0.0) || (p0.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::Argument("p0 must be a probability vector".into()));
        }
        if scores.len() != positives.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                found: positives.len(),
            });
        }
        if let Some(row) = scores.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: row.len(),
            });
        }
        if let Some(&i) = positives.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::Range {
                kind: "item",
                id: i,
                bound: n,
            });
        }
        Ok(Self {
            p0,
            scores,
            positives,
        })
    }

    /// Instance with the uniform base density.
    pub fn uniform(scores: Vec<Vec<f64>>, positives: Vec<Vec<usize>>) -> Result<Self> {
        let n = scores.first().map_or(0, Vec::len);
        Self::new(uniform(n), scores, positives)
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn n_items(&self) -> usize {
        self.p0.len()
    }

    pub fn n_users(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self, user: usize) -> &[f64] {
        &self.scores[user]
    }

    pub fn positives(&self, user: usize) -> &[usize] {
        &self.positives[user]
    }

    fn active_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_users()).filter(|&u| !self.positives[u].is_empty())
    }
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `sum_i q_i f_i`.
pub fn expectation(q: &[f64], f: &[f64]) -> f64 {
    q.iter().zip(f).map(|(q, f)| q * f).sum()
}

/// `A(f) = log sum_i p0_i exp(f_i)`, shifted by the largest score on the
/// support of `p0`.
pub fn exact_partition(scores: &[f64], p0: &[f64]) -> f64 {
    let max = scores
        .iter()
        .zip(p0)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .zip(p0)
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, p)| p * (s - max).exp())
        .sum();
    max + sum.ln()
}

/// `p_f(i) = p0_i exp(f_i - A(f))`.
pub fn exact_density(scores: &[f64], p0: &[f64]) -> Vec<f64> {
    let a = exact_partition(scores, p0);
    scores
        .iter()
        .zip(p0)
        .map(|(s, &p)| if p > 0.0 { p * (s - a).exp() } else { 0.0 })
        .collect()
}

/// `KLD(q || p0) = sum_i q_i log(q_i / p0_i)` with `0 log 0 = 0`. Returns
/// `+inf` when `q` puts mass where `p0` has none.
pub fn exact_kld(q: &[f64], p0: &[f64]) -> f64 {
    let mut kld = 0.0;
    for (&qi, &pi) in q.iter().zip(p0) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return f64::INFINITY;
        }
        kld += qi * (qi / pi).ln();
    }
    kld
}

/// The closed-form maximiser of `E_q[f] - KLD(q || p0)` over distributions
/// `q`: `q* ∝ p0 exp(f)`, which is the model density itself.
pub fn optimal_generator(scores: &[f64], p0: &[f64]) -> Vec<f64> {
    exact_density(scores, p0)
}

/// `L(q) = E_q[f] - KLD(q || p0)`.
pub fn generator_objective(q: &[f64], scores: &[f64], p0: &[f64]) -> f64 {
    expectation(q, scores) - exact_kld(q, p0)
}

fn mean_over<I: Iterator<Item = f64>>(values: I) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn positive_mean(inst: &OracleInstance, u: usize) -> f64 {
    let f = inst.scores(u);
    mean_over(inst.positives(u).iter().map(|&i| f[i]))
}

/// Mean over users of `-mean_{I_u+} f + E_{p_f}[f]`; users without positives
/// are skipped.
pub fn exact_risk(inst: &OracleInstance) -> f64 {
    mean_over(inst.active_users().map(|u| {
        let f = inst.scores(u);
        -positive_mean(inst, u) + expectation(&exact_density(f, inst.p0()), f)
    }))
}

/// `C = E_u mean_{I_u+}[-log p0(i)]`, the score-independent part of the
/// penalised likelihood.
pub fn nll_constant(inst: &OracleInstance) -> f64 {
    mean_over(
        inst.active_users()
            .map(|u| mean_over(inst.positives(u).iter().map(|&i| -inst.p0()[i].ln()))),
    )
}

/// Penalised negative log-likelihood `E_u[mean_{I_u+}(-log p_f(i)) +
/// KLD(p_f || p0)]`, evaluated from the normalised density.
pub fn penalised_nll_risk(inst: &OracleInstance) -> f64 {
    mean_over(inst.active_users().map(|u| {
        let p = exact_density(inst.scores(u), inst.p0());
        let nll = mean_over(inst.positives(u).iter().map(|&i| -p[i].ln()));
        nll + exact_kld(&p, inst.p0())
    }))
}

/// Exact risk with both the model density and `p0` restricted to each
/// user's unobserved items `I \ I_u+` (and `p0` renormalised there). Users
/// with no unobserved item are skipped.
pub fn exact_wd_risk(inst: &OracleInstance) -> f64 {
    mean_over(inst.active_users().filter_map(|u| {
        let f = inst.scores(u);
        let mut p0 = inst.p0().to_vec();
        for &i in inst.positives(u) {
            p0[i] = 0.0;
        }
        let z: f64 = p0.iter().sum();
        if z <= 0.0 {
            return None;
        }
        p0.iter_mut().for_each(|p| *p /= z);
        Some(-positive_mean(inst, u) + expectation(&exact_density(f, &p0), f))
    }))
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(())
}

/// Wasserstein-1 under the 0/1 ground metric, i.e. total variation
/// `0.5 * sum |P - Q|`.
pub fn w1_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Dual form `max_f E_P[f] - E_Q[f]` over functions with oscillation at most
/// one, by enumerating every 0/1 indicator (constant offsets cancel).
pub fn w1_dual_enumeration(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let n = p.len();
    if n > MAX_DUAL_ITEMS {
        return Err(Error::Argument(format!(
            "dual enumeration limited to {MAX_DUAL_ITEMS} items, got {n}"
        )));
    }
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1u32 << n) {
        let v: f64 = (0..n)
            .filter(|&k| mask & (1 << k) != 0)
            .map(|k| p[k] - q[k])
            .sum();
        best = best.max(v);
    }
    Ok(best)
}

/// Pairwise risk against its softplus-of-mean lower bound for one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseBound {
    /// `mean_{i in I+} E_{i' ~ Q}[softplus(f(i') - f(i))]`.
    pub r_pair: f64,
    /// `softplus(mean_{i in I+} E_{i' ~ Q}[f(i') - f(i)])`.
    pub s_mu: f64,
    pub gap: f64,
    /// `max f - min f` over all items.
    pub lipschitz: f64,
}

impl PairwiseBound {
    /// `0 <= gap <= lipschitz`, allowing `tol` for rounding.
    pub fn holds(&self, tol: f64) -> bool {
        self.gap >= -tol && self.gap <= self.lipschitz + tol
    }
}

pub fn pairwise_bound_check(
    scores: &[f64],
    positives: &[usize],
    q: &[f64],
) -> Result<PairwiseBound> {
    check_pair(scores, q)?;
    if positives.is_empty() {
        return Err(Error::Argument("pairwise bound needs positives".into()));
    }
    let n_pos = positives.len() as f64;
    let mut r_pair = 0.0;
    let mut mu = 0.0;
    for &i in positives {
        for (j, &qj) in q.iter().enumerate() {
            let diff = scores[j] - scores[i];
            r_pair += qj * softplus(diff);
            mu += qj * diff;
        }
    }
    r_pair /= n_pos;
    mu /= n_pos;
    let s_mu = softplus(mu);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PairwiseBound {
        r_pair,
        s_mu,
        gap: r_pair - s_mu,
        lipschitz: max - min,
    })
}
