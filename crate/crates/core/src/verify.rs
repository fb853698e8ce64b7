//! Randomised property suite pitting the estimators against the oracle.
//!
//! Each property runs over `trials` random desk-scale instances and reports
//! the largest deviation seen against its tolerance.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::dataset::InteractionDataset;
use crate::error::Result;
use crate::model::{apply_clipping, propagate, Backbone, EmbeddingModel};
use crate::oracle::{self, OracleInstance};
use crate::risk::{self, risk_and_gradient, RiskKind};
use crate::sampling::{draw_ans_negatives, MiniBatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    /// Dirichlet draws per instance for the generator optimality check.
    pub generator_samples: usize,
    /// Test hook: perturbs one analytic gradient entry so the gradient
    /// property must fail.
    pub corrupt_gradient: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            generator_samples: 10_000,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<32} {:>7} {:>13} {:>10}  {}\n",
            "property", "trials", "max_dev", "tol", "status"
        );
        for p in &self.properties {
            let _ = writeln!(
                out,
                "{:<32} {:>7} {:>13.3e} {:>10.1e}  {}",
                p.name,
                p.trials,
                p.max_deviation,
                p.tolerance,
                if p.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    trials: usize,
    max_deviation: f64,
    failed: bool,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            trials: 0,
            max_deviation: 0.0,
            failed: false,
        }
    }

    fn record(&mut self, deviation: f64) {
        self.trials += 1;
        if deviation.is_nan() || deviation > self.tolerance {
            self.failed = true;
        }
        if deviation.is_nan() {
            self.max_deviation = f64::NAN;
        } else if !self.max_deviation.is_nan() {
            self.max_deviation = self.max_deviation.max(deviation);
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name,
            trials: self.trials,
            max_deviation: self.max_deviation,
            tolerance: self.tolerance,
            passed: !self.failed && self.trials > 0,
        }
    }
}

fn random_probability<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

fn random_scores<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Uniform draw from the simplex: normalised unit exponentials, i.e.
/// Dirichlet(1, ..., 1).
fn dirichlet_ones<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut q: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= z);
    q
}

/// Random dataset in which every user has at least one positive and, when
/// `cover_items` is set, every item is some user's positive.
pub fn random_dataset<R: Rng>(
    n_users: usize,
    n_items: usize,
    cover_items: bool,
    rng: &mut R,
) -> InteractionDataset {
    let mut positives: Vec<Vec<u32>> = (0..n_users)
        .map(|_| {
            let k = rng.random_range(1..=n_items.min(4));
            sample(rng, n_items, k)
                .into_iter()
                .map(|i| i as u32)
                .collect()
        })
        .collect();
    if cover_items {
        for i in 0..n_items as u32 {
            if !positives.iter().any(|p| p.contains(&i)) {
                let u = rng.random_range(0..n_users);
                positives[u].push(i);
            }
        }
    }
    InteractionDataset::from_positives(n_users, n_items, positives)
        .expect("ids drawn within bounds")
}

/// Model with `N(0, scale^2)` tables; LGCN models get the graph of `ds`.
pub fn random_model<R: Rng>(
    ds: &InteractionDataset,
    d: usize,
    backbone: Backbone,
    layers: usize,
    scale: f64,
    rng: &mut R,
) -> EmbeddingModel {
    let mut table = |rows: usize| {
        Array2::from_shape_simple_fn((rows, d), || scale * rng.sample::<f64, _>(StandardNormal))
    };
    let users = table(ds.n_users());
    let items = table(ds.n_items());
    let mut model = EmbeddingModel::from_tables(users, items, backbone, layers, f64::INFINITY)
        .expect("tables share d");
    model.attach_graph(ds).expect("dataset matches model");
    model
}

/// Largest `|analytic - fd| / max(1, |fd|)` over every table entry, with
/// central differences of step `h` on the objective.
pub fn finite_difference_check(
    model: &EmbeddingModel,
    batch: &MiniBatch,
    kind: RiskKind,
    negatives: Option<&[Vec<u32>]>,
    lambda: f64,
    h: f64,
    corrupt: bool,
) -> Result<f64> {
    let prop = propagate(model)?;
    let (_, grad) = risk_and_gradient(model, &prop, batch, kind, negatives, lambda)?;
    let objective = |m: &EmbeddingModel| -> Result<f64> {
        let p = propagate(m)?;
        Ok(risk::risk(m, &p, batch, kind, negatives, lambda)?.objective)
    };
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (is_user, rows) in [(true, model.n_users()), (false, model.n_items())] {
        for r in 0..rows {
            for c in 0..model.dim() {
                let at = |m: &mut EmbeddingModel, v: f64| {
                    let (u, i) = m.tables_mut();
                    if is_user {
                        u[[r, c]] = v;
                    } else {
                        i[[r, c]] = v;
                    }
                };
                let base = if is_user {
                    model.user_emb()[[r, c]]
                } else {
                    model.item_emb()[[r, c]]
                };
                at(&mut probe, base + h);
                let plus = objective(&probe)?;
                at(&mut probe, base - h);
                let minus = objective(&probe)?;
                at(&mut probe, base);
                let fd = (plus - minus) / (2.0 * h);
                let entry = if is_user {
                    grad.user(r as u32)
                } else {
                    grad.item(r as u32)
                };
                let mut analytic = entry.map_or(0.0, |g| g[c]);
                if corrupt && is_user && r == 0 && c == 0 {
                    analytic += 1e-2;
                }
                worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}

fn oracle_from_model(model: &EmbeddingModel, ds: &InteractionDataset) -> Result<OracleInstance> {
    let prop = propagate(model)?;
    let scores = (0..ds.n_users())
        .map(|u| prop.user_scores(u).to_vec())
        .collect();
    let positives = ds
        .iter()
        .map(|(_, p)| p.iter().map(|&i| i as usize).collect())
        .collect();
    OracleInstance::uniform(scores, positives)
}

fn kld_identity(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> PropertyResult {
    let mut t = Tracker::new("kld_identity", 1e-10);
    for _ in 0..opts.trials {
        let n = rng.random_range(2..=12);
        let f = random_scores(n, 1.5, rng);
        let p0 = if rng.random_bool(0.5) {
            oracle::uniform(n)
        } else {
            random_probability(n, rng)
        };
        let p = oracle::exact_density(&f, &p0);
        let lhs = oracle::exact_kld(&p, &p0);
        let rhs = oracle::expectation(&p, &f) - oracle::exact_partition(&f, &p0);
        t.record((lhs - rhs).abs());
    }
    t.finish()
}

fn risk_forms(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> PropertyResult {
    let mut t = Tracker::new("nll_vs_expected_score_risk", 1e-10);
    for _ in 0..opts.trials {
        let n_users = rng.random_range(1..=8);
        let n = rng.random_range(2..=12);
        let p0 = random_probability(n, rng);
        let scores = (0..n_users).map(|_| random_scores(n, 1.0, rng)).collect();
        let positives = (0..n_users)
            .map(|_| {
                let k = rng.random_range(1..=n.min(4));
                sample(rng, n, k).into_vec()
            })
            .collect();
        let inst = OracleInstance::new(p0, scores, positives).expect("valid instance");
        let lhs = oracle::penalised_nll_risk(&inst) - oracle::nll_constant(&inst);
        t.record((lhs - oracle::exact_risk(&inst)).abs());
    }
    t.finish()
}

fn generator_optimality(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> PropertyResult {
    let mut t = Tracker::new("optimal_generator_dominates", 1e-9);
    for _ in 0..opts.trials {
        let n = rng.random_range(2..=8);
        let f = random_scores(n, 1.0, rng);
        let p0 = if rng.random_bool(0.5) {
            oracle::uniform(n)
        } else {
            random_probability(n, rng)
        };
        let q_star = oracle::optimal_generator(&f, &p0);
        let best = oracle::generator_objective(&q_star, &f, &p0);
        let mut excess: f64 = 0.0;
        for _ in 0..opts.generator_samples {
            let q = dirichlet_ones(n, rng);
            excess = excess.max(oracle::generator_objective(&q, &f, &p0) - best);
        }
        t.record(excess);
    }
    t.finish()
}

fn w1_primal_dual(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> PropertyResult {
    let mut t = Tracker::new("w1_primal_equals_dual", 1e-12);
    for _ in 0..opts.trials {
        let n = rng.random_range(1..=6);
        let p = random_probability(n, rng);
        let q = random_probability(n, rng);
        let primal = oracle::w1_discrete(&p, &q).expect("same length");
        let dual = oracle::w1_dual_enumeration(&p, &q).expect("small support");
        t.record((primal - dual).abs());
    }
    t.finish()
}

fn estimator_consistency(
    opts: &VerifyOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(PropertyResult, PropertyResult)> {
    let mut pde = Tracker::new("pde_full_batch_equals_exact", 1e-10);
    let mut wd = Tracker::new("wd_full_batch_equals_exact", 1e-10);
    for _ in 0..opts.trials {
        let n_users = rng.random_range(1..=8);
        let n_items = rng.random_range(2..=12);
        let d = rng.random_range(1..=6);
        let ds = random_dataset(n_users, n_items, true, rng);
        let backbone = if rng.random_bool(0.5) {
            Backbone::Mf
        } else {
            Backbone::Lgcn
        };
        let model = random_model(&ds, d, backbone, 2, 0.7, rng);
        let prop = propagate(&model)?;
        let batch = MiniBatch::full(&ds)?;
        let inst = oracle_from_model(&model, &ds)?;
        let r = risk::pde_risk(&model, &prop, &batch, 0.0)?;
        pde.record((r.total_risk - oracle::exact_risk(&inst)).abs());
        match risk::wd_risk(&model, &prop, &batch, 0.0) {
            Ok(r) => wd.record((r.total_risk - oracle::exact_wd_risk(&inst)).abs()),
            Err(crate::Error::DegenerateBatch(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((pde.finish(), wd.finish()))
}

fn gradient_checks(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<Vec<PropertyResult>> {
    let cases = [
        ("grad_pde_mf", RiskKind::Pde, Backbone::Mf),
        ("grad_pde_lgcn", RiskKind::Pde, Backbone::Lgcn),
        ("grad_wd_mf", RiskKind::Wd, Backbone::Mf),
        ("grad_wd_lgcn", RiskKind::Wd, Backbone::Lgcn),
        ("grad_pairwise_mf", RiskKind::PairwiseAns, Backbone::Mf),
        ("grad_pairwise_lgcn", RiskKind::PairwiseAns, Backbone::Lgcn),
    ];
    let per_case = opts.trials.div_ceil(5).max(1);
    let mut out = Vec::new();
    for (name, kind, backbone) in cases {
        let mut t = Tracker::new(name, 1e-4);
        while t.trials < per_case {
            let ds = random_dataset(
                rng.random_range(1..=8),
                rng.random_range(2..=12),
                false,
                rng,
            );
            let model = random_model(&ds, rng.random_range(1..=6), backbone, 2, 0.5, rng);
            let batch = MiniBatch::full(&ds)?;
            let lambda = if rng.random_bool(0.5) { 0.0 } else { 0.05 };
            let prop = propagate(&model)?;
            let negatives = draw_ans_negatives(&prop, &batch, 3, rng)?;
            let negatives = (kind == RiskKind::PairwiseAns).then_some(negatives.as_slice());
            match finite_difference_check(
                &model,
                &batch,
                kind,
                negatives,
                lambda,
                1e-5,
                opts.corrupt_gradient,
            ) {
                Ok(dev) => t.record(dev),
                Err(crate::Error::DegenerateBatch(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.push(t.finish());
    }
    Ok(out)
}

fn pairwise_bounds(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> PropertyResult {
    let mut t = Tracker::new("pairwise_jensen_gap_bounds", 0.0);
    for _ in 0..opts.trials.max(1) * 10 {
        let n_users = rng.random_range(1..=8);
        let n_items = rng.random_range(2..=12);
        let ds = random_dataset(n_users, n_items, false, rng);
        let mut model = random_model(&ds, rng.random_range(1..=6), Backbone::Mf, 0, 2.0, rng);
        let bound = rng.random_range(0.5..3.0);
        let (u, i) = (model.user_emb().to_owned(), model.item_emb().to_owned());
        model = EmbeddingModel::from_tables(u, i, Backbone::Mf, 0, bound).expect("valid");
        apply_clipping(&mut model);
        let inst = match oracle_from_model(&model, &ds) {
            Ok(inst) => inst,
            Err(_) => continue,
        };
        for user in 0..inst.n_users() {
            let f = inst.scores(user);
            let q = if rng.random_bool(0.5) {
                oracle::exact_density(f, &oracle::uniform(f.len()))
            } else {
                random_probability(f.len(), rng)
            };
            let b = oracle::pairwise_bound_check(f, inst.positives(user), &q)
                .expect("user has positives");
            let violation = (-b.gap).max(b.gap - b.lipschitz).max(0.0);
            // Rounding slack on the lower bound when the gap is exactly zero.
            t.record(if violation < 1e-14 { 0.0 } else { violation });
        }
    }
    t.finish()
}

fn clipped_score_gap(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> PropertyResult {
    let mut t = Tracker::new("clipped_mf_score_gap", 1e-12);
    for _ in 0..opts.trials {
        let ds = random_dataset(
            rng.random_range(1..=8),
            rng.random_range(2..=50),
            false,
            rng,
        );
        let bound = rng.random_range(0.5..3.0);
        let raw = random_model(&ds, rng.random_range(1..=6), Backbone::Mf, 0, 3.0, rng);
        let mut model = EmbeddingModel::from_tables(
            raw.user_emb().to_owned(),
            raw.item_emb().to_owned(),
            Backbone::Mf,
            0,
            bound,
        )
        .expect("valid");
        apply_clipping(&mut model);
        let prop = propagate(&model).expect("mf");
        let mut excess: f64 = 0.0;
        for u in 0..model.n_users() {
            let s = prop.user_scores(u);
            for a in s.iter() {
                for b in s.iter() {
                    excess = excess.max((a - b).abs() - 2.0 * bound * bound);
                }
            }
        }
        t.record(excess.max(0.0));
    }
    t.finish()
}

/// Runs every property. Deterministic for a fixed `opts.seed`.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut properties = vec![
        kld_identity(opts, &mut rng),
        risk_forms(opts, &mut rng),
        generator_optimality(opts, &mut rng),
        w1_primal_dual(opts, &mut rng),
    ];
    let (pde, wd) = estimator_consistency(opts, &mut rng)?;
    properties.push(pde);
    properties.push(wd);
    properties.extend(gradient_checks(opts, &mut rng)?);
    properties.push(pairwise_bounds(opts, &mut rng));
    properties.push(clipped_score_gap(opts, &mut rng));
    Ok(VerifyReport { properties })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            trials: 10,
            seed: 7,
            generator_samples: 500,
            corrupt_gradient: false,
        }
    }

    #[test]
    fn quick_suite_passes_and_is_deterministic() {
        let a = run(&quick()).unwrap();
        assert!(a.all_passed(), "{}", a.render());
        let b = run(&quick()).unwrap();
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn corrupted_gradient_fails() {
        let report = run(&VerifyOptions {
            corrupt_gradient: true,
            ..quick()
        })
        .unwrap();
        assert!(!report.all_passed());
        assert!(report
            .properties
            .iter()
            .filter(|p| p.name.starts_with("grad_"))
            .all(|p| !p.passed));
    }
}
