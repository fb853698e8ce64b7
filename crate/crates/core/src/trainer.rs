//! Mini-batch optimisation loop with per-step norm clipping and periodic
//! evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{apply_clipping, propagate, Backbone, EmbeddingModel};
use crate::optim::{Optimiser, OptimiserState};
use crate::risk::{risk_and_gradient, RiskBreakdown, RiskKind};
use crate::sampling::{draw_ans_negatives, EpochSampler, MiniBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub risk: RiskKind,
    pub backbone: Backbone,
    pub dim: usize,
    pub layers: usize,
    pub lambda: f64,
    /// `f64::INFINITY` disables clipping.
    pub clip_bound: f64,
    pub learning_rate: f64,
    pub batch_users: usize,
    pub max_iterations: usize,
    /// 0 evaluates only after the last iteration.
    pub eval_every: usize,
    pub eval_k: usize,
    pub ans_m: usize,
    pub seed: u64,
    pub optimiser: Optimiser,
    /// Write wall-clock seconds into the history. Off makes histories
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            risk: RiskKind::Pde,
            backbone: Backbone::Lgcn,
            dim: 64,
            layers: 3,
            lambda: 0.05,
            clip_bound: 5.0,
            learning_rate: 0.05,
            batch_users: 2500,
            max_iterations: 3000,
            eval_every: 500,
            eval_k: 20,
            ans_m: 5,
            seed: 0,
            optimiser: Optimiser::ADAM,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.clip_bound.is_nan() || self.clip_bound <= 0.0 {
            return bad(format!(
                "clip bound must be positive, got {}",
                self.clip_bound
            ));
        }
        if self.risk == RiskKind::Wd && !self.clip_bound.is_finite() {
            return bad("the wd risk requires a finite clip bound".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_users == 0 {
            return bad("batch_users must be positive".into());
        }
        if self.eval_k == 0 {
            return bad("eval cutoff must be positive".into());
        }
        if self.risk == RiskKind::PairwiseAns && self.ans_m == 0 {
            return bad("ans_m must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    /// Objective of the mini-batch processed in this iteration, before its
    /// update.
    pub objective: f64,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "iteration,objective,recall_at_k,ndcg_at_k,elapsed_s";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.iteration,
                r.objective,
                opt(r.recall),
                opt(r.ndcg),
                r.elapsed_s
            );
        }
        out
    }

    /// Record with the highest nDCG; the reported point of convergence.
    pub fn best(&self) -> Option<&EvalRecord> {
        self.records
            .iter()
            .filter(|r| r.ndcg.is_some())
            .max_by(|a, b| {
                a.ndcg
                    .unwrap()
                    .total_cmp(&b.ndcg.unwrap())
                    .then(b.iteration.cmp(&a.iteration))
            })
    }
}

/// One optimiser update on `batch` followed by clipping. Returns the batch
/// objective before the update.
pub fn train_step(
    model: &mut EmbeddingModel,
    batch: &MiniBatch,
    cfg: &TrainConfig,
    state: &mut OptimiserState,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<RiskBreakdown> {
    let prop = propagate(model)?;
    let negatives = match cfg.risk {
        RiskKind::PairwiseAns => Some(draw_ans_negatives(&prop, batch, cfg.ans_m, rng)?),
        _ => None,
    };
    let (breakdown, grad) = risk_and_gradient(
        model,
        &prop,
        batch,
        cfg.risk,
        negatives.as_deref(),
        cfg.lambda,
    )?;
    if !grad.is_finite() || !breakdown.objective.is_finite() {
        return Err(Error::NumericFailure { iteration });
    }
    state.apply(model, &grad, cfg.learning_rate)?;
    apply_clipping(model);
    Ok(breakdown)
}

/// Stateful training loop; [`train`] drives it to completion.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a InteractionDataset,
    model: EmbeddingModel,
    state: OptimiserState,
    sampler: EpochSampler,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a InteractionDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = EmbeddingModel::init(
            train,
            cfg.dim,
            cfg.backbone,
            cfg.layers,
            cfg.clip_bound,
            &mut rng,
        )?;
        apply_clipping(&mut model);
        let state = OptimiserState::new(cfg.optimiser, &model);
        let sampler = EpochSampler::new(train)?;
        Ok(Self {
            cfg,
            train,
            model,
            state,
            sampler,
            rng,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn into_model(self) -> EmbeddingModel {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<RiskBreakdown> {
        let batch = self
            .sampler
            .next_batch(self.train, self.cfg.batch_users, &mut self.rng)?;
        self.iteration += 1;
        train_step(
            &mut self.model,
            &batch,
            &self.cfg,
            &mut self.state,
            &mut self.rng,
            self.iteration,
        )
    }
}

/// Training failed part way through; `history` holds the evaluations that
/// completed before `error`.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub history: TrainHistory,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            history: TrainHistory::default(),
        }
    }
}

/// Runs `cfg.max_iterations` steps over epoch-shuffled user batches. When
/// `eval` is given, records Recall/nDCG on it (masking `train` items) every
/// `eval_every` steps and after the final step.
pub fn train(
    train: &InteractionDataset,
    eval: Option<&InteractionDataset>,
    cfg: &TrainConfig,
) -> std::result::Result<(EmbeddingModel, TrainHistory), TrainFailure> {
    let mut trainer = Trainer::new(train, cfg.clone())?;
    let mut history = TrainHistory::default();
    let start = Instant::now();
    for it in 1..=cfg.max_iterations {
        let breakdown = match trainer.step() {
            Ok(b) => b,
            Err(error) => return Err(TrainFailure { error, history }),
        };
        let due = (cfg.eval_every > 0 && it % cfg.eval_every == 0) || it == cfg.max_iterations;
        if !due {
            continue;
        }
        let metrics = match eval.map(|e| evaluate(trainer.model(), train, e, cfg.eval_k)) {
            Some(Ok(m)) => Some(m),
            Some(Err(error)) => return Err(TrainFailure { error, history }),
            None => None,
        };
        history.records.push(EvalRecord {
            iteration: it,
            objective: breakdown.objective,
            recall: metrics.as_ref().map(|m| m.recall),
            ndcg: metrics.as_ref().map(|m| m.ndcg),
            elapsed_s: if cfg.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok((trainer.into_model(), history))
}
