//! Top-K personalised ranking from positive-only implicit feedback.
//!
//! Rankers are trained as exponential-family density estimators over the item
//! set: the density of user `u`'s positive items is `p0(i) exp(f_u(i) - A(f_u))`
//! with `f_u(i) = <e_u, e_i>`. Three training risks are provided:
//!
//! * [`RiskKind::Pde`]: in-batch softmax-weighted negative term over all
//!   mini-batch items,
//! * [`RiskKind::Wd`]: the same estimator restricted to each user's unobserved
//!   in-batch items,
//! * [`RiskKind::PairwiseAns`]: a softplus pairwise baseline whose negatives are
//!   re-sampled from the in-batch softmax of the current ranker.
//!
//! Embeddings come from plain matrix factorisation or a light graph convolution
//! backbone, with optional L2-norm clipping of the trainable vectors after every
//! update. The [`oracle`] module holds brute-force reference implementations of
//! the exact quantities the estimators approximate, and [`verify`] drives them
//! as a property suite.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod risk;
pub mod sampling;
pub mod trainer;
pub mod verify;

pub use dataset::{
    dataset_stats, generate_synthetic, load_interactions, planted_test_split, split_holdout,
    write_interactions, InteractionDataset, SplitTag, StatsReport, SyntheticGroundTruth,
};
pub use error::{Error, Result};
pub use metrics::{
    evaluate, evaluate_scorer, ndcg_at_k, rank_items, recall_at_k, ItemScorer, MetricsReport,
    Popularity,
};
pub use model::{
    apply_clipping, clip_norm, load_checkpoint, propagate, propagate_lgcn, save_checkpoint, score,
    score_block, Backbone, EmbeddingModel, NormalizedAdjacency, PropagatedEmbeddings,
};
pub use optim::{Optimiser, OptimiserState};
pub use risk::{GradientSet, RiskBreakdown, RiskKind};
pub use sampling::{ans_resample, draw_ans_negatives, sample_minibatch, EpochSampler, MiniBatch};
pub use trainer::{train, train_step, EvalRecord, TrainConfig, TrainHistory, Trainer};
