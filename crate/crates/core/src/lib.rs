//! Training-side machinery for confounder-aware multimodal classification.
//!
//! The crate covers confounder discovery over meme-style records, fold plans
//! that keep confounder groups intact, confounder upsampling and ranking-pair
//! construction, the class-weighted BCE plus margin-ranking loss family with a
//! small linear trainer, exact AUROC, object-tag filtering, and evolutionary
//! search for ensemble blend weights.

pub mod dataset;
pub mod ensemble;
pub mod features;
pub mod folds;
pub mod losses;
pub mod metrics;
pub mod sampling;
pub mod tags;

pub use dataset::{
    detect_confounders, load_dataset, normalize_text, ConfounderGraph, ConfounderKind,
    ConfounderLink, Dataset, DatasetError, Label, MemeRecord,
};
pub use ensemble::{
    blend, ea_optimize, EaConfig, EaOutcome, EnsembleError, EnsembleWeights, PredictionSet, Truth,
};
pub use features::{FeatureError, FeatureTable};
pub use folds::{
    plan_folds, verify_plan, Fold, FoldError, FoldPlan, Origin, SplitConfig, VerificationReport,
    Violation,
};
pub use losses::{
    bce, combined_loss, loss_gradients, margin_rank_loss, train_linear, weighted_bce,
    LabeledFeatures, LinearModel, LossConfig, LossError, PairedRows, TrainConfig, TrainOutcome,
};
pub use metrics::{accuracy, auroc, auroc_of, MetricError, ScoredLabels};
pub use sampling::{
    draw_batch, pair_for_ranking, upsample_weights, PairedExample, SamplingError, SamplingWeights,
};
pub use tags::{augment_text, filter_tags, TagAllowlist, TagError, TaggedMeme};
