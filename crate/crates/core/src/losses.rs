//! Class-weighted binary cross-entropy, margin ranking loss, their weighted
//! sum, analytic gradients for a logistic linear model, and a mini-batch
//! trainer that early-stops on dev AUROC.
//!
//! All losses are sums over examples, not means. Probabilities are clamped to
//! `[eps, 1 - eps]` before taking logs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ConfounderGraph, Label};
use crate::features::FeatureTable;
use crate::metrics::{auroc, MetricError, ScoredLabels};
use crate::sampling::{pair_positions, SamplingError, SamplingWeights};

pub const DEFAULT_PROB_EPSILON: f64 = 1e-7;

/// Hateful-to-not-hateful loss weight ratio used for reweighting.
pub const DEFAULT_ALPHA_RATIO: f64 = 1.8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("ranking target {0} is not +1 or -1")]
    BadRank(i8),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("feature dimension mismatch: model has {model}, row has {row}")]
    Dimension { model: usize, row: usize },
    #[error("dev set must contain both classes")]
    DegenerateDev,
    #[error("sampler id {0:?} is not in the training set")]
    UnknownSamplerId(String),
    #[error("invalid train config: {0}")]
    TrainConfig(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    /// Weight of the margin ranking term.
    pub gamma: f64,
    pub margin: f64,
    pub prob_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.5,
            margin: 0.2,
            ..LossConfig::from_ratio(DEFAULT_ALPHA_RATIO).expect("valid ratio")
        }
    }
}

impl LossConfig {
    /// Class weights with `alpha_pos / alpha_neg = ratio` and `alpha_pos + alpha_neg = 1`.
    /// The ranking term is off.
    pub fn from_ratio(ratio: f64) -> Result<Self, LossError> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(LossError::Config(format!("class weight ratio {ratio} must be positive")));
        }
        Ok(LossConfig {
            alpha_pos: ratio / (1.0 + ratio),
            alpha_neg: 1.0 / (1.0 + ratio),
            gamma: 0.0,
            margin: 0.0,
            prob_epsilon: DEFAULT_PROB_EPSILON,
        })
    }

    pub fn symmetric() -> Self {
        LossConfig::from_ratio(1.0).expect("valid ratio")
    }

    pub fn with_ranking(mut self, gamma: f64, margin: f64) -> Self {
        self.gamma = gamma;
        self.margin = margin;
        self
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |msg: String| Err(LossError::Config(msg));
        if !(self.alpha_pos >= 0.0 && self.alpha_neg >= 0.0) {
            return bad(format!("class weights must be nonnegative ({}, {})", self.alpha_pos, self.alpha_neg));
        }
        if ((self.alpha_pos + self.alpha_neg) - 1.0).abs() > 1e-12 {
            return bad(format!("class weights must sum to 1, got {}", self.alpha_pos + self.alpha_neg));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be >= 0", self.margin));
        }
        if !(self.prob_epsilon > 0.0 && self.prob_epsilon < 0.5) {
            return bad(format!("prob_epsilon {} must lie in (0, 0.5)", self.prob_epsilon));
        }
        Ok(())
    }
}

fn check_pair(a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(LossError::Empty);
    }
    Ok(())
}

fn check_labels(labels: &[u8]) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l > 1) {
        Some(&l) => Err(LossError::BadLabel(l)),
        None => Ok(()),
    }
}

fn weighted_bce_unchecked(probs: &[f64], labels: &[u8], alpha_pos: f64, alpha_neg: f64, eps: f64) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y == 1 {
                -alpha_pos * p.ln()
            } else {
                -alpha_neg * (1.0 - p).ln()
            }
        })
        .sum()
}

/// Plain binary cross-entropy, summed.
pub fn bce(probs: &[f64], labels: &[u8]) -> Result<f64, LossError> {
    check_pair(probs.len(), labels.len())?;
    check_labels(labels)?;
    Ok(weighted_bce_unchecked(probs, labels, 1.0, 1.0, DEFAULT_PROB_EPSILON))
}

/// Binary cross-entropy with separate weights on the hateful and not-hateful terms.
pub fn weighted_bce(probs: &[f64], labels: &[u8], cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    check_pair(probs.len(), labels.len())?;
    check_labels(labels)?;
    Ok(weighted_bce_unchecked(probs, labels, cfg.alpha_pos, cfg.alpha_neg, cfg.prob_epsilon))
}

/// `sum_i max(0, -y_rank_i * (score_x_i - score_pair_i) + margin)`.
pub fn margin_rank_loss(score_x: &[f64], score_pair: &[f64], y_rank: &[i8], margin: f64) -> Result<f64, LossError> {
    if score_x.len() != score_pair.len() {
        return Err(LossError::LengthMismatch(score_x.len(), score_pair.len()));
    }
    if score_x.len() != y_rank.len() {
        return Err(LossError::LengthMismatch(score_x.len(), y_rank.len()));
    }
    if margin.is_nan() || margin < 0.0 {
        return Err(LossError::Config(format!("margin {margin} must be >= 0")));
    }
    if let Some(&r) = y_rank.iter().find(|&&r| r != 1 && r != -1) {
        return Err(LossError::BadRank(r));
    }
    Ok(score_x
        .iter()
        .zip(score_pair)
        .zip(y_rank)
        .map(|((&x, &p), &r)| (-(r as f64) * (x - p) + margin).max(0.0))
        .sum())
}

/// Weighted BCE on `probs` plus `gamma` times the margin ranking loss of
/// `probs` against their partners' scores.
pub fn combined_loss(
    probs: &[f64],
    labels: &[u8],
    score_pair: &[f64],
    y_rank: &[i8],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let hw = weighted_bce(probs, labels, cfg)?;
    let mr = margin_rank_loss(probs, score_pair, y_rank, cfg.margin)?;
    Ok(hw + cfg.gamma * mr)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic model `sigmoid(w . x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn check_row(&self, row: &[f64]) -> Result<(), LossError> {
        if row.len() != self.weights.len() {
            return Err(LossError::Dimension {
                model: self.weights.len(),
                row: row.len(),
            });
        }
        Ok(())
    }

    fn logit(&self, row: &[f64]) -> f64 {
        self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn predict(&self, row: &[f64]) -> Result<f64, LossError> {
        self.check_row(row)?;
        Ok(sigmoid(self.logit(row)))
    }
}

/// A ranking pair given by feature rows.
#[derive(Debug, Clone, Copy)]
pub struct PairedRows<'a> {
    pub anchor: &'a [f64],
    pub partner: &'a [f64],
    pub y_rank: i8,
}

/// Gradient over model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Gradient {
    fn zeros(dim: usize) -> Self {
        Gradient {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    fn add_scaled(&mut self, row: &[f64], scale: f64) {
        for (g, x) in self.weights.iter_mut().zip(row) {
            *g += scale * x;
        }
        self.bias += scale;
    }
}

/// Analytic gradient of `weighted_bce(rows) + gamma * margin_rank_loss(pairs)`.
///
/// The clamp is flat, so a clamped probability contributes no BCE gradient.
/// At the hinge kink the zero side is taken.
pub fn loss_gradients(
    model: &LinearModel,
    rows: &[&[f64]],
    labels: &[u8],
    pairs: &[PairedRows<'_>],
    cfg: &LossConfig,
) -> Result<Gradient, LossError> {
    cfg.validate()?;
    if rows.len() != labels.len() {
        return Err(LossError::LengthMismatch(rows.len(), labels.len()));
    }
    check_labels(labels)?;
    let mut grad = Gradient::zeros(model.dim());
    let eps = cfg.prob_epsilon;

    for (row, &y) in rows.iter().zip(labels) {
        model.check_row(row)?;
        let p = sigmoid(model.logit(row));
        if p <= eps || p >= 1.0 - eps {
            continue;
        }
        // d/dz of -[a+ y ln p + a- (1-y) ln(1-p)] with p = sigmoid(z)
        let dz = if y == 1 { -cfg.alpha_pos * (1.0 - p) } else { cfg.alpha_neg * p };
        grad.add_scaled(row, dz);
    }

    if cfg.gamma > 0.0 {
        for pair in pairs {
            if pair.y_rank != 1 && pair.y_rank != -1 {
                return Err(LossError::BadRank(pair.y_rank));
            }
            model.check_row(pair.anchor)?;
            model.check_row(pair.partner)?;
            let pa = sigmoid(model.logit(pair.anchor));
            let pp = sigmoid(model.logit(pair.partner));
            let r = pair.y_rank as f64;
            if -r * (pa - pp) + cfg.margin > 0.0 {
                grad.add_scaled(pair.anchor, -cfg.gamma * r * pa * (1.0 - pa));
                grad.add_scaled(pair.partner, cfg.gamma * r * pp * (1.0 - pp));
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            max_epochs: 30,
            patience: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LossError::TrainConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.patience > self.max_epochs {
            return Err(LossError::TrainConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(LossError::TrainConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Feature rows with gold labels, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl LabeledFeatures {
    /// Selects `ids` out of `table`, labelling each with `label_of`.
    /// Ids missing from the table or without a label are reported as `Err(id)`.
    pub fn select<'a, I>(
        table: &FeatureTable,
        ids: I,
        mut label_of: impl FnMut(&str) -> Option<Label>,
    ) -> Result<Self, String>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut out = LabeledFeatures {
            ids: Vec::new(),
            rows: Vec::new(),
            labels: Vec::new(),
        };
        for id in ids {
            let row = table.row(id).ok_or_else(|| id.to_owned())?;
            let label = label_of(id).ok_or_else(|| id.to_owned())?;
            out.ids.push(id.to_owned());
            out.rows.push(row.to_vec());
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn label_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.as_u8()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearModel,
    /// Dev AUROC after each completed epoch.
    pub trace: Vec<f64>,
    /// Index into `trace` of the returned snapshot.
    pub best_epoch: Option<usize>,
}

fn dev_auroc(model: &LinearModel, dev: &LabeledFeatures, dev_labels: &[u8]) -> Result<f64, LossError> {
    let scores = dev
        .rows
        .iter()
        .map(|r| model.predict(r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(auroc(&ScoredLabels::new(&scores, dev_labels)?)?)
}

/// Mini-batch gradient descent on the combined loss.
///
/// Batches are drawn from `sampler` (which must range over `train` ids); when
/// `gamma > 0` every record gets a fresh ranking partner each epoch. Stops after
/// `patience` epochs without a dev AUROC improvement or at `max_epochs`, and
/// returns the best-scoring snapshot.
pub fn train_linear(
    train: &LabeledFeatures,
    dev: &LabeledFeatures,
    graph: &ConfounderGraph,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    sampler: &SamplingWeights,
) -> Result<TrainOutcome, LossError> {
    loss_cfg.validate()?;
    train_cfg.validate()?;
    let dim = train.rows.first().or(dev.rows.first()).map_or(0, Vec::len);
    let initial = LinearModel::zeros(dim);
    if train_cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            model: initial,
            trace: Vec::new(),
            best_epoch: None,
        });
    }

    let dev_labels = dev.label_bytes();
    let positives = dev_labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == dev_labels.len() {
        return Err(LossError::DegenerateDev);
    }
    let position: std::collections::HashMap<&str, usize> =
        train.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let sampler_rows: Vec<usize> = sampler
        .ids()
        .iter()
        .map(|id| position.get(id.as_str()).copied().ok_or_else(|| LossError::UnknownSamplerId(id.clone())))
        .collect::<Result<_, _>>()?;
    let train_labels = train.label_bytes();

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let steps = train.len().div_ceil(train_cfg.batch_size).max(1);
    let scale = train_cfg.learning_rate / train_cfg.batch_size as f64;

    let mut model = initial;
    let mut best = (f64::NEG_INFINITY, model.clone(), None);
    let mut trace = Vec::new();
    let mut stale = 0;

    for epoch in 0..train_cfg.max_epochs {
        let partners = if loss_cfg.gamma > 0.0 {
            Some(pair_positions(&train.ids, &train.labels, graph, &mut rng)?)
        } else {
            None
        };
        for _ in 0..steps {
            let batch: Vec<usize> = sampler
                .draw_positions(train_cfg.batch_size, &mut rng)?
                .into_iter()
                .map(|p| sampler_rows[p])
                .collect();
            let rows: Vec<&[f64]> = batch.iter().map(|&i| train.rows[i].as_slice()).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train_labels[i]).collect();
            let pairs: Vec<PairedRows<'_>> = match &partners {
                Some(p) => batch
                    .iter()
                    .map(|&i| {
                        let (_, partner, y_rank) = p[i];
                        PairedRows {
                            anchor: &train.rows[i],
                            partner: &train.rows[partner],
                            y_rank,
                        }
                    })
                    .collect(),
                None => Vec::new(),
            };
            let grad = loss_gradients(&model, &rows, &labels, &pairs, loss_cfg)?;
            for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
                *w -= scale * g;
            }
            model.bias -= scale * grad.bias;
        }

        let auc = dev_auroc(&model, dev, &dev_labels)?;
        trace.push(auc);
        if auc > best.0 {
            best = (auc, model.clone(), Some(epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= train_cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best.1,
        trace,
        best_epoch: best.2,
    })
}
