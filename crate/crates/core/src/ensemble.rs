//! Weighted-average blending of model predictions and an evolutionary search
//! for blend weights that maximize AUROC.
//!
//! Weights live on the probability simplex. The search seeds its first
//! population with the uniform vector and every one-hot vector, keeps the best
//! individual each generation (elitism), and breeds the rest through tournament
//! selection, per-gene uniform crossover and additive Gaussian mutation. Every
//! child draws its randomness from its own stream, keyed by generation and
//! slot, so fitness can be evaluated in parallel without affecting results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{auroc_of, MetricError};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("prediction set {model_id:?} is empty")]
    EmptySet { model_id: String },
    #[error("prediction set {model_id:?}: score {score} for id {id:?} is outside [0, 1]")]
    ScoreRange { model_id: String, id: String, score: f64 },
    #[error("prediction set {model_id:?}: duplicate id {id:?}")]
    DuplicateId { model_id: String, id: String },
    #[error("{sets} prediction sets but {weights} weights")]
    LengthMismatch { sets: usize, weights: usize },
    #[error("no prediction sets given")]
    NoSets,
    #[error("id sets differ between {left:?} and {right:?}; symmetric difference: {difference:?}")]
    IdMismatch {
        left: String,
        right: String,
        difference: Vec<String>,
    },
    #[error("prediction set {model_id:?} is missing truth ids {missing:?}")]
    MissingTruthIds { model_id: String, missing: Vec<String> },
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("invalid EA config: {0}")]
    Config(String),
    #[error("truth: {0}")]
    Truth(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("prediction file: {0}")]
    File(String),
}

/// One model's score per record id. Keeps insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    model_id: String,
    ids: Vec<String>,
    scores: Vec<f64>,
    index: HashMap<String, usize>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>, entries: Vec<(String, f64)>) -> Result<Self, EnsembleError> {
        let model_id = model_id.into();
        if entries.is_empty() {
            return Err(EnsembleError::EmptySet { model_id });
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut scores = Vec::with_capacity(entries.len());
        for (i, (id, score)) in entries.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&score) {
                return Err(EnsembleError::ScoreRange { model_id, id, score });
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(EnsembleError::DuplicateId { model_id, id });
            }
            ids.push(id);
            scores.push(score);
        }
        Ok(PredictionSet { model_id, ids, scores, index })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, id: &str) -> Option<f64> {
        self.index.get(id).map(|&i| self.scores[i])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids.iter().map(String::as_str).zip(self.scores.iter().copied())
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, EnsembleError> {
        if weights.is_empty() {
            return Err(EnsembleError::BadWeights("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(EnsembleError::BadWeights(format!("entry {w} is negative or not finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::BadWeights(format!("entries sum to {sum}, not 1")));
        }
        Ok(EnsembleWeights(weights))
    }

    pub fn uniform(m: usize) -> Self {
        EnsembleWeights(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, at: usize) -> Self {
        let mut w = vec![0.0; m];
        w[at] = 1.0;
        EnsembleWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Convex combination of one column; the sum can overshoot 1 by rounding.
fn mix(weights: &[f64], column: impl Iterator<Item = f64>) -> f64 {
    weights.iter().zip(column).map(|(w, s)| w * s).sum::<f64>().clamp(0.0, 1.0)
}

fn id_difference(a: &PredictionSet, b: &PredictionSet) -> Vec<String> {
    let left: BTreeSet<&str> = a.ids.iter().map(String::as_str).collect();
    let right: BTreeSet<&str> = b.ids.iter().map(String::as_str).collect();
    left.symmetric_difference(&right).map(|s| s.to_string()).collect()
}

/// Per-id weighted average of `sets`; the result is labelled `"ensemble"` and
/// follows the first set's id order.
pub fn blend(sets: &[PredictionSet], w: &EnsembleWeights) -> Result<PredictionSet, EnsembleError> {
    if sets.is_empty() {
        return Err(EnsembleError::NoSets);
    }
    if sets.len() != w.len() {
        return Err(EnsembleError::LengthMismatch {
            sets: sets.len(),
            weights: w.len(),
        });
    }
    let first = &sets[0];
    for other in &sets[1..] {
        let difference = id_difference(first, other);
        if !difference.is_empty() {
            return Err(EnsembleError::IdMismatch {
                left: first.model_id.clone(),
                right: other.model_id.clone(),
                difference,
            });
        }
    }
    let entries = first
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let column = std::iter::once(first.scores[i])
                .chain(sets[1..].iter().map(|s| s.score(id).expect("id sets checked")));
            (id.clone(), mix(w.as_slice(), column))
        })
        .collect();
    PredictionSet::new("ensemble", entries)
}

/// Gold labels for the ids the weights are optimized on.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    ids: Vec<String>,
    labels: Vec<u8>,
}

impl Truth {
    pub fn new(entries: Vec<(String, u8)>) -> Result<Self, EnsembleError> {
        let mut seen = BTreeSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        for (id, label) in entries {
            if label > 1 {
                return Err(EnsembleError::Truth(format!("label {label} for {id:?} is not 0 or 1")));
            }
            if !seen.insert(id.clone()) {
                return Err(EnsembleError::Truth(format!("duplicate id {id:?}")));
            }
            ids.push(id);
            labels.push(label);
        }
        Ok(Truth { ids, labels })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// AUROC of `set` restricted to the truth ids.
    pub fn auroc(&self, set: &PredictionSet) -> Result<f64, EnsembleError> {
        let scores = self.align(set)?;
        Ok(auroc_of(&scores, &self.labels)?)
    }

    /// Scores of `set` in truth order.
    pub fn align(&self, set: &PredictionSet) -> Result<Vec<f64>, EnsembleError> {
        let mut missing = Vec::new();
        let scores: Vec<f64> = self
            .ids
            .iter()
            .filter_map(|id| {
                let s = set.score(id);
                if s.is_none() {
                    missing.push(id.clone());
                }
                s
            })
            .collect();
        if !missing.is_empty() {
            return Err(EnsembleError::MissingTruthIds {
                model_id: set.model_id.clone(),
                missing,
            });
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub mutation_sigma: f64,
    /// Probability that a gene is taken from the second parent.
    pub crossover_rate: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            population: 512,
            generations: 100,
            tournament_size: 3,
            mutation_sigma: 0.05,
            crossover_rate: 0.5,
            elitism: 1,
            seed: 0,
        }
    }
}

impl EaConfig {
    pub fn validate(&self, models: usize) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::Config(m));
        if self.population < models + 2 {
            return bad(format!("population {} must be at least models + 2 = {}", self.population, models + 2));
        }
        if self.generations == 0 {
            return bad("generations must be at least 1".into());
        }
        if self.elitism >= self.population {
            return bad(format!("elitism {} must be below population {}", self.elitism, self.population));
        }
        if self.tournament_size == 0 {
            return bad("tournament size must be at least 1".into());
        }
        if !(self.mutation_sigma >= 0.0 && self.mutation_sigma.is_finite()) {
            return bad(format!("mutation sigma {} must be >= 0", self.mutation_sigma));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad(format!("crossover rate {} must lie in [0, 1]", self.crossover_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EaOutcome {
    pub weights: EnsembleWeights,
    pub auroc: f64,
    /// Best fitness present in each generation, starting with the initial population.
    pub history: Vec<f64>,
}

fn stream_rng(seed: u64, generation: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | slot as u64);
    rng
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= sum);
    Some(v)
}

fn random_simplex<R: Rng>(m: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draw: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
        if let Some(v) = normalized(draw) {
            return v;
        }
    }
}

fn tournament<R: Rng>(fitness: &[f64], size: usize, rng: &mut R) -> usize {
    let mut best = rng.random_range(0..fitness.len());
    for _ in 1..size {
        let c = rng.random_range(0..fitness.len());
        if fitness[c] > fitness[best] || (fitness[c] == fitness[best] && c < best) {
            best = c;
        }
    }
    best
}

fn breed(population: &[Vec<f64>], fitness: &[f64], cfg: &EaConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = &population[tournament(fitness, cfg.tournament_size, rng)];
    let b = &population[tournament(fitness, cfg.tournament_size, rng)];
    let crossed: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| if rng.random_bool(cfg.crossover_rate) { y } else { x })
        .collect();
    let crossed = normalized(crossed).unwrap_or_else(|| a.clone());
    if cfg.mutation_sigma == 0.0 {
        return crossed;
    }
    let noise = Normal::new(0.0, cfg.mutation_sigma).expect("sigma validated");
    let mutated: Vec<f64> = crossed.iter().map(|&x| (x + noise.sample(rng)).max(0.0)).collect();
    normalized(mutated).unwrap_or(crossed)
}

/// Searches simplex weights maximizing the blend's AUROC on `truth`.
pub fn ea_optimize(sets: &[PredictionSet], truth: &Truth, cfg: &EaConfig) -> Result<EaOutcome, EnsembleError> {
    if sets.is_empty() {
        return Err(EnsembleError::NoSets);
    }
    let m = sets.len();
    cfg.validate(m)?;
    let positives = truth.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == truth.len() {
        return Err(MetricError::SingleClass {
            positives,
            negatives: truth.len() - positives,
        }
        .into());
    }
    let columns: Vec<Vec<f64>> = sets.iter().map(|s| truth.align(s)).collect::<Result<_, _>>()?;

    let fitness_of = |w: &Vec<f64>| -> f64 {
        let blended: Vec<f64> = (0..truth.len())
            .map(|i| mix(w, columns.iter().map(|c| c[i])))
            .collect();
        auroc_of(&blended, &truth.labels).expect("truth validated")
    };

    let mut population: Vec<Vec<f64>> = Vec::with_capacity(cfg.population);
    population.push(EnsembleWeights::uniform(m).0);
    population.extend((0..m).map(|i| EnsembleWeights::one_hot(m, i).0));
    let start = population.len();
    population.extend((start..cfg.population).map(|slot| random_simplex(m, &mut stream_rng(cfg.seed, 0, slot))));

    let mut fitness: Vec<f64> = population.par_iter().map(fitness_of).collect();
    let best_index = |fit: &[f64]| -> usize {
        (0..fit.len())
            .reduce(|a, b| if fit[b] > fit[a] { b } else { a })
            .expect("population is nonempty")
    };
    let bi = best_index(&fitness);
    let mut best = (fitness[bi], population[bi].clone());
    let mut history = vec![fitness[bi]];

    for generation in 1..=cfg.generations {
        let mut ranked: Vec<usize> = (0..population.len()).collect();
        ranked.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
        let elites: Vec<Vec<f64>> = ranked[..cfg.elitism].iter().map(|&i| population[i].clone()).collect();

        let children: Vec<Vec<f64>> = (cfg.elitism..cfg.population)
            .into_par_iter()
            .map(|slot| breed(&population, &fitness, cfg, &mut stream_rng(cfg.seed, generation, slot)))
            .collect();
        let child_fitness: Vec<f64> = children.par_iter().map(fitness_of).collect();

        fitness = ranked[..cfg.elitism].iter().map(|&i| fitness[i]).chain(child_fitness).collect();
        population = elites.into_iter().chain(children).collect();

        let bi = best_index(&fitness);
        if fitness[bi] > best.0 {
            best = (fitness[bi], population[bi].clone());
        }
        history.push(fitness[bi]);
    }

    Ok(EaOutcome {
        weights: EnsembleWeights::new(best.1).expect("individuals stay on the simplex"),
        auroc: best.0,
        history,
    })
}

/// One row of a prediction file: `id,proba,label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub proba: f64,
    pub label: Option<u8>,
}

pub fn read_prediction_rows<R: Read>(reader: R) -> Result<Vec<PredictionRow>, EnsembleError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| EnsembleError::File(e.to_string()))?;
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != ["id", "proba", "label"] {
        return Err(EnsembleError::File(format!("header must be id,proba,label, found {}", cols.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| EnsembleError::File(e.to_string()))?;
        let line = i + 2;
        let proba: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| EnsembleError::File(format!("line {line}: bad proba {:?}", &rec[1])))?;
        if !(0.0..=1.0).contains(&proba) {
            return Err(EnsembleError::File(format!("line {line}: proba {proba} outside [0, 1]")));
        }
        let label = match rec[2].trim() {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(EnsembleError::File(format!("line {line}: bad label {other:?}"))),
        };
        rows.push(PredictionRow {
            id: rec[0].to_owned(),
            proba,
            label,
        });
    }
    Ok(rows)
}

pub fn write_prediction_rows<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<(), EnsembleError> {
    let mut out = String::from("id,proba,label\n");
    for r in rows {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        // Display for f64 prints the shortest string that parses back exactly
        out.push_str(&format!("{},{},{}\n", r.id, r.proba, label));
    }
    let mut writer = writer;
    writer
        .write_all(out.as_bytes())
        .map_err(|e| EnsembleError::File(e.to_string()))
}

pub fn rows_to_set(model_id: &str, rows: &[PredictionRow]) -> Result<PredictionSet, EnsembleError> {
    PredictionSet::new(model_id, rows.iter().map(|r| (r.id.clone(), r.proba)).collect())
}

/// Truth from a prediction-format file; every row must be labeled.
pub fn rows_to_truth(rows: &[PredictionRow]) -> Result<Truth, EnsembleError> {
    let entries = rows
        .iter()
        .map(|r| {
            r.label
                .map(|l| (r.id.clone(), l))
                .ok_or_else(|| EnsembleError::Truth(format!("row {:?} has no label", r.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Truth::new(entries)
}

/// Optimized weights plus the AUROC they reached and the search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub weights: BTreeMap<String, f64>,
    pub auroc: f64,
    pub config: EaConfig,
}

impl WeightsFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("weights serialize");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, EnsembleError> {
        serde_json::from_str(s).map_err(|e| EnsembleError::File(e.to_string()))
    }

    /// Weights ordered like `model_ids`. Every id must be present and no
    /// extra ids may appear.
    pub fn ordered(&self, model_ids: &[&str]) -> Result<EnsembleWeights, EnsembleError> {
        let known: BTreeSet<&str> = model_ids.iter().copied().collect();
        if let Some(unknown) = self.weights.keys().find(|k| !known.contains(k.as_str())) {
            return Err(EnsembleError::BadWeights(format!("unknown model_id {unknown:?} in weights")));
        }
        let v = model_ids
            .iter()
            .map(|id| {
                self.weights
                    .get(*id)
                    .copied()
                    .ok_or_else(|| EnsembleError::BadWeights(format!("no weight for model_id {id:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        EnsembleWeights::new(v)
    }
}
