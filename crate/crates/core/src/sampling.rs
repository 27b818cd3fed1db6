//! Confounder upsampling and ranking-pair construction.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ConfounderGraph, Dataset, Label};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("upsample factor {0} must be a finite value >= 1")]
    BadFactor(f64),
    #[error("weight table is empty")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("ranking pairs need both classes ({hateful} hateful, {not_hateful} not hateful)")]
    SingleClass { hateful: usize, not_hateful: usize },
}

/// Per-record sampling weights and their normalized probabilities.
#[derive(Debug, Clone)]
pub struct SamplingWeights {
    ids: Vec<String>,
    raw: Vec<f64>,
    probs: Vec<f64>,
    dist: Option<WeightedIndex<f64>>,
}

impl SamplingWeights {
    /// Weight `factor` for ids in a text-confounder link, 1 for the rest.
    pub fn for_ids<I, S>(ids: I, graph: &ConfounderGraph, factor: f64) -> Result<Self, SamplingError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if !factor.is_finite() || factor < 1.0 {
            return Err(SamplingError::BadFactor(factor));
        }
        let text_ids = graph.text_confounder_ids();
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let raw: Vec<f64> = ids
            .iter()
            .map(|id| if text_ids.contains(id.as_str()) { factor } else { 1.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        let probs = raw.iter().map(|w| w / total).collect();
        let dist = if raw.is_empty() {
            None
        } else {
            Some(WeightedIndex::new(&raw).expect("weights are positive and finite"))
        };
        Ok(SamplingWeights { ids, raw, probs, dist })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn probability(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|x| x == id).map(|i| self.probs[i])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Draws positions into [`ids`](Self::ids) with replacement.
    pub fn draw_positions<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, SamplingError> {
        let dist = self.dist.as_ref().ok_or(SamplingError::Empty)?;
        if batch_size == 0 {
            return Err(SamplingError::ZeroBatch);
        }
        Ok((0..batch_size).map(|_| dist.sample(rng)).collect())
    }
}

/// Upsampling weights over every record of `ds`, in dataset order.
pub fn upsample_weights(
    ds: &Dataset,
    graph: &ConfounderGraph,
    factor: f64,
) -> Result<SamplingWeights, SamplingError> {
    SamplingWeights::for_ids(ds.ids(), graph, factor)
}

/// Draws `batch_size` ids independently, with replacement.
pub fn draw_batch<R: Rng + ?Sized>(
    w: &SamplingWeights,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<String>, SamplingError> {
    Ok(w
        .draw_positions(batch_size, rng)?
        .into_iter()
        .map(|i| w.ids[i].clone())
        .collect())
}

/// A record and its ranking partner. `y_rank` is +1 when `x_id` is hateful.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedExample {
    pub x_id: String,
    pub pair_id: String,
    pub y_rank: i8,
}

/// Index-level pairing over parallel id/label slices.
///
/// Returns `(anchor, partner, y_rank)` with positions into `ids`. A partner is
/// a text confounder of the anchor present in `ids` when one exists, otherwise
/// any record of the opposite label, chosen uniformly either way.
pub fn pair_positions<R: Rng + ?Sized>(
    ids: &[String],
    labels: &[Label],
    graph: &ConfounderGraph,
    rng: &mut R,
) -> Result<Vec<(usize, usize, i8)>, SamplingError> {
    debug_assert_eq!(ids.len(), labels.len());
    let mut by_label: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        by_label[l.as_u8() as usize].push(i);
    }
    if by_label[0].is_empty() || by_label[1].is_empty() {
        return Err(SamplingError::SingleClass {
            hateful: by_label[1].len(),
            not_hateful: by_label[0].len(),
        });
    }
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let neighbours = graph.text_neighbours();

    let mut out = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let confounders: Vec<usize> = neighbours
            .get(id.as_str())
            .map(|ns| {
                ns.iter()
                    .filter_map(|n| pos.get(n).copied())
                    .filter(|&j| labels[j] != labels[i])
                    .collect()
            })
            .unwrap_or_default();
        let partner = if confounders.is_empty() {
            let pool = &by_label[labels[i].flipped().as_u8() as usize];
            pool[rng.random_range(0..pool.len())]
        } else {
            confounders[rng.random_range(0..confounders.len())]
        };
        let y_rank = if labels[i] == Label::Hateful { 1 } else { -1 };
        out.push((i, partner, y_rank));
    }
    Ok(out)
}

/// One ranking pair per labeled record of `ds`; unlabeled rows are skipped.
pub fn pair_for_ranking<R: Rng + ?Sized>(
    ds: &Dataset,
    graph: &ConfounderGraph,
    rng: &mut R,
) -> Result<Vec<PairedExample>, SamplingError> {
    let (ids, labels): (Vec<String>, Vec<Label>) = ds
        .records()
        .iter()
        .filter_map(|r| r.label.map(|l| (r.id.clone(), l)))
        .unzip();
    Ok(pair_positions(&ids, &labels, graph, rng)?
        .into_iter()
        .map(|(a, b, y_rank)| PairedExample {
            x_id: ids[a].clone(),
            pair_id: ids[b].clone(),
            y_rank,
        })
        .collect())
}
