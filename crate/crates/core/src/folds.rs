//! Cross-validation fold plans that never split a confounder group.
//!
//! The training pool is cut into *units*: each confounder group (restricted to
//! the pool) is one unit and every unlinked record is a unit of its own. Units
//! are shuffled, then placed largest first into whichever fold cell currently
//! holds the fewest records. Fold `i` evaluates on cell `i` and trains on the
//! remaining cells.
//!
//! Each fold also receives a freshly drawn split of the dev set: a
//! `dev_fraction` share joins the training side, the rest joins the eval side,
//! again without breaking groups. A dev group that shares a component with
//! training-pool records follows that component's side in every fold.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ConfounderGraph, Dataset};

#[derive(Debug, Error, PartialEq)]
pub enum FoldError {
    #[error("k = {0} is below the minimum of 2 folds")]
    TooFewFolds(usize),
    #[error("dev_fraction {0} must lie strictly between 0 and 1")]
    BadDevFraction(f64),
    #[error("k exceeds assignable units (k = {k}, units = {units})")]
    KExceedsUnits { k: usize, units: usize },
    #[error("id {0:?} appears in both the training pool and the dev set")]
    OverlappingSets(String),
    #[error(
        "fold {fold}: dev set of {dev_len} records cannot be split into {lo}..={hi} training records \
         with groups intact (largest dev group has {largest_unit} records)"
    )]
    DevNotHalvable {
        fold: usize,
        dev_len: usize,
        lo: usize,
        hi: usize,
        largest_unit: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub k: usize,
    pub seed: u64,
    pub dev_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            k: 15,
            seed: 0,
            dev_fraction: 0.5,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), FoldError> {
        if self.k < 2 {
            return Err(FoldError::TooFewFolds(self.k));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(FoldError::BadDevFraction(self.dev_fraction));
        }
        Ok(())
    }

    /// Inclusive bounds on the number of dev records placed on the training side.
    pub fn dev_train_bounds(&self, dev_len: usize) -> (usize, usize) {
        let exact = self.dev_fraction * dev_len as f64;
        (exact.floor() as usize, exact.ceil() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    TrainPool,
    DevHalfTrain,
    DevHalfEval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: BTreeSet<String>,
    pub eval_ids: BTreeSet<String>,
    pub provenance: BTreeMap<String, Origin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub config: SplitConfig,
    /// Sorted training-pool ids.
    pub train_pool: Vec<String>,
    /// Sorted dev ids.
    pub dev_ids: Vec<String>,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Groups `ids` into units along graph components, keeping first-seen order.
/// Returns the units and, per unit, the graph group it came from.
fn units_of<'a>(
    ids: impl Iterator<Item = &'a str>,
    graph: &ConfounderGraph,
) -> (Vec<Vec<String>>, Vec<Option<usize>>) {
    let mut units: Vec<Vec<String>> = Vec::new();
    let mut origin: Vec<Option<usize>> = Vec::new();
    let mut unit_of_group: HashMap<usize, usize> = HashMap::new();
    for id in ids {
        match graph.group_index(id) {
            Some(g) => {
                let u = *unit_of_group.entry(g).or_insert_with(|| {
                    units.push(Vec::new());
                    origin.push(Some(g));
                    units.len() - 1
                });
                units[u].push(id.to_owned());
            }
            None => {
                units.push(vec![id.to_owned()]);
                origin.push(None);
            }
        }
    }
    (units, origin)
}

/// Builds a k-fold plan over `train` with per-fold dev augmentation.
pub fn plan_folds(
    train: &Dataset,
    dev: &Dataset,
    graph: &ConfounderGraph,
    cfg: &SplitConfig,
) -> Result<FoldPlan, FoldError> {
    cfg.validate()?;
    if let Some(id) = dev.ids().find(|id| train.contains(id)) {
        return Err(FoldError::OverlappingSets(id.to_owned()));
    }

    let (mut train_units, train_groups) = units_of(train.ids(), graph);
    if cfg.k > train_units.len() {
        return Err(FoldError::KExceedsUnits {
            k: cfg.k,
            units: train_units.len(),
        });
    }
    let (dev_units, dev_groups) = units_of(dev.ids(), graph);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Carry the group tag along through the shuffle so dev ties can find their cell.
    let mut tagged: Vec<(Vec<String>, Option<usize>)> =
        train_units.drain(..).zip(train_groups).collect();
    tagged.shuffle(&mut rng);
    tagged.sort_by_key(|t| std::cmp::Reverse(t.0.len()));

    let mut cell_sizes = vec![0usize; cfg.k];
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); cfg.k];
    let mut cell_of_group: HashMap<usize, usize> = HashMap::new();
    for (unit, group) in &tagged {
        let target = (0..cfg.k)
            .min_by_key(|&c| (cell_sizes[c], c))
            .expect("k >= 2");
        cell_sizes[target] += unit.len();
        cells[target].extend(unit.iter().cloned());
        if let Some(g) = group {
            cell_of_group.insert(*g, target);
        }
    }

    // Dev units tied to a training-pool component follow that component.
    let dev_tie: Vec<Option<usize>> = dev_groups
        .iter()
        .map(|g| g.and_then(|g| cell_of_group.get(&g).copied()))
        .collect();
    let free: Vec<usize> = (0..dev_units.len()).filter(|&u| dev_tie[u].is_none()).collect();

    let dev_len = dev.len();
    let (lo, hi) = cfg.dev_train_bounds(dev_len);
    let largest_dev_unit = dev_units.iter().map(Vec::len).max().unwrap_or(0);

    let mut train_pool: Vec<String> = tagged.iter().flat_map(|(u, _)| u.iter().cloned()).collect();
    train_pool.sort();
    let mut dev_ids: Vec<String> = dev.ids().map(str::to_owned).collect();
    dev_ids.sort();

    let mut folds = Vec::with_capacity(cfg.k);
    for fold in 0..cfg.k {
        let mut dev_train_units: Vec<usize> = Vec::new();
        let mut forced_train = 0usize;
        for (u, tie) in dev_tie.iter().enumerate() {
            if let Some(cell) = tie {
                if *cell != fold {
                    dev_train_units.push(u);
                    forced_train += dev_units[u].len();
                }
            }
        }

        let mut order = free.clone();
        order.shuffle(&mut rng);
        let sizes: Vec<usize> = order.iter().map(|&u| dev_units[u].len()).collect();
        let need_lo = lo.saturating_sub(forced_train);
        let need_hi = hi.checked_sub(forced_train);
        let chosen = need_hi.and_then(|need_hi| {
            pick_subset(&sizes, need_lo, need_hi, cfg.dev_fraction, &mut rng)
        });
        let chosen = chosen.ok_or(FoldError::DevNotHalvable {
            fold,
            dev_len,
            lo,
            hi,
            largest_unit: largest_dev_unit,
        })?;
        dev_train_units.extend(chosen.into_iter().map(|pos| order[pos]));

        let mut f = Fold {
            train_ids: BTreeSet::new(),
            eval_ids: BTreeSet::new(),
            provenance: BTreeMap::new(),
        };
        for (c, members) in cells.iter().enumerate() {
            let side = if c == fold { &mut f.eval_ids } else { &mut f.train_ids };
            for id in members {
                side.insert(id.clone());
                f.provenance.insert(id.clone(), Origin::TrainPool);
            }
        }
        let in_train: BTreeSet<usize> = dev_train_units.into_iter().collect();
        for (u, members) in dev_units.iter().enumerate() {
            let (side, origin) = if in_train.contains(&u) {
                (&mut f.train_ids, Origin::DevHalfTrain)
            } else {
                (&mut f.eval_ids, Origin::DevHalfEval)
            };
            for id in members {
                side.insert(id.clone());
                f.provenance.insert(id.clone(), origin);
            }
        }
        folds.push(f);
    }

    Ok(FoldPlan {
        config: *cfg,
        train_pool,
        dev_ids,
        folds,
    })
}

/// Randomly chooses a subset of `sizes` whose total lies in `lo..=hi`.
///
/// Every item is included with probability `p_take` unless that choice would
/// make the target unreachable, which suffix reachability sets decide.
/// Returns positions into `sizes`, or `None` if no subset fits.
fn pick_subset<R: Rng>(
    sizes: &[usize],
    lo: usize,
    hi: usize,
    p_take: f64,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    let cap = hi.min(total);
    if lo > cap {
        return None;
    }
    // reach[j][s]: some subset of sizes[j..] sums to s (s <= cap)
    let mut reach = vec![vec![false; cap + 1]; sizes.len() + 1];
    reach[sizes.len()][0] = true;
    for j in (0..sizes.len()).rev() {
        let (head, tail) = reach.split_at_mut(j + 1);
        let (cur, next) = (&mut head[j], &tail[0]);
        for s in 0..=cap {
            cur[s] = next[s] || (s >= sizes[j] && next[s - sizes[j]]);
        }
    }
    let feasible = |j: usize, acc: usize| -> bool {
        if acc > cap {
            return false;
        }
        let from = lo.saturating_sub(acc);
        let to = cap - acc;
        (from..=to).any(|s| reach[j][s])
    };
    if !feasible(0, 0) {
        return None;
    }
    let mut acc = 0;
    let mut picked = Vec::new();
    for (j, &size) in sizes.iter().enumerate() {
        let can_take = feasible(j + 1, acc + size);
        let can_skip = feasible(j + 1, acc);
        let take = match (can_take, can_skip) {
            (true, true) => rng.random_bool(p_take),
            (true, false) => true,
            (false, true) => false,
            (false, false) => unreachable!("feasibility was checked one step earlier"),
        };
        if take {
            acc += size;
            picked.push(j);
        }
    }
    Some(picked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    FoldCount { expected: usize, actual: usize },
    /// An id sits on both sides of one fold.
    Overlap { fold: usize, id: String },
    /// A fold is missing an id from the pool or dev set.
    Missing { fold: usize, id: String },
    /// A fold names an id outside the pool and dev set.
    Unknown { fold: usize, id: String },
    /// A training-pool id is evaluated in a number of folds other than one.
    Partition { id: String, eval_count: usize },
    GroupSplit { fold: usize, group: Vec<String> },
    DevHalving { fold: usize, dev_in_train: usize, lo: usize, hi: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every fold-plan invariant; violations are returned as data.
pub fn verify_plan(plan: &FoldPlan, graph: &ConfounderGraph) -> VerificationReport {
    let mut violations = Vec::new();
    if plan.folds.len() != plan.config.k {
        violations.push(Violation::FoldCount {
            expected: plan.config.k,
            actual: plan.folds.len(),
        });
    }

    let pool: BTreeSet<&str> = plan.train_pool.iter().map(String::as_str).collect();
    let dev: BTreeSet<&str> = plan.dev_ids.iter().map(String::as_str).collect();
    let mut eval_count: BTreeMap<&str, usize> = pool.iter().map(|&id| (id, 0)).collect();
    let (lo, hi) = plan.config.dev_train_bounds(dev.len());

    let groups: Vec<Vec<&str>> = graph
        .groups()
        .iter()
        .map(|g| {
            g.iter()
                .map(String::as_str)
                .filter(|id| pool.contains(id) || dev.contains(id))
                .collect::<Vec<_>>()
        })
        .filter(|g| g.len() > 1)
        .collect();

    for (fi, fold) in plan.folds.iter().enumerate() {
        for id in fold.train_ids.intersection(&fold.eval_ids) {
            violations.push(Violation::Overlap {
                fold: fi,
                id: id.clone(),
            });
        }
        for id in fold.train_ids.iter().chain(&fold.eval_ids) {
            if !pool.contains(id.as_str()) && !dev.contains(id.as_str()) {
                violations.push(Violation::Unknown {
                    fold: fi,
                    id: id.clone(),
                });
            }
        }
        for &id in pool.iter().chain(dev.iter()) {
            if !fold.train_ids.contains(id) && !fold.eval_ids.contains(id) {
                violations.push(Violation::Missing {
                    fold: fi,
                    id: id.to_owned(),
                });
            }
        }
        for id in &fold.eval_ids {
            if let Some(c) = eval_count.get_mut(id.as_str()) {
                *c += 1;
            }
        }
        for g in &groups {
            let in_train = g.iter().filter(|id| fold.train_ids.contains(**id)).count();
            let in_eval = g.iter().filter(|id| fold.eval_ids.contains(**id)).count();
            if in_train > 0 && in_eval > 0 {
                violations.push(Violation::GroupSplit {
                    fold: fi,
                    group: g.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        let dev_in_train = dev.iter().filter(|id| fold.train_ids.contains(**id)).count();
        if !dev.is_empty() && (dev_in_train < lo || dev_in_train > hi) {
            violations.push(Violation::DevHalving {
                fold: fi,
                dev_in_train,
                lo,
                hi,
            });
        }
    }

    for (id, count) in eval_count {
        if count != 1 {
            violations.push(Violation::Partition {
                id: id.to_owned(),
                eval_count: count,
            });
        }
    }
    VerificationReport { violations }
}
