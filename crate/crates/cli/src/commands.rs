use std::collections::{BTreeSet, HashMap};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use confound::ensemble::{
    read_prediction_rows, rows_to_set, rows_to_truth, write_prediction_rows, PredictionRow, WeightsFile,
};
use confound::tags::{parse_tag_predictions, TagAllowlist, TaggedMeme};
use confound::{
    accuracy, augment_text, blend as blend_sets, detect_confounders, draw_batch, ea_optimize, load_dataset,
    plan_folds, train_linear, verify_plan, ConfounderGraph, Dataset, EaConfig, FeatureTable, FoldPlan, Label,
    LabeledFeatures, LossConfig, PredictionSet, SamplingWeights, ScoredLabels, SplitConfig, TrainConfig, Truth,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::{write_atomic, RunManifest};
use crate::{OptimizeArgs, SplitArgs, TrainArgs};

pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

type CliResult<T = ()> = Result<T, CliError>;

trait ExitKind<T> {
    /// Input or usage problem: exit 2.
    fn user(self) -> CliResult<T>;
    /// Anything else: exit 1.
    fn internal(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ExitKind<T> for Result<T, E> {
    fn user(self) -> CliResult<T> {
        self.map_err(|e| CliError { code: 2, error: e.into() })
    }

    fn internal(self) -> CliResult<T> {
        self.map_err(|e| CliError { code: 1, error: e.into() })
    }
}

fn user_err<T>(msg: impl Display) -> CliResult<T> {
    Err(CliError {
        code: 2,
        error: anyhow!("{msg}"),
    })
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(|e| anyhow!("{}: {e}", path.display())).user()
}

fn labeled_graph(train: &Dataset, dev: &Dataset) -> CliResult<(Dataset, ConfounderGraph)> {
    let all = train.concat(dev).user()?;
    let graph = detect_confounders(&all).user()?;
    Ok((all, graph))
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_rows(path: &Path) -> CliResult<Vec<PredictionRow>> {
    let file = fs::File::open(path)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .user()?;
    read_prediction_rows(file).map_err(|e| anyhow!("{}: {e}", path.display())).user()
}

/// Prediction files keyed by file stem, in argument order.
fn read_prediction_files(paths: &[PathBuf]) -> CliResult<(Vec<PredictionSet>, Vec<Vec<PredictionRow>>)> {
    let mut seen = BTreeSet::new();
    let mut sets = Vec::new();
    let mut all_rows = Vec::new();
    for p in paths {
        let id = model_id(p);
        if !seen.insert(id.clone()) {
            return user_err(format!("two prediction files share the model id {id:?}"));
        }
        let rows = read_rows(p)?;
        sets.push(rows_to_set(&id, &rows).user()?);
        all_rows.push(rows);
    }
    Ok((sets, all_rows))
}

/// Truth from a labeled `.jsonl` dataset or a labeled prediction-format CSV.
fn read_truth(path: &Path) -> CliResult<Truth> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let ds = read_dataset(path)?;
        let entries = ds
            .records()
            .iter()
            .map(|r| match r.label {
                Some(l) => Ok((r.id.clone(), l.as_u8())),
                None => user_err(format!("truth record {:?} is unlabeled", r.id)),
            })
            .collect::<CliResult<Vec<_>>>()?;
        Truth::new(entries).user()
    } else {
        rows_to_truth(&read_rows(path)?).user()
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn detect(dataset: &Path, dev: Option<&Path>, out: &Path) -> CliResult {
    let train = read_dataset(dataset)?;
    let dev_ds = match dev {
        Some(p) => read_dataset(p)?,
        None => Dataset::default(),
    };
    let (_, graph) = labeled_graph(&train, &dev_ds)?;
    write_atomic(out, format!("{}\n", graph.to_json()).as_bytes()).internal()?;

    let mut m = RunManifest::new("detect", json!({}), None);
    m.add_input(dataset).internal()?;
    if let Some(p) = dev {
        m.add_input(p).internal()?;
    }
    m.write_next_to(out).internal()?;
    println!("links={} groups={}", graph.links().len(), graph.groups().len());
    Ok(())
}

pub fn split(a: &SplitArgs) -> CliResult {
    let train = read_dataset(&a.dataset)?;
    let dev = match &a.dev {
        Some(p) => read_dataset(p)?,
        None => Dataset::default(),
    };
    let (_, graph) = labeled_graph(&train, &dev)?;
    let cfg = SplitConfig {
        k: a.folds,
        seed: a.seed,
        dev_fraction: a.dev_fraction,
    };
    let plan = plan_folds(&train, &dev, &graph, &cfg).user()?;
    let report = verify_plan(&plan, &graph);
    if !report.is_valid() {
        let listing = serde_json::to_string_pretty(&report.violations).unwrap_or_default();
        return Err(CliError {
            code: 1,
            error: anyhow!("fold plan failed verification:\n{listing}"),
        });
    }
    write_atomic(&a.out, plan.to_json().as_bytes()).internal()?;

    let mut m = RunManifest::new("split", serde_json::to_value(cfg).internal()?, Some(a.seed));
    m.add_input(&a.dataset).internal()?;
    if let Some(p) = &a.dev {
        m.add_input(p).internal()?;
    }
    m.write_next_to(&a.out).internal()?;
    println!("folds={} train_pool={} dev={}", plan.folds.len(), plan.train_pool.len(), plan.dev_ids.len());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult {
    let train_ds = read_dataset(&a.dataset)?;
    let dev_ds = match &a.dev {
        Some(p) => read_dataset(p)?,
        None => Dataset::default(),
    };
    let (all, graph) = labeled_graph(&train_ds, &dev_ds)?;
    let features = FeatureTable::load(&a.features)
        .map_err(|e| anyhow!("{}: {e}", a.features.display()))
        .user()?;
    let plan_text = fs::read_to_string(&a.plan)
        .map_err(|e| anyhow!("{}: {e}", a.plan.display()))
        .user()?;
    let plan = FoldPlan::from_json(&plan_text).user()?;

    let mut labels: HashMap<String, Label> = HashMap::new();
    for r in all.records() {
        if let Some(l) = r.label {
            labels.insert(r.id.clone(), l);
        }
    }
    for p in &a.label_sources {
        for r in read_dataset(p)?.records() {
            if let Some(l) = r.label {
                labels.insert(r.id.clone(), l);
            }
        }
    }

    let loss_cfg = LossConfig::from_ratio(a.alpha_pos_ratio)
        .user()?
        .with_ranking(a.gamma, a.margin);
    loss_cfg.validate().user()?;
    let base_cfg = TrainConfig {
        learning_rate: a.learning_rate,
        max_epochs: a.max_epochs,
        patience: a.patience,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    base_cfg.validate().user()?;

    let folds: Vec<usize> = match a.fold {
        Some(f) if f < plan.folds.len() => vec![f],
        Some(f) => return user_err(format!("fold {f} out of range (plan has {})", plan.folds.len())),
        None => (0..plan.folds.len()).collect(),
    };
    fs::create_dir_all(&a.out).internal()?;

    let label_of = |id: &str| labels.get(id).copied();
    for &fi in &folds {
        let fold = &plan.folds[fi];
        let select = |ids: &BTreeSet<String>| {
            LabeledFeatures::select(&features, ids.iter().map(String::as_str), label_of)
                .map_err(|id| anyhow!("fold {fi}: id {id:?} lacks features or a label"))
        };
        let train_set = select(&fold.train_ids).user()?;
        let eval_set = select(&fold.eval_ids).user()?;
        let sampler = SamplingWeights::for_ids(train_set.ids.iter().cloned(), &graph, a.upsample_factor).user()?;
        let cfg = TrainConfig {
            seed: a.seed.wrapping_add(fi as u64),
            ..base_cfg
        };
        let outcome = train_linear(&train_set, &eval_set, &graph, &loss_cfg, &cfg, &sampler).user()?;

        let rows = features
            .ids()
            .iter()
            .map(|id| {
                let proba = outcome
                    .model
                    .predict(features.row(id).expect("id from table"))
                    .expect("dimension matches table");
                PredictionRow {
                    id: id.clone(),
                    proba,
                    label: label_of(id).map(Label::as_u8),
                }
            })
            .collect::<Vec<_>>();
        let mut buf = Vec::new();
        write_prediction_rows(&mut buf, &rows).internal()?;
        write_atomic(&a.out.join(format!("fold_{fi}.csv")), &buf).internal()?;

        let best = outcome.best_epoch.map(|e| outcome.trace[e]).unwrap_or(f64::NAN);
        println!("fold={fi} epochs={} best_eval_auroc={}", outcome.trace.len(), fmt6(best));
    }

    let mut m = RunManifest::new(
        "train",
        json!({
            "folds": folds,
            "loss": loss_cfg,
            "train": base_cfg,
            "upsample_factor": a.upsample_factor,
        }),
        Some(a.seed),
    );
    for p in [&a.dataset, &a.features, &a.plan].into_iter().chain(a.dev.as_ref()).chain(&a.label_sources) {
        m.add_input(p).internal()?;
    }
    m.write_next_to(&a.out).internal()?;
    Ok(())
}

pub fn optimize(a: &OptimizeArgs) -> CliResult {
    let (sets, _) = read_prediction_files(&a.predictions)?;
    let truth = read_truth(&a.truth)?;
    for s in &sets {
        if let Err(e) = truth.align(s) {
            return user_err(e);
        }
    }
    let cfg = EaConfig {
        population: a.population,
        generations: a.generations,
        tournament_size: a.tournament,
        mutation_sigma: a.sigma,
        crossover_rate: a.crossover,
        elitism: a.elitism,
        seed: a.seed,
    };
    let outcome = ea_optimize(&sets, &truth, &cfg).user()?;
    let file = WeightsFile {
        weights: sets
            .iter()
            .zip(outcome.weights.as_slice())
            .map(|(s, &w)| (s.model_id().to_owned(), w))
            .collect(),
        auroc: outcome.auroc,
        config: cfg,
    };
    write_atomic(&a.out, file.to_json().as_bytes()).internal()?;

    let mut m = RunManifest::new("optimize", serde_json::to_value(cfg).internal()?, Some(a.seed));
    for p in a.predictions.iter().chain([&a.truth]) {
        m.add_input(p).internal()?;
    }
    m.write_next_to(&a.out).internal()?;

    for s in &sets {
        println!("weight[{}]={}", s.model_id(), fmt6(file.weights[s.model_id()]));
    }
    println!("auroc={}", fmt6(outcome.auroc));
    Ok(())
}

pub fn blend(predictions: &[PathBuf], weights: &Path, out: &Path) -> CliResult {
    let (sets, rows) = read_prediction_files(predictions)?;
    let text = fs::read_to_string(weights)
        .map_err(|e| anyhow!("{}: {e}", weights.display()))
        .user()?;
    let wf = WeightsFile::from_json(&text).user()?;
    let ids: Vec<&str> = sets.iter().map(PredictionSet::model_id).collect();
    let w = wf.ordered(&ids).user()?;
    let blended = blend_sets(&sets, &w).user()?;

    let labels: HashMap<&str, Option<u8>> = rows[0].iter().map(|r| (r.id.as_str(), r.label)).collect();
    let out_rows: Vec<PredictionRow> = blended
        .iter()
        .map(|(id, proba)| PredictionRow {
            id: id.to_owned(),
            proba,
            label: labels.get(id).copied().flatten(),
        })
        .collect();
    let mut buf = Vec::new();
    write_prediction_rows(&mut buf, &out_rows).internal()?;
    write_atomic(out, &buf).internal()?;

    let mut m = RunManifest::new("blend", json!({ "models": ids }), None);
    for p in predictions.iter().map(PathBuf::as_path).chain([weights]) {
        m.add_input(p).internal()?;
    }
    m.write_next_to(out).internal()?;
    println!("rows={}", out_rows.len());
    Ok(())
}

pub fn eval(prediction: &Path, truth_path: &Path, threshold: f64) -> CliResult {
    let rows = read_rows(prediction)?;
    let set = rows_to_set(&model_id(prediction), &rows).user()?;
    let truth = read_truth(truth_path)?;
    let scores = truth.align(&set).user()?;
    let sl = ScoredLabels::new(&scores, truth.labels()).user()?;
    let auc = confound::auroc(&sl).user()?;
    println!("auroc={}", fmt6(auc));
    println!("accuracy={}", fmt6(accuracy(&sl, threshold)));
    Ok(())
}

pub fn tags(dataset: &Path, predictions: &Path, allowlist: Option<&Path>, out: &Path) -> CliResult {
    let ds = read_dataset(dataset)?;
    let allow = match allowlist {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| anyhow!("{}: {e}", p.display())).user()?;
            TagAllowlist::from_text(&text).user()?
        }
        None => TagAllowlist::bundled(),
    };
    let text = fs::read_to_string(predictions)
        .map_err(|e| anyhow!("{}: {e}", predictions.display()))
        .user()?;
    let mut tagged: HashMap<String, TaggedMeme> = HashMap::new();
    for p in parse_tag_predictions(&text).user()? {
        if !ds.contains(&p.id) {
            return user_err(format!("tag predictions name unknown id {:?}", p.id));
        }
        tagged.insert(p.id.clone(), TaggedMeme::from_predictions(p.id, &p.classes, &allow));
    }

    let mut records = Vec::with_capacity(ds.len());
    let mut augmented = 0;
    for rec in ds.records() {
        let mut rec = rec.clone();
        if let Some(t) = tagged.get(&rec.id) {
            if !t.tags.is_empty() {
                augmented += 1;
            }
            rec.text = augment_text(&rec, t).user()?;
        }
        records.push(rec);
    }
    let out_ds = Dataset::from_records(records).internal()?;
    let mut buf = Vec::new();
    out_ds.to_writer(&mut buf).internal()?;
    write_atomic(out, &buf).internal()?;

    let mut m = RunManifest::new("tags", json!({ "allowlist_classes": allow.classes().len() }), None);
    for p in [dataset, predictions].into_iter().chain(allowlist) {
        m.add_input(p).internal()?;
    }
    m.write_next_to(out).internal()?;
    println!("records={} augmented={augmented}", out_ds.len());
    Ok(())
}

pub fn sample_audit(dataset: &Path, factor: f64, draws: usize, seed: u64) -> CliResult {
    let ds = read_dataset(dataset)?;
    let graph = detect_confounders(&ds).user()?;
    let w = confound::upsample_weights(&ds, &graph, factor).user()?;
    let batch = draw_batch(&w, draws, &mut ChaCha8Rng::seed_from_u64(seed)).user()?;

    let text_ids = graph.text_confounder_ids();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for id in &batch {
        *counts.entry(id.as_str()).or_default() += 1;
    }
    let expected_share: f64 = w
        .ids()
        .iter()
        .zip(w.probabilities())
        .filter(|(id, _)| text_ids.contains(id.as_str()))
        .map(|(_, p)| p)
        .sum();
    let observed_share = batch.iter().filter(|id| text_ids.contains(id.as_str())).count() as f64 / draws as f64;
    println!("records={} text_confounders={} draws={draws}", ds.len(), text_ids.len());
    println!("confounder_share_expected={}", fmt6(expected_share));
    println!("confounder_share_observed={}", fmt6(observed_share));
    if ds.len() <= 100 {
        for (id, p) in w.ids().iter().zip(w.probabilities()) {
            let f = *counts.get(id.as_str()).unwrap_or(&0) as f64 / draws as f64;
            println!("id={id} expected={} observed={}", fmt6(*p), fmt6(f));
        }
    }
    Ok(())
}
