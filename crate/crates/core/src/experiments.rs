//! End-to-end experiment drivers: train/evaluate cycles, kernel-size
//! sweeps, and branch ablations.
//!
//! All drivers share one dataset per configuration (generated from the
//! config seed) and vary only the training seed between repeats, so
//! comparisons across variants see identical data. Everything here is a
//! pure function of its arguments.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsm::{self, BSMConfig, ModelParams, TrainResult};
use crate::config::{EvalConfig, RunConfig};
use crate::dataio::{gen_dataset, split_indices, Sample};
use crate::error::{Error, Result};
use crate::losses::BranchSet;
use crate::metrics::{self, EvalReport};

/// Generate the dataset a config describes (size, texture, squeeze kernel).
pub fn build_dataset(cfg: &RunConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    gen_dataset(cfg.data.n_samples, cfg.seed, &cfg.data, cfg.model.squeeze_kernel()?)
}

/// Predict on every sample and score against its ground truth; parallel
/// across samples.
pub fn eval_model(params: &ModelParams, model: &BSMConfig, samples: &[Sample], eval: &EvalConfig) -> Result<EvalReport> {
    eval.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let pairs: Vec<_> = samples
        .par_iter()
        .map(|s| bsm::infer(&s.image, params, model).map(|o| (o.mask, s.mask().clone())))
        .collect::<Result<_>>()?;
    metrics::evaluate(&pairs, &eval.tolerances, eval.boundary_iou_d)
}

/// Everything one train/eval cycle produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub train: TrainResult,
    pub report: EvalReport,
}

/// Train on the 80% split of `dataset` and evaluate on the held-out 20%.
pub fn run_once(cfg: &RunConfig, dataset: &[Sample], train_seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train_idx, val_idx) = split_indices(dataset.len());
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "dataset of {} samples leaves an empty split",
            dataset.len()
        )));
    }
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let train = bsm::train(&train_set, &cfg.model, &cfg.loss, &cfg.optim, train_seed)?;
    let report = eval_model(&train.params, &cfg.model, &val_set, &cfg.eval)?;
    Ok(RunOutcome { train, report })
}

/// Mean metrics of one seeded run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seed: u64,
    pub mean_mask_iou: f64,
    pub mean_f_scores: BTreeMap<usize, f64>,
    pub mean_boundary_iou: f64,
}

impl SeedAggregate {
    fn from_report(seed: u64, report: &EvalReport) -> Self {
        SeedAggregate {
            seed,
            mean_mask_iou: report.mean_mask_iou,
            mean_f_scores: report.mean_f_scores.clone(),
            mean_boundary_iou: report.mean_boundary_iou,
        }
    }
}

fn mean_over_seeds(per_seed: &[SeedAggregate]) -> (f64, BTreeMap<usize, f64>, f64) {
    let n = per_seed.len() as f64;
    let mask_iou = per_seed.iter().map(|a| a.mean_mask_iou).sum::<f64>() / n;
    let biou = per_seed.iter().map(|a| a.mean_boundary_iou).sum::<f64>() / n;
    let mut f_scores = BTreeMap::new();
    for agg in per_seed {
        for (tol, f) in &agg.mean_f_scores {
            *f_scores.entry(*tol).or_insert(0.0) += f / n;
        }
    }
    (mask_iou, f_scores, biou)
}

/// One row of a branch ablation: a branch subset scored over several seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub branches: BranchSet,
    pub per_seed: Vec<SeedAggregate>,
    pub mean_mask_iou: f64,
    pub mean_f_scores: BTreeMap<usize, f64>,
    pub mean_boundary_iou: f64,
}

/// The standard ablation ladder, weakest supervision first.
pub fn ablation_variants() -> Vec<(String, BranchSet)> {
    vec![
        ("seg".into(), BranchSet::seg_only()),
        ("con_exp".into(), BranchSet { bnd: false, con: true, exp: true }),
        ("full".into(), BranchSet::default()),
    ]
}

/// Train and evaluate each branch subset over the given seeds, on one shared
/// dataset generated from the base config.
pub fn ablate(cfg: &RunConfig, variants: &[(String, BranchSet)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let dataset = build_dataset(cfg)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (label, branches) in variants {
        let mut vcfg = cfg.clone();
        vcfg.model.branches = *branches;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = run_once(&vcfg, &dataset, seed)?;
            per_seed.push(SeedAggregate::from_report(seed, &outcome.report));
        }
        let (mean_mask_iou, mean_f_scores, mean_boundary_iou) = mean_over_seeds(&per_seed);
        rows.push(AblationRow {
            label: label.clone(),
            branches: *branches,
            per_seed,
            mean_mask_iou,
            mean_f_scores,
            mean_boundary_iou,
        });
    }
    Ok(rows)
}

/// One row of a kernel-size sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub per_seed: Vec<SeedAggregate>,
    pub mean_mask_iou: f64,
    pub mean_f_scores: BTreeMap<usize, f64>,
    pub mean_boundary_iou: f64,
}

/// Train and evaluate the model at each squeeze kernel size, regenerating
/// the dataset per size (the supervision targets depend on it).
pub fn sweep_k(cfg: &RunConfig, values: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one kernel size and one seed".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &k in values {
        let mut vcfg = cfg.clone();
        vcfg.model.kernel_size = k;
        let dataset = build_dataset(&vcfg)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = run_once(&vcfg, &dataset, seed)?;
            per_seed.push(SeedAggregate::from_report(seed, &outcome.report));
        }
        let (mean_mask_iou, mean_f_scores, mean_boundary_iou) = mean_over_seeds(&per_seed);
        rows.push(SweepRow { k, per_seed, mean_mask_iou, mean_f_scores, mean_boundary_iou });
    }
    Ok(rows)
}

fn f_score_header(f_scores: &BTreeMap<usize, f64>) -> String {
    f_scores.keys().map(|tol| format!(",f_{tol}px")).collect()
}

fn f_score_cells(f_scores: &BTreeMap<usize, f64>) -> String {
    f_scores.values().map(|f| format!(",{f}")).collect()
}

/// Ablation rows as CSV, one row per branch subset.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        out.push_str(&format!(
            "label,bnd,con,exp,seeds,mean_mask_iou,mean_boundary_iou{}\n",
            f_score_header(&first.mean_f_scores)
        ));
    }
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}{}\n",
            row.label,
            row.branches.bnd,
            row.branches.con,
            row.branches.exp,
            row.per_seed.len(),
            row.mean_mask_iou,
            row.mean_boundary_iou,
            f_score_cells(&row.mean_f_scores)
        ));
    }
    out
}

/// Sweep rows as CSV, one row per kernel size.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        out.push_str(&format!(
            "k,seeds,mean_mask_iou,mean_boundary_iou{}\n",
            f_score_header(&first.mean_f_scores)
        ));
    }
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}{}\n",
            row.k,
            row.per_seed.len(),
            row.mean_mask_iou,
            row.mean_boundary_iou,
            f_score_cells(&row.mean_f_scores)
        ));
    }
    out
}
