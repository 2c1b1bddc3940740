//! Cross-validated few-shot evaluation, aggregation and input-efficiency
//! analysis.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adaptation::{finetune, TuneConfig};
use crate::error::{Error, Result};
use crate::model::{init_network_params, predict, MiniUNet, ModelConfig, ModelParams, Network};
use crate::objective::jaccard;
use crate::seed;
use crate::sparsifier::{count_inputs, sparsify, SparseMask, SparsitySpec};
use crate::task_store::{make_folds, DenseMask, FoldSplit, Image, TaskId, TaskSample};

/// Initialization strategy compared on the few-shot task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Meta-learned initialization.
    Weasel,
    Scratch,
    /// Dense pretraining on the named source task.
    Finetune(TaskId),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Weasel => write!(f, "weasel"),
            Method::Scratch => write!(f, "scratch"),
            Method::Finetune(source) => write!(f, "finetune:{source}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weasel" => Ok(Method::Weasel),
            "scratch" => Ok(Method::Scratch),
            _ => match s.strip_prefix("finetune:") {
                Some(source) => Ok(Method::Finetune(TaskId::parse(source)?)),
                None => Err(Error::InvalidArgument(format!(
                    "unknown method {s:?}; use weasel, scratch or finetune:<dataset>/<class>"
                ))),
            },
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub held_out_task: TaskId,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub sparsity: Vec<SparsitySpec>,
    pub folds: usize,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn default_shots() -> Vec<usize> {
        vec![1, 5, 10, 20]
    }

    pub fn default_sparsity() -> Vec<SparsitySpec> {
        let mut s: Vec<SparsitySpec> = [1, 5, 10, 20].into_iter().map(SparsitySpec::Points).collect();
        s.extend([8, 12, 16, 20].into_iter().map(SparsitySpec::Grid));
        s.push(SparsitySpec::Dense);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.shots.is_empty() || self.sparsity.is_empty() {
            return Err(Error::Config("plan needs methods, shots and sparsity".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("plan needs at least two folds".into()));
        }
        if self.shots.contains(&0) {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        for s in &self.sparsity {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Cells in output order: method, then shots, then sparsity, then fold.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for method in &self.methods {
            for &k in &self.shots {
                for &sparsity in &self.sparsity {
                    for fold in 0..self.folds {
                        cells.push(Cell {
                            method: method.clone(),
                            k,
                            sparsity,
                            fold,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub k: usize,
    pub sparsity: SparsitySpec,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub method: String,
    pub k: usize,
    pub sparsity: String,
    pub fold: usize,
    pub mean_iou: f64,
    pub avg_inputs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

/// Per-image IoU of the predictions on `query` and their arithmetic mean.
pub fn evaluate(net: &dyn Network, theta: &ModelParams, query: &[(Image, DenseMask)]) -> Result<Evaluation> {
    if query.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let images: Vec<&Image> = query.iter().map(|(i, _)| i).collect();
    let preds = predict(net, theta, &images)?;
    let per_image = preds
        .iter()
        .zip(query)
        .map(|(p, (_, truth))| jaccard(p, truth))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(Evaluation { per_image, mean })
}

/// Initial parameters available to the methods of a plan.
#[derive(Clone, Debug, Default)]
pub struct Initializations {
    pub weasel: Option<ModelParams>,
    pub pretrained: BTreeMap<TaskId, ModelParams>,
}

impl Initializations {
    fn for_method(&self, method: &Method) -> Result<Option<&ModelParams>> {
        match method {
            Method::Scratch => Ok(None),
            Method::Weasel => self
                .weasel
                .as_ref()
                .map(Some)
                .ok_or_else(|| Error::MissingCheckpoint("meta-learned initialization".into())),
            Method::Finetune(source) => self
                .pretrained
                .get(source)
                .map(Some)
                .ok_or_else(|| Error::MissingCheckpoint(format!("dense pretraining on {source}"))),
        }
    }
}

/// The fixed data of one cell: sparse support and dense query.
#[derive(Clone, Debug)]
pub struct CellData {
    pub support: Vec<(Image, SparseMask)>,
    pub query: Vec<(Image, DenseMask)>,
}

/// Fold split of the held-out task's samples.
pub fn plan_folds(plan: &ExperimentPlan, sample_count: usize) -> Result<FoldSplit> {
    make_folds(sample_count, plan.folds, seed::derive(plan.seed, &["folds"]))
}

/// Support: the first `k` samples of the fold's training partition under a
/// seeded permutation, sparsified with per-image seeds. Query: the whole
/// validation partition. Samples are expected at model resolution already,
/// so sparsification happens after resizing.
pub fn cell_data(
    plan: &ExperimentPlan,
    samples: &[TaskSample],
    folds: &FoldSplit,
    k: usize,
    sparsity: SparsitySpec,
    fold: usize,
) -> Result<CellData> {
    let mut training = folds.training(fold);
    if k > training.len() {
        return Err(Error::InvalidArgument(format!(
            "{k}-shot support exceeds the {} training samples of fold {fold}",
            training.len()
        )));
    }
    training.shuffle(&mut seed::rng_for(plan.seed, &["shots", &fold.to_string()]));
    let tag = sparsity.to_string();
    let support = training[..k]
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let mask = sparsify(&s.mask, sparsity, seed::image_seed(plan.seed, &s.key, &tag))?;
            Ok((s.image.clone(), mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let query = folds
        .validation(fold)
        .into_iter()
        .map(|i| (samples[i].image.clone(), samples[i].mask.clone()))
        .collect();
    Ok(CellData { support, query })
}

/// Seed of the tuning run of a cell. It ignores the method, so every method
/// sees the same batch order.
pub fn cell_tune_config(plan: &ExperimentPlan, tune: &TuneConfig, cell: &Cell) -> TuneConfig {
    TuneConfig {
        seed: seed::derive(
            plan.seed ^ tune.seed,
            &["tune", &cell.k.to_string(), &cell.sparsity.to_string(), &cell.fold.to_string()],
        ),
        ..tune.clone()
    }
}

/// Adapts the method's initialization to the cell's support set.
pub fn adapt_cell(
    net: &MiniUNet,
    inits: &Initializations,
    cell: &Cell,
    support: &[(Image, SparseMask)],
    tune: &TuneConfig,
) -> Result<ModelParams> {
    match inits.for_method(&cell.method)? {
        Some(theta) => finetune(net, theta, support, tune),
        None => finetune(net, &init_network_params(net, tune.seed), support, tune),
    }
}

pub fn record(plan: &ExperimentPlan, cell: &Cell, support: &[(Image, SparseMask)], mean_iou: f64) -> ResultRecord {
    let avg_inputs = support.iter().map(|(_, m)| count_inputs(m) as f64).sum::<f64>() / support.len() as f64;
    ResultRecord {
        task: plan.held_out_task.to_string(),
        method: cell.method.to_string(),
        k: cell.k,
        sparsity: cell.sparsity.to_string(),
        fold: cell.fold,
        mean_iou,
        avg_inputs,
    }
}

/// Every cell of the plan: adapt, then evaluate on the validation fold.
/// Cells run in parallel on the current thread pool; records come back in
/// plan order regardless.
pub fn run_experiment(
    plan: &ExperimentPlan,
    samples: &[TaskSample],
    inits: &Initializations,
    model_config: &ModelConfig,
    tune: &TuneConfig,
) -> Result<Vec<ResultRecord>> {
    plan.validate()?;
    let net = MiniUNet::new(model_config.clone())?;
    let folds = plan_folds(plan, samples.len())?;
    let cells = plan.cells();
    for method in &plan.methods {
        inits.for_method(method)?;
    }
    cells
        .par_iter()
        .map(|cell| {
            let data = cell_data(plan, samples, &folds, cell.k, cell.sparsity, cell.fold)?;
            let tuned = adapt_cell(&net, inits, cell, &data.support, &cell_tune_config(plan, tune, cell))?;
            let eval = evaluate(&net, &tuned, &data.query)?;
            log::info!("{} {}-shot {} fold {}: IoU {:.4}", cell.method, cell.k, cell.sparsity, cell.fold, eval.mean);
            Ok(record(plan, cell, &data.support, eval.mean))
        })
        .collect()
}

/// Fold-averaged cell of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub k: usize,
    pub sparsity: String,
    pub mean_iou: f64,
    pub avg_inputs: f64,
    pub folds: usize,
}

fn single_task(records: &[ResultRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.task != first.task) {
            return Err(Error::MixedTasks(first.task.clone(), other.task.clone()));
        }
    }
    Ok(())
}

/// Averages each (method, k, sparsity) cell over folds `0..fold_count`,
/// keeping cells in order of first appearance.
pub fn aggregate(records: &[ResultRecord], fold_count: usize) -> Result<Vec<AggregateRow>> {
    single_task(records)?;
    type Key = (String, usize, String);
    let mut groups: Vec<(Key, Vec<&ResultRecord>)> = Vec::new();
    for r in records {
        let key = (r.method.clone(), r.k, r.sparsity.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((method, k, sparsity), members)| {
            let mut folds: Vec<usize> = members.iter().map(|r| r.fold).collect();
            folds.sort_unstable();
            if folds != (0..fold_count).collect::<Vec<_>>() {
                return Err(Error::IncompleteCell(format!(
                    "{method} {k}-shot {sparsity}: folds {folds:?}, expected 0..{fold_count}"
                )));
            }
            let n = members.len() as f64;
            Ok(AggregateRow {
                mean_iou: members.iter().map(|r| r.mean_iou).sum::<f64>() / n,
                avg_inputs: members.iter().map(|r| r.avg_inputs).sum::<f64>() / n,
                folds: members.len(),
                method,
                k,
                sparsity,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub avg_inputs: f64,
    pub mean_iou: f64,
    pub sparsity: String,
    pub k: usize,
}

/// One point per (k, sparsity) cell, sorted by the average number of
/// positive inputs per image. Filter `records` to one method first.
pub fn efficiency_curve(records: &[ResultRecord]) -> Vec<EfficiencyPoint> {
    let mut cells: Vec<((usize, String), Vec<&ResultRecord>)> = Vec::new();
    for r in records {
        let key = (r.k, r.sparsity.clone());
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => cells.push((key, vec![r])),
        }
    }
    let mut points: Vec<EfficiencyPoint> = cells
        .into_iter()
        .map(|((k, sparsity), members)| {
            let n = members.len() as f64;
            EfficiencyPoint {
                avg_inputs: members.iter().map(|r| r.avg_inputs).sum::<f64>() / n,
                mean_iou: members.iter().map(|r| r.mean_iou).sum::<f64>() / n,
                sparsity,
                k,
            }
        })
        .collect();
    points.sort_by(|a, b| a.avg_inputs.total_cmp(&b.avg_inputs));
    points
}
