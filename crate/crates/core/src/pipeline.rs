//! The stages behind each command: generate data, meta-train, adapt,
//! evaluate, sweep and report. Every stage reads an [`ExperimentConfig`] and
//! works inside its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::pretrain_dense;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluator::{
    adapt_cell, cell_data, cell_tune_config, evaluate, plan_folds, record, run_experiment, Cell, Initializations,
    Method, ResultRecord,
};
use crate::meta_trainer::{init_seed, meta_train_with, write_log};
use crate::model::{Checkpoint, MiniUNet};
use crate::report::{read_csv, write_csv, write_report, ReportFiles};
use crate::task_store::{
    binarize, build_meta_dataset, load_dataset, resize_pair, synth_generate, tasks_from_datasets, write_dataset,
    Dataset, SegTask, SynthSpec, TaskId, TaskSample,
};

pub const MANIFEST: &str = "manifest.json";
pub const WEASEL_CHECKPOINT: &str = "weasel.ckpt";
pub const META_LOG: &str = "meta_train_log.csv";
pub const RESULTS: &str = "results.csv";

fn data_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("data")
}

pub fn checkpoint_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("checkpoints")
}

pub fn adapted_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("adapted")
}

pub fn report_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("report")
}

fn file_safe(s: &str) -> String {
    s.replace(['/', ':'], "-")
}

pub fn pretrain_checkpoint_name(source: &TaskId) -> String {
    format!("pretrain_{}.ckpt", file_safe(&source.to_string()))
}

/// `<task>_<method>_<k>shot_<sparsity>_<fold>.ckpt`, with `/` and `:`
/// replaced by `-`.
pub fn adapted_checkpoint_name(task: &TaskId, cell: &Cell) -> String {
    format!(
        "{}_{}_{}shot_{}_{}.ckpt",
        file_safe(&task.to_string()),
        file_safe(&cell.method.to_string()),
        cell.k,
        file_safe(&cell.sparsity.to_string()),
        cell.fold
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub samples: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment_seed: u64,
    pub synth_seed: u64,
    pub spec: SynthSpec,
    pub datasets: Vec<ManifestEntry>,
}

/// Writes the synthetic datasets and a manifest under `<output_dir>/data`.
pub fn synth(config: &ExperimentConfig) -> Result<Manifest> {
    let spec = config
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("the synth command needs a [data.synth] section".into()))?;
    let datasets = synth_generate(spec, config.synth_seed())?;
    let dir = data_dir(config);
    for d in &datasets {
        write_dataset(d, &dir.join(&d.name))?;
    }
    let manifest = Manifest {
        experiment_seed: config.seed,
        synth_seed: config.synth_seed(),
        spec: spec.clone(),
        datasets: datasets
            .iter()
            .map(|d| ManifestEntry {
                name: d.name.clone(),
                samples: d.len(),
                class_names: d.class_names.clone(),
            })
            .collect(),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("wrote {} datasets to {}", datasets.len(), dir.display());
    Ok(manifest)
}

/// Configured dataset directories, or the synthetic ones listed in the
/// manifest.
pub fn load_datasets(config: &ExperimentConfig) -> Result<Vec<Dataset>> {
    if !config.data.datasets.is_empty() {
        return config.data.datasets.iter().map(|p| load_dataset(p)).collect();
    }
    let dir = data_dir(config);
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::DatasetNotFound(dir));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    manifest.datasets.iter().map(|e| load_dataset(&dir.join(&e.name))).collect()
}

/// All (dataset, class) tasks at model resolution.
pub fn all_tasks(config: &ExperimentConfig, datasets: &[Dataset]) -> Result<Vec<SegTask>> {
    tasks_from_datasets(datasets, &config.task_split(), config.split_seed())
}

/// Every sample of the held-out task, binarized and resized.
pub fn held_out_samples(config: &ExperimentConfig, datasets: &[Dataset]) -> Result<Vec<TaskSample>> {
    let id = config.held_out()?;
    let dataset = datasets
        .iter()
        .find(|d| d.name == id.dataset)
        .ok_or_else(|| Error::UnknownTask(id.to_string()))?;
    binarize(dataset, &id.class)
        .map_err(|_| Error::UnknownTask(id.to_string()))?
        .into_iter()
        .map(|s| {
            let (image, mask) = resize_pair(&s.image, &s.mask, config.model.input_side)?;
            Ok(TaskSample { key: s.key, image, mask })
        })
        .collect()
}

fn finetune_sources(config: &ExperimentConfig) -> Vec<TaskId> {
    config
        .plan
        .methods
        .iter()
        .filter_map(|m| match m {
            Method::Finetune(source) => Some(source.clone()),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MetaTrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub pretrained: Vec<PathBuf>,
    pub final_query_loss: Option<f64>,
}

/// Meta-trains on every task except the held-out one, then pretrains the
/// dense source models required by `finetune:` methods.
pub fn meta_train(config: &ExperimentConfig) -> Result<MetaTrainSummary> {
    let datasets = load_datasets(config)?;
    let tasks = all_tasks(config, &datasets)?;
    let held_out = config.held_out()?;
    let meta = build_meta_dataset(tasks.clone(), &held_out)?;
    let meta_config = config.meta_config();
    log::info!(
        "meta-training on {} tasks for {} iterations",
        meta.len(),
        meta_config.meta_iterations
    );
    let out = meta_train_with(&meta, &config.model, &meta_config, |row, _| {
        if row.iteration % 10 == 0 {
            log::info!("iteration {}: query loss {:.4}", row.iteration, row.mean_query_loss);
        }
        Ok(())
    })?;
    let dir = checkpoint_dir(config);
    let checkpoint = dir.join(WEASEL_CHECKPOINT);
    Checkpoint::new(config.model.clone(), out.params)?
        .with("kind", "meta-learned")
        .with("experiment_seed", config.seed)
        .with("init_seed", init_seed(&meta_config))
        .with("held_out_task", &held_out)
        .with("meta_iterations", meta_config.meta_iterations)
        .save(&checkpoint)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let log_path = config.output_dir.join(META_LOG);
    write_log(&log_path, &out.log)?;

    let mut pretrained = Vec::new();
    for source in finetune_sources(config) {
        if source == held_out {
            return Err(Error::Config(format!("finetune source {source} is the held-out task")));
        }
        let task = tasks
            .iter()
            .find(|t| t.id == source)
            .ok_or_else(|| Error::UnknownTask(source.to_string()))?;
        log::info!("dense pretraining on {source}");
        let params = pretrain_dense(task, &config.model, &config.pretrain_config())?;
        let path = dir.join(pretrain_checkpoint_name(&source));
        Checkpoint::new(config.model.clone(), params)?
            .with("kind", "dense-pretrained")
            .with("experiment_seed", config.seed)
            .with("source_task", &source)
            .save(&path)?;
        pretrained.push(path);
    }
    Ok(MetaTrainSummary {
        checkpoint,
        log: log_path,
        pretrained,
        final_query_loss: out.log.last().map(|r| r.mean_query_loss),
    })
}

fn load_matching(config: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config != config.model {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// Loads the checkpoints that the plan's methods start from.
pub fn load_initializations(config: &ExperimentConfig) -> Result<Initializations> {
    let dir = checkpoint_dir(config);
    let mut inits = Initializations::default();
    if config.plan.methods.contains(&Method::Weasel) {
        inits.weasel = Some(load_matching(config, &dir.join(WEASEL_CHECKPOINT))?.params);
    }
    let mut pretrained = BTreeMap::new();
    for source in finetune_sources(config) {
        let ckpt = load_matching(config, &dir.join(pretrain_checkpoint_name(&source)))?;
        pretrained.insert(source, ckpt.params);
    }
    inits.pretrained = pretrained;
    Ok(inits)
}

/// Adapts every cell of the plan and saves the tuned parameters.
pub fn adapt(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let datasets = load_datasets(config)?;
    let samples = held_out_samples(config, &datasets)?;
    let inits = load_initializations(config)?;
    let plan = config.plan()?;
    let net = MiniUNet::new(config.model.clone())?;
    let folds = plan_folds(&plan, samples.len())?;
    let tune = config.tune_config();
    let dir = adapted_dir(config);
    plan.cells()
        .par_iter()
        .map(|cell| {
            let data = cell_data(&plan, &samples, &folds, cell.k, cell.sparsity, cell.fold)?;
            let params = adapt_cell(&net, &inits, cell, &data.support, &cell_tune_config(&plan, &tune, cell))?;
            let path = dir.join(adapted_checkpoint_name(&plan.held_out_task, cell));
            Checkpoint::new(config.model.clone(), params)?
                .with("method", &cell.method)
                .with("k", cell.k)
                .with("sparsity", cell.sparsity)
                .with("fold", cell.fold)
                .with("experiment_seed", config.seed)
                .save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Evaluates the adapted checkpoints on their validation folds and writes
/// the results table.
pub fn eval(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    let datasets = load_datasets(config)?;
    let samples = held_out_samples(config, &datasets)?;
    let plan = config.plan()?;
    let net = MiniUNet::new(config.model.clone())?;
    let folds = plan_folds(&plan, samples.len())?;
    let dir = adapted_dir(config);
    let records = plan
        .cells()
        .par_iter()
        .map(|cell| {
            let data = cell_data(&plan, &samples, &folds, cell.k, cell.sparsity, cell.fold)?;
            let ckpt = load_matching(config, &dir.join(adapted_checkpoint_name(&plan.held_out_task, cell)))?;
            let eval = evaluate(&net, &ckpt.params, &data.query)?;
            Ok(record(&plan, cell, &data.support, eval.mean))
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&config.output_dir.join(RESULTS), &records)?;
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub records: Vec<ResultRecord>,
    pub results: PathBuf,
    pub report: ReportFiles,
}

/// Adapts and evaluates every cell in memory, then writes the results table,
/// aggregated tables and figures.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepSummary> {
    let datasets = load_datasets(config)?;
    let samples = held_out_samples(config, &datasets)?;
    let inits = load_initializations(config)?;
    let plan = config.plan()?;
    let records = run_experiment(&plan, &samples, &inits, &config.model, &config.tune_config())?;
    let results = config.output_dir.join(RESULTS);
    write_csv(&results, &records)?;
    let report = write_report(&report_dir(config), &records, plan.folds)?;
    Ok(SweepSummary {
        records,
        results,
        report,
    })
}

/// Rebuilds tables and figures from an existing results file.
pub fn report(config: &ExperimentConfig) -> Result<ReportFiles> {
    let path = config.output_dir.join(RESULTS);
    if !path.is_file() {
        return Err(Error::DatasetNotFound(path));
    }
    let records: Vec<ResultRecord> = read_csv(&path)?;
    write_report(&report_dir(config), &records, config.plan.folds)
}
