use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::sparsifier::SparsitySpec;

use super::resize::resize_pair;
use super::types::{Dataset, DenseMask, TaskId, TaskSample};

/// One binary segmentation task. Support samples keep their dense masks;
/// sparse labels are simulated from them on demand using `support_sparsity`.
#[derive(Clone, Debug)]
pub struct SegTask {
    pub id: TaskId,
    pub support: Vec<TaskSample>,
    pub query: Vec<TaskSample>,
    pub support_sparsity: Vec<SparsitySpec>,
}

impl SegTask {
    pub fn new(
        id: TaskId,
        support: Vec<TaskSample>,
        query: Vec<TaskSample>,
        support_sparsity: Vec<SparsitySpec>,
    ) -> Result<Self> {
        if support.is_empty() || query.is_empty() {
            return Err(Error::MalformedDataset(format!("task {id} needs support and query samples")));
        }
        if support_sparsity.is_empty() {
            return Err(Error::InvalidArgument(format!("task {id} has no support sparsity")));
        }
        if let Some(s) = support.iter().find(|s| query.iter().any(|q| q.key == s.key)) {
            return Err(Error::MalformedDataset(format!(
                "task {id}: sample {} appears in both support and query",
                s.key
            )));
        }
        Ok(Self {
            id,
            support,
            query,
            support_sparsity,
        })
    }
}

/// Tasks available for meta-training together with their sampling
/// distribution.
#[derive(Clone, Debug)]
pub struct MetaDataset {
    pub tasks: Vec<SegTask>,
    pub sampling_weights: Vec<f64>,
    pub held_out_id: Option<TaskId>,
}

impl MetaDataset {
    /// Uniform weights over `tasks`.
    pub fn uniform(tasks: Vec<SegTask>, held_out_id: Option<TaskId>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptyMetaDataset);
        }
        let w = 1.0 / tasks.len() as f64;
        Ok(Self {
            sampling_weights: vec![w; tasks.len()],
            tasks,
            held_out_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Removes every task whose (dataset, class) pair equals `held_out`.
pub fn build_meta_dataset(all_tasks: Vec<SegTask>, held_out: &TaskId) -> Result<MetaDataset> {
    if !all_tasks.iter().any(|t| &t.id == held_out) {
        return Err(Error::UnknownTask(held_out.to_string()));
    }
    let tasks = all_tasks.into_iter().filter(|t| &t.id != held_out).collect();
    MetaDataset::uniform(tasks, Some(held_out.clone()))
}

/// Foreground-vs-rest masks for `foreground`.
pub fn binarize(dataset: &Dataset, foreground: &str) -> Result<Vec<TaskSample>> {
    let label = dataset.class_label(foreground)?;
    if label == 0 {
        return Err(Error::UnknownClass(format!(
            "{foreground} is the background of {}",
            dataset.name
        )));
    }
    Ok(dataset
        .samples
        .iter()
        .map(|s| {
            let (h, w) = s.labels.dims();
            let mask = s.labels.labels().iter().map(|&l| u8::from(l == label)).collect();
            TaskSample {
                key: format!("{}/{}", dataset.name, s.id),
                image: s.image.clone(),
                mask: DenseMask::new(h, w, mask).expect("binary by construction"),
            }
        })
        .collect())
}

/// How meta-training tasks are cut out of datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSplit {
    /// Fraction of each dataset reserved for the dense query pool.
    pub query_fraction: f64,
    pub side: usize,
    pub support_sparsity: Vec<SparsitySpec>,
}

impl Default for TaskSplit {
    fn default() -> Self {
        Self {
            query_fraction: 0.2,
            side: 128,
            support_sparsity: vec![SparsitySpec::Points(5)],
        }
    }
}

/// One task per (dataset, foreground class). Samples are resized to
/// `split.side` and split into disjoint support and query pools by a seeded
/// permutation shared by all classes of a dataset.
pub fn tasks_from_datasets(datasets: &[Dataset], split: &TaskSplit, seed: u64) -> Result<Vec<SegTask>> {
    if !(split.query_fraction > 0.0 && split.query_fraction < 1.0) {
        return Err(Error::Config(format!(
            "query_fraction {} must lie strictly between 0 and 1",
            split.query_fraction
        )));
    }
    let mut tasks = Vec::new();
    for dataset in datasets {
        if dataset.len() < 2 {
            return Err(Error::MalformedDataset(format!(
                "dataset {} needs at least two samples to form a task",
                dataset.name
            )));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seed::rng_for(seed, &["task-split", &dataset.name]));
        let n_query = ((dataset.len() as f64 * split.query_fraction).round() as usize).clamp(1, dataset.len() - 1);
        for class in dataset.foreground_classes() {
            let samples = binarize(dataset, class)?
                .into_iter()
                .map(|s| {
                    let (image, mask) = resize_pair(&s.image, &s.mask, split.side)?;
                    Ok(TaskSample { key: s.key, image, mask })
                })
                .collect::<Result<Vec<_>>>()?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
            tasks.push(SegTask::new(
                TaskId::new(&dataset.name, class),
                pick(&order[n_query..]),
                pick(&order[..n_query]),
                split.support_sparsity.clone(),
            )?);
        }
    }
    Ok(tasks)
}
