//! Episodic meta-training: a gradient step on the sparse support loss
//! produces adapted parameters, and the dense query loss at those parameters
//! is differentiated with respect to the original ones.

use std::path::Path;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{network_input, init_network_params, MiniUNet, ModelConfig, ModelParams, Network};
use crate::objective::{masked_cross_entropy, ClassWeighting};
use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;
use crate::sparsifier::{densify_passthrough, sparsify, SparseMask, SparsitySpec};
use crate::task_store::{DenseMask, Image, MetaDataset, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer step size.
    pub beta: f64,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub support_batch: usize,
    pub query_batch: usize,
    pub meta_iterations: usize,
    pub second_order: bool,
    /// Filled from the experiment seed when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub outer_optimizer: OptimizerKind,
    pub class_weighting: ClassWeighting,
    /// Rescale the meta-gradient when its global norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Draw fresh support samples every iteration; otherwise each task keeps
    /// one fixed support subset with fixed sparse labels.
    pub resample_support: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            inner_steps: 1,
            task_batch: 4,
            support_batch: 2,
            query_batch: 2,
            meta_iterations: 200,
            second_order: true,
            seed: 0,
            outer_optimizer: OptimizerKind::Sgd,
            class_weighting: ClassWeighting::None,
            grad_clip: None,
            resample_support: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        if self.inner_steps == 0 || self.task_batch == 0 || self.support_batch == 0 || self.query_batch == 0 {
            return Err(Error::Config(
                "inner_steps, task_batch, support_batch and query_batch must be at least 1".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        Ok(())
    }
}

/// One sampled task instance. Support labels are simulated with
/// `support_spec`; query labels are the dense ground truth.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task_id: TaskId,
    pub support_spec: SparsitySpec,
    pub support: Vec<(Image, SparseMask)>,
    pub query: Vec<(Image, DenseMask)>,
}

/// A pair of losses whose composition is meta-learned.
pub trait MetaObjective: Sync {
    fn support_loss<'g>(&self, params: &[Var<'g>]) -> Result<Var<'g>>;
    fn query_loss<'g>(&self, params: &[Var<'g>]) -> Result<Var<'g>>;
}

/// Segmentation losses of one episode: sparse selective cross-entropy on the
/// support batch, dense cross-entropy on the query batch.
pub struct BatchObjective<'a> {
    pub net: &'a dyn Network,
    pub support_x: Tensor,
    pub support_y: Vec<SparseMask>,
    pub query_x: Tensor,
    pub query_y: Vec<SparseMask>,
    pub weighting: ClassWeighting,
}

impl<'a> BatchObjective<'a> {
    pub fn from_episode(net: &'a dyn Network, episode: &Episode, weighting: ClassWeighting) -> Result<Self> {
        if let Some((_, m)) = episode.support.iter().find(|(_, m)| m.origin() != episode.support_spec) {
            return Err(Error::InvalidArgument(format!(
                "support label of {} came from {} instead of {}",
                episode.task_id,
                m.origin(),
                episode.support_spec
            )));
        }
        let support_images: Vec<&Image> = episode.support.iter().map(|(i, _)| i).collect();
        let query_images: Vec<&Image> = episode.query.iter().map(|(i, _)| i).collect();
        Ok(Self {
            net,
            support_x: network_input(net, &support_images)?,
            support_y: episode.support.iter().map(|(_, m)| m.clone()).collect(),
            query_x: network_input(net, &query_images)?,
            query_y: episode.query.iter().map(|(_, m)| densify_passthrough(m)).collect(),
            weighting,
        })
    }

    fn loss<'g>(&self, params: &[Var<'g>], x: &Tensor, y: &[SparseMask]) -> Result<Var<'g>> {
        let graph = params[0].graph();
        let scores = self.net.forward(params, graph.constant(x.clone()));
        let targets: Vec<&SparseMask> = y.iter().collect();
        Ok(masked_cross_entropy(scores, &targets, self.weighting)?.0)
    }
}

impl MetaObjective for BatchObjective<'_> {
    fn support_loss<'g>(&self, params: &[Var<'g>]) -> Result<Var<'g>> {
        self.loss(params, &self.support_x, &self.support_y)
    }

    fn query_loss<'g>(&self, params: &[Var<'g>]) -> Result<Var<'g>> {
        self.loss(params, &self.query_x, &self.query_y)
    }
}

fn check_finite(v: &Var<'_>, what: &'static str, context: &str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            context: context.to_string(),
        })
    }
}

/// `inner_steps` gradient steps on the support loss, as graph values. With
/// `create_graph` the result stays differentiable through the gradients;
/// otherwise the gradients are constants.
pub fn adapted_vars<'g>(
    objective: &dyn MetaObjective,
    params: &[Var<'g>],
    alpha: f64,
    inner_steps: usize,
    create_graph: bool,
) -> Result<Vec<Var<'g>>> {
    let mut current = params.to_vec();
    if alpha == 0.0 {
        return Ok(current);
    }
    let graph = params
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parameters".into()))?
        .graph();
    for _ in 0..inner_steps {
        let loss = objective.support_loss(&current)?;
        check_finite(&loss, "support loss", "inner adaptation")?;
        let grads = graph.grad(loss, &current, create_graph);
        if let Some(g) = grads.iter().find(|g| !g.value().is_finite()) {
            check_finite(g, "support gradient", "inner adaptation")?;
        }
        current = current.iter().zip(&grads).map(|(&p, g)| p - g.scale(alpha)).collect();
    }
    Ok(current)
}

/// Adapted parameters `θ_i` as plain values.
pub fn inner_adapt_objective(
    objective: &dyn MetaObjective,
    theta: &ModelParams,
    alpha: f64,
    inner_steps: usize,
) -> Result<ModelParams> {
    let graph = Graph::new();
    let vars = theta.bind(&graph);
    let adapted = adapted_vars(objective, &vars, alpha, inner_steps, false)?;
    ModelParams::new(
        theta.names().to_vec(),
        adapted.iter().map(|v| Tensor::clone(&v.value())).collect(),
    )
}

pub fn inner_adapt(
    net: &dyn Network,
    theta: &ModelParams,
    episode: &Episode,
    alpha: f64,
    inner_steps: usize,
    weighting: ClassWeighting,
) -> Result<ModelParams> {
    let objective = BatchObjective::from_episode(net, episode, weighting)?;
    inner_adapt_objective(&objective, theta, alpha, inner_steps)
}

/// Query loss at the adapted parameters and its gradient with respect to
/// the original parameters, for one objective.
pub fn episode_meta_gradient(
    objective: &dyn MetaObjective,
    theta: &ModelParams,
    alpha: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let graph = Graph::new();
    let vars = theta.bind(&graph);
    let adapted = adapted_vars(objective, &vars, alpha, inner_steps, second_order)?;
    let loss = objective.query_loss(&adapted)?;
    check_finite(&loss, "query loss", "outer step")?;
    let grads = graph.grad(loss, &vars, false);
    let loss = loss.value().item();
    Ok((loss, grads.iter().map(|g| Tensor::clone(&g.value())).collect()))
}

/// Gradient of the summed query losses. Episodes may be processed in
/// parallel; the sum is always taken in episode order.
pub fn meta_gradient(
    objectives: &[&dyn MetaObjective],
    theta: &ModelParams,
    alpha: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if objectives.is_empty() {
        return Err(Error::InvalidArgument("meta-gradient needs at least one episode".into()));
    }
    let per_episode = objectives
        .par_iter()
        .map(|o| episode_meta_gradient(*o, theta, alpha, inner_steps, second_order))
        .collect::<Result<Vec<_>>>()?;
    let mut total: Vec<Tensor> = theta.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut losses = Vec::with_capacity(per_episode.len());
    for (loss, grads) in per_episode {
        losses.push(loss);
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.axpy(1.0, g);
        }
    }
    if !total.iter().all(Tensor::is_finite) {
        return Err(Error::NonFinite {
            what: "meta-gradient",
            context: "outer step".into(),
        });
    }
    Ok((losses, total))
}

/// One meta-update. Returns the query losses of the episodes, measured
/// before the update.
pub fn outer_step(
    theta: &mut ModelParams,
    objectives: &[&dyn MetaObjective],
    config: &MetaConfig,
    optimizer: &mut Optimizer,
) -> Result<Vec<f64>> {
    let (losses, mut grads) = meta_gradient(objectives, theta, config.alpha, config.inner_steps, config.second_order)?;
    if let Some(limit) = config.grad_clip {
        let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
        if norm > limit {
            grads = grads.iter().map(|g| g.scale(limit / norm)).collect();
        }
    }
    optimizer.step(theta, &grads);
    Ok(losses)
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    index::sample(rng, len, amount.min(len)).into_vec()
}

/// Draws `task_batch` episodes. Support labels are re-simulated for every
/// episode from a spec chosen uniformly among the task's support sparsities.
pub fn sample_task_batch(meta: &MetaDataset, config: &MetaConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Episode>> {
    if meta.is_empty() {
        return Err(Error::EmptyMetaDataset);
    }
    let tasks = WeightedIndex::new(&meta.sampling_weights)
        .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
    let mut episodes = Vec::with_capacity(config.task_batch);
    for _ in 0..config.task_batch {
        let task = &meta.tasks[tasks.sample(rng)];
        let (support_idx, spec, label_seed) = if config.resample_support {
            let spec = task.support_sparsity[rng.random_range(0..task.support_sparsity.len())];
            (sample_indices(rng, task.support.len(), config.support_batch), spec, rng.random())
        } else {
            let task_name = task.id.to_string();
            let mut fixed = seed::rng_for(config.seed, &["fixed-support", &task_name]);
            let spec = task.support_sparsity[fixed.random_range(0..task.support_sparsity.len())];
            (sample_indices(&mut fixed, task.support.len(), config.support_batch), spec, config.seed)
        };
        let support = support_idx
            .iter()
            .map(|&i| {
                let s = &task.support[i];
                let mask = sparsify(&s.mask, spec, seed::image_seed(label_seed, &s.key, &spec.to_string()))?;
                Ok((s.image.clone(), mask))
            })
            .collect::<Result<Vec<_>>>()?;
        let query = sample_indices(rng, task.query.len(), config.query_batch)
            .into_iter()
            .map(|i| (task.query[i].image.clone(), task.query[i].mask.clone()))
            .collect();
        episodes.push(Episode {
            task_id: task.id.clone(),
            support_spec: spec,
            support,
            query,
        });
    }
    Ok(episodes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_query_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutput {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
}

/// Seed of the initial parameters of a meta-training run.
pub fn init_seed(config: &MetaConfig) -> u64 {
    seed::derive(config.seed, &["init"])
}

pub fn meta_train(meta: &MetaDataset, model_config: &ModelConfig, config: &MetaConfig) -> Result<MetaTrainOutput> {
    meta_train_with(meta, model_config, config, |_, _| Ok(()))
}

/// Runs `meta_iterations` outer steps from a seeded initialization.
/// `on_iteration` sees every log row with the parameters after that step.
pub fn meta_train_with(
    meta: &MetaDataset,
    model_config: &ModelConfig,
    config: &MetaConfig,
    mut on_iteration: impl FnMut(&LogRow, &ModelParams) -> Result<()>,
) -> Result<MetaTrainOutput> {
    config.validate()?;
    let net = MiniUNet::new(model_config.clone())?;
    let mut theta = init_network_params(&net, init_seed(config));
    let mut optimizer = Optimizer::new(config.outer_optimizer, config.beta, &theta);
    let mut rng = seed::rng_for(config.seed, &["episodes"]);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.meta_iterations);
    for iteration in 1..=config.meta_iterations {
        let episodes = sample_task_batch(meta, config, &mut rng)?;
        let objectives = episodes
            .iter()
            .map(|e| BatchObjective::from_episode(&net, e, config.class_weighting))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&dyn MetaObjective> = objectives.iter().map(|o| o as &dyn MetaObjective).collect();
        let losses = outer_step(&mut theta, &refs, config, &mut optimizer).map_err(|e| match e {
            Error::NonFinite { what, context } => Error::NonFinite {
                what,
                context: format!("{context} at meta-iteration {iteration}"),
            },
            other => other,
        })?;
        let row = LogRow {
            iteration,
            mean_query_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::debug!("meta-iteration {iteration}: query loss {:.4}", row.mean_query_loss);
        on_iteration(&row, &theta)?;
        log.push(row);
    }
    Ok(MetaTrainOutput { params: theta, log })
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    writer.write_record(["iteration", "mean_query_loss", "wall_time_s"])?;
    for row in log {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
