//! Supervised tuning on a few-shot support set, and the two baselines:
//! training from a random initialization and dense pretraining on a source
//! task.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_graph, init_network_params, MiniUNet, ModelConfig, ModelParams, Network};
use crate::objective::{masked_cross_entropy, ClassWeighting};
use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;
use crate::sparsifier::{densify_passthrough, SparseMask};
use crate::task_store::{Image, SegTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Filled from the experiment seed when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub class_weighting: ClassWeighting,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 5,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            class_weighting: ClassWeighting::None,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pooled selective cross-entropy of `params` over `support`.
pub fn support_loss(net: &dyn Network, params: &ModelParams, support: &[(Image, SparseMask)]) -> Result<f64> {
    let graph = Graph::new();
    graph.no_grad(|| {
        let vars = params.bind(&graph);
        let images: Vec<&Image> = support.iter().map(|(i, _)| i).collect();
        let targets: Vec<&SparseMask> = support.iter().map(|(_, m)| m).collect();
        let scores = forward_graph(net, &vars, &images)?;
        Ok(masked_cross_entropy(scores, &targets, ClassWeighting::None)?.0.value().item())
    })
}

/// Mini-batch training of every parameter on the sparse support labels.
/// Batch order is shuffled each epoch from `config.seed`.
pub fn finetune(
    net: &dyn Network,
    theta: &ModelParams,
    support: &[(Image, SparseMask)],
    config: &TuneConfig,
) -> Result<ModelParams> {
    config.validate()?;
    if support.is_empty() {
        return Err(Error::InvalidArgument("finetune needs a nonempty support set".into()));
    }
    let mut params = theta.clone();
    if config.epochs == 0 || config.learning_rate == 0.0 {
        return Ok(params);
    }
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut rng = seed::rng_for(config.seed, &["finetune"]);
    let mut order: Vec<usize> = (0..support.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&Image> = batch.iter().map(|&i| &support[i].0).collect();
            let targets: Vec<&SparseMask> = batch.iter().map(|&i| &support[i].1).collect();
            let graph = Graph::new();
            let vars = params.bind(&graph);
            let scores = forward_graph(net, &vars, &images)?;
            let (loss, _) = masked_cross_entropy(scores, &targets, config.class_weighting)?;
            if !loss.value().is_finite() {
                return Err(Error::NonFinite {
                    what: "support loss",
                    context: format!("fine-tuning epoch {epoch}"),
                });
            }
            let grads: Vec<Tensor> = graph
                .grad(loss, &vars, false)
                .iter()
                .map(|g| Tensor::clone(&g.value()))
                .collect();
            optimizer.step(&mut params, &grads);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            what: "parameters",
            context: "fine-tuning".into(),
        });
    }
    Ok(params)
}

/// `finetune` from `init_params(model_config, config.seed)`.
pub fn train_from_scratch(
    support: &[(Image, SparseMask)],
    model_config: &ModelConfig,
    config: &TuneConfig,
) -> Result<ModelParams> {
    let net = MiniUNet::new(model_config.clone())?;
    finetune(&net, &init_network_params(&net, config.seed), support, config)
}

/// Dense supervised training on the source task's training pool, from a
/// random initialization.
pub fn pretrain_dense(source: &SegTask, model_config: &ModelConfig, config: &TuneConfig) -> Result<ModelParams> {
    let support: Vec<(Image, SparseMask)> = source
        .support
        .iter()
        .map(|s| (s.image.clone(), densify_passthrough(&s.mask)))
        .collect();
    train_from_scratch(&support, model_config, config)
}
