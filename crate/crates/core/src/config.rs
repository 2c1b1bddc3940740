//! The experiment document that drives every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::TuneConfig;
use crate::error::{Error, Result};
use crate::evaluator::{ExperimentPlan, Method};
use crate::meta_trainer::MetaConfig;
use crate::model::ModelConfig;
use crate::seed;
use crate::sparsifier::SparsitySpec;
use crate::task_store::{SynthSpec, TaskId, TaskSplit};

/// Where datasets come from: directories in the ingestion layout, or the
/// synthetic generator (written under `<output_dir>/data`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub datasets: Vec<PathBuf>,
    pub synth: Option<SynthSpec>,
}

/// How datasets are cut into meta-training tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTasksConfig {
    pub query_fraction: f64,
    /// Support annotation used during meta-training; defaults to the plan's
    /// sparsity list.
    pub support_sparsity: Option<Vec<SparsitySpec>>,
}

impl Default for MetaTasksConfig {
    fn default() -> Self {
        Self {
            query_fraction: 0.2,
            support_sparsity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub held_out_task: String,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "ExperimentPlan::default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "ExperimentPlan::default_sparsity")]
    pub sparsity: Vec<SparsitySpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Weasel, Method::Scratch]
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub meta_tasks: MetaTasksConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    /// Dense training of the sources of `finetune:` methods.
    #[serde(default)]
    pub pretrain: TuneConfig,
    pub plan: PlanConfig,
}

fn default_jobs() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file. Relative dataset and output paths
    /// are taken relative to the current directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.datasets.is_empty() && self.data.synth.is_none() {
            return Err(Error::Config("data needs `datasets` paths or a `synth` section".into()));
        }
        if let Some(spec) = &self.data.synth {
            spec.validate()?;
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.model.validate()?;
        self.meta.validate()?;
        self.tune.validate()?;
        self.pretrain.validate()?;
        if !(self.meta_tasks.query_fraction > 0.0 && self.meta_tasks.query_fraction < 1.0) {
            return Err(Error::Config("meta_tasks.query_fraction must lie in (0, 1)".into()));
        }
        if let Some(s) = &self.meta_tasks.support_sparsity {
            if s.is_empty() {
                return Err(Error::Config("meta_tasks.support_sparsity must not be empty".into()));
            }
        }
        self.plan()?.validate()
    }

    pub fn held_out(&self) -> Result<TaskId> {
        TaskId::parse(&self.plan.held_out_task).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        Ok(ExperimentPlan {
            held_out_task: self.held_out()?,
            methods: self.plan.methods.clone(),
            shots: self.plan.shots.clone(),
            sparsity: self.plan.sparsity.clone(),
            folds: self.plan.folds,
            seed: seed::derive(self.seed, &["plan"]),
        })
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            seed: seed::derive(self.seed, &["meta"]),
            ..self.meta.clone()
        }
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            seed: seed::derive(self.seed, &["tune"]),
            ..self.tune.clone()
        }
    }

    pub fn pretrain_config(&self) -> TuneConfig {
        TuneConfig {
            seed: seed::derive(self.seed, &["pretrain"]),
            ..self.pretrain.clone()
        }
    }

    pub fn task_split(&self) -> TaskSplit {
        TaskSplit {
            query_fraction: self.meta_tasks.query_fraction,
            side: self.model.input_side,
            support_sparsity: self
                .meta_tasks
                .support_sparsity
                .clone()
                .unwrap_or_else(|| self.plan.sparsity.clone()),
        }
    }

    pub fn synth_seed(&self) -> u64 {
        seed::derive(self.seed, &["synth"])
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, &["meta-tasks"])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[data.synth]
images_per_dataset = 10

[plan]
held_out_task = "gradient/organ"
"#;

    #[test]
    fn minimal_document_uses_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.plan.folds, 5);
        assert_eq!(c.plan.shots, vec![1, 5, 10, 20]);
        assert_eq!(c.plan.sparsity.len(), 9);
        assert_eq!(c.task_split().support_sparsity, c.plan.sparsity);
        assert_eq!(c.data.synth.as_ref().unwrap().modalities.len(), 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("[plan]", "[plan]\nshotz = [1]");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("shotz"), "{err}");
        let nested = MINIMAL.replace("[data.synth]", "[data.synth]\nnoize = 0.1");
        assert!(ExperimentConfig::from_toml_str(&nested).unwrap_err().to_string().contains("noize"));
    }

    #[test]
    fn seeds_are_not_configurable_per_stage() {
        let text = format!("{MINIMAL}\n[meta]\nseed = 3\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad_side = format!("{MINIMAL}\n[model]\ninput_side = 12\n");
        let err = ExperimentConfig::from_toml_str(&bad_side).unwrap_err();
        assert!(err.to_string().contains("input_side"), "{err}");
        let bad_task = MINIMAL.replace("gradient/organ", "organ");
        assert!(ExperimentConfig::from_toml_str(&bad_task).is_err());
        let bad_sparsity = MINIMAL.replace("[plan]", "[plan]\nsparsity = [\"grid:1\"]");
        assert!(ExperimentConfig::from_toml_str(&bad_sparsity).is_err());
        let no_data = "output_dir = \"o\"\n[plan]\nheld_out_task = \"a/b\"\n";
        assert!(ExperimentConfig::from_toml_str(no_data).is_err());
    }
}
