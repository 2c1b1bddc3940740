use sparseseg::meta_trainer::{meta_train, MetaConfig};
use sparseseg::model::ModelConfig;
use sparseseg::optim::OptimizerKind;
use sparseseg::task_store::{synth_generate, tasks_from_datasets, MetaDataset, SynthSpec, TaskSplit};

fn two_task_meta(seed: u64) -> MetaDataset {
    let spec = SynthSpec {
        images_per_dataset: 12,
        side: 32,
        ..SynthSpec::default()
    };
    let mut datasets = synth_generate(&spec, seed).unwrap();
    datasets.truncate(1);
    let split = TaskSplit {
        side: 32,
        ..TaskSplit::default()
    };
    let tasks = tasks_from_datasets(&datasets, &split, seed).unwrap();
    assert_eq!(tasks.len(), 2);
    MetaDataset::uniform(tasks, None).unwrap()
}

#[test]
fn query_loss_falls_over_training() {
    let model = ModelConfig {
        encoder_channels: [4, 8, 16],
        center_channels: 16,
        input_side: 32,
        ..ModelConfig::default()
    };
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let config = MetaConfig {
            outer_optimizer: OptimizerKind::Adam,
            meta_iterations: 200,
            seed,
            ..MetaConfig::default()
        };
        let out = meta_train(&two_task_meta(seed), &model, &config).unwrap();
        assert_eq!(out.log.len(), 200);
        first += out.log[0].mean_query_loss / 3.0;
        last += out.log[199].mean_query_loss / 3.0;
    }
    assert!(last < first, "iteration 1: {first}, iteration 200: {last}");
}
