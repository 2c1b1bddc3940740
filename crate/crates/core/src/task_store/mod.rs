//! Datasets, binarization, folds, resizing, synthetic data and
//! leave-one-task-out meta-dataset assembly.

mod folds;
mod ingest;
mod meta;
mod resize;
mod synth;
mod types;

pub use folds::{make_folds, FoldSplit};
pub use ingest::{ingest_dataset, load_dataset, read_class_map, write_dataset, ClassMap};
pub use meta::{binarize, build_meta_dataset, tasks_from_datasets, MetaDataset, SegTask, TaskSplit};
pub use resize::{resize_image, resize_labels, resize_mask, resize_pair};
pub use synth::{
    synth_generate, synth_generate_detailed, ModalitySpec, ShapeClassSpec, ShapeInstance, ShapeKind, SynthDataset,
    SynthSpec, Texture,
};
pub use types::{Dataset, DenseMask, Image, LabelMap, Sample, TaskId, TaskSample, MIN_SIDE};
