//! Few-shot binary segmentation from sparse pixel labels with a
//! second-order meta-learned initialization.

pub mod adaptation;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod meta_trainer;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod sparsifier;
pub mod task_store;

pub use error::{Error, ErrorKind, Result};
pub use sparseseg_autograd as autograd;
