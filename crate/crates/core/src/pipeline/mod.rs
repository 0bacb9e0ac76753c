//! Data ingestion, model assembly, training, checkpointing, inference and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod infer;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, BackboneKind, TrainConfig};
pub use dataset::{load_dataset, Sample, Split};
pub use model::{Diagnostics, ForwardOutput, ModelConfig, Network, Stdmmf};
pub use optim::Sgd;
pub use train::{train, Trainer};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "STDMMF_NUM_THREADS";

/// Worker count: 1 when `deterministic`, else `STDMMF_NUM_THREADS`, else the hardware default.
pub fn thread_count(deterministic: bool) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(THREADS_ENV, format!("`{v}` is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Installs the global worker pool. Later calls keep the first pool.
pub fn configure_threads(deterministic: bool) -> Result<usize> {
    let n = thread_count(deterministic)?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("worker pool already initialised");
    }
    Ok(rayon::current_num_threads())
}
