//! Everything around the networks: datasets, checkpoints, run
//! configuration, the training loops and the reconstruction probe.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod orchestrator;
pub mod recon;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
pub use config::{Data, DataConfig, DataKind, DistillSpec, TrainConfig};
pub use dataset::{load_dataset, BlobParams, CifarVariant, Dataset, DatasetSource, Split};
pub use error::{Result, TrainError};
pub use orchestrator::{
    evaluate, evaluate_checkpoint, train, train_distill, train_multi_baseline, train_pfeed,
    train_scratch, train_sfeed, EpochMetrics, Run, RunRecord, StepLog,
};
pub use recon::{compare_recon, train_paraphraser, ReconOptions, ReconReport, ReconSummary};
