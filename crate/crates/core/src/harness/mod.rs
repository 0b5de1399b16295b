//! Training loops, optimization, checkpoints, configuration, data ingestion,
//! synthetic data and metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{OptimConfig, Precision, TrainConfig};
pub use data::{Dataset, Manifest, ManifestRow, Target};
pub use metrics::{compute_metrics, MetricReport};
pub use optim::{AdamW, Schedule};
pub use synth::{synth_dataset, SynthConfig};
pub use train::{evaluate, extract_features, finetune, pretrain, FinetuneOptions, FinetuneOutcome, PretrainOutcome};
