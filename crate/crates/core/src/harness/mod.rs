//! Run configuration, checkpoints, the experiment log and the stage
//! commands behind the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod log;
pub mod pipeline;
pub mod state;

pub use checkpoint::{file_digest, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelScale, RunConfig};
pub use log::{ExperimentLog, LogEntry};
pub use pipeline::{
    artifact_digests, evaluate, export_latents, load_bundle, load_corpus, prepare_data, synthesize, train_duration, train_stage1,
    train_stage2, DataSummary, EvalReport, RunDir, StageReport, StageRun,
};
pub use state::{DURATION, STAGE1, STAGE2};
