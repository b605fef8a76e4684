//! Losses, optimizer, metrics, checkpoints and the train/eval/ablation
//! loops.

mod ablate;
mod checkpoint;
mod config;
mod loss;
mod metrics;
mod optim;
mod suite;
mod train;

pub use ablate::{
    ablate, ablate_on, median, parse_variants, AblationReport, AblationRun, Comparison, Variant,
    VARIANTS,
};
pub use checkpoint::{payload_path, Checkpoint, CheckpointTensor};
pub use config::{CorpusConfig, RunConfig, TrainConfig};
pub use loss::{cross_entropy_loss, midlevel_bce_loss, total_loss, LossTerms, LossWeights};
pub use metrics::{compute_miou, Confusion, Metrics};
pub use optim::{clip_global_norm, group_factor, learning_rate, schedule_factor, warmup_steps, Sgd};
pub use suite::{
    end_to_end_case, gradcheck_suite, tiny_model_config, SuiteEntry, END_TO_END_TOL, OP_TOL,
    SUITE_MODULES,
};
pub use train::{
    eval_run, evaluate, format_log, load_corpus, log_path, mean_cross_entropy, prepare_scene,
    steps_per_epoch, synth_corpus, train, train_run, Corpus, EpochRecord, PreparedScene,
    TrainOutcome,
};
