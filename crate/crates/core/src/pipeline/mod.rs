//! Experiment orchestration: configuration, checkpoints and the pipeline stages.

mod checkpoint;
mod config;
mod stages;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{
    DataConfig, EvalSection, ExperimentConfig, FinetuneSection, Generator, IdkSection, PretrainConfig, SuiteConfig,
    TvdSection,
};
pub use stages::{
    collect_reports, comparison_table, eval, finetune_stage, finetune_tvd_stage, flop_ledger, gen_data,
    lambda_sweep_csv, pretrain, train_rl_stage, write_report, RunDir, Stage, METHODS,
};
