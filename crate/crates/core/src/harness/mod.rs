//! Corpus ingestion, training loops, evaluation and benchmarking.

mod bench;
mod corpus;
mod train;

pub use bench::{bench, block_profile, random_input, write_csv, BenchCase, BenchRow};
pub use corpus::{ingest, synthetic_text, Corpus, Tokenizer};
pub use train::{
    eval_lora, load_adapters, prepare_weights, save_adapters, sweep, train, EvalRecord,
    OptimizerKind, RunArtifacts, RunConfig, Session, StepRecord, SweepRow, Trainer,
};
