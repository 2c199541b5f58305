//! Multi-granularity self-attention on CPU.
//!
//! A Transformer-style encoder in which designated attention heads attend
//! over phrase-level memories (n-gram blocks or syntactic constituents)
//! instead of single tokens, built on a small reverse-mode autodiff engine.
//! The crate also ships the surrounding experiment tooling: treebank reading
//! and synthetic corpus generation, phrase partitioning and composition,
//! auxiliary tag supervision, and a probing harness with an experiment
//! matrix runner.

pub mod attention;
pub mod config;
pub mod gradcheck;
pub mod objectives;
pub mod params;
pub mod partition;
pub mod phrase;
pub mod probe;
pub mod tensor;
pub mod treebank;

pub use attention::{
    encoder_forward, init_model, EncoderOutput, HeadAssignment, ModelConfig, ModelError,
};
pub use config::{parse_experiment_config, ConfigError, CorpusConfig, ExperimentConfig};
pub use objectives::{tag_loss, total_loss, LossBreakdown, Vocabulary, DEFAULT_TAG_LAMBDA};
pub use params::{BoundParams, ParamStore, Parameter};
pub use partition::{ngram_partition, syntactic_partition, GranularitySpec, PhrasePartition};
pub use phrase::{build_phrase_memory, CompositionKind, InteractionKind, PhraseMemory};
pub use probe::{evaluate, run_matrix, train, ProbeModel, Task, TrainConfig, Variant};
pub use tensor::{seeded_rng, uniform_init, Tape, Tensor, TensorId};
pub use treebank::{LabeledExample, ParseTree, TaskLabels, TreebankError};
