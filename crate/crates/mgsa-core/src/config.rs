//! Flat key-value experiment configuration.
//!
//! The file format is one `key = value` pair per line, with `#` starting a
//! comment line and blank lines ignored. Dotted keys group into four
//! sections: `model.*` (encoder shape), `train.*` (optimization), `corpus.*`
//! (synthetic data generation), and `matrix.*` (experiment grid). Unknown
//! and duplicate keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::ModelConfig;
use crate::probe::{MatrixConfig, Task, TrainConfig, Variant, ALL_TASKS, ALL_VARIANTS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("duplicate config key {0:?}")]
    DuplicateKey(String),
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { count: 5000, seed: 7, min_len: 5, max_len: 20 }
    }
}

/// Everything an experiment needs: encoder shape, training settings, corpus
/// generation, and the variant grid. `model.vocab_size` and
/// `model.tag_vocab` are placeholders here; they are derived from the train
/// split when a model is built.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub matrix: MatrixConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::new(1),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            matrix: MatrixConfig::default(),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model.d_model",
    "model.n_heads",
    "model.n_layers",
    "model.d_ff",
    "model.max_len",
    "model.granularities",
    "model.composition",
    "model.interaction",
    "model.mg_layers",
    "model.pre_norm",
    "model.learned_positions",
    "train.tasks",
    "train.epochs",
    "train.lr",
    "train.batch_tokens",
    "train.tag_lambda",
    "train.seed",
    "train.clip_norm",
    "train.eval_every",
    "corpus.count",
    "corpus.seed",
    "corpus.min_len",
    "corpus.max_len",
    "matrix.variants",
    "matrix.seeds",
];

/// Splits config text into `(key, value)` pairs, rejecting malformed lines
/// and duplicate keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Line {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Line { line: i + 1, message: "empty key".into() });
        }
        if pairs.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey(key));
        }
    }
    Ok(pairs)
}

fn parse_one<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("{e} (got {value:?})"),
    })
}

fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(ConfigError::BadValue { key: key.to_string(), message: "empty list".into() });
    }
    items.into_iter().map(|item| parse_one(key, item)).collect()
}

/// Parses a full experiment config, applying defaults for every absent key.
/// `model.mg_layers` defaults to every layer and accepts the word `all`.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut pairs = parse_kv(text)?;
    for key in pairs.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
    }
    let mut config = ExperimentConfig::default();
    let mut take = |key: &str| pairs.remove(key);

    if let Some(v) = take("model.d_model") {
        config.model.d_model = parse_one("model.d_model", &v)?;
    }
    if let Some(v) = take("model.n_heads") {
        config.model.n_heads = parse_one("model.n_heads", &v)?;
    }
    if let Some(v) = take("model.n_layers") {
        config.model.n_layers = parse_one("model.n_layers", &v)?;
    }
    if let Some(v) = take("model.d_ff") {
        config.model.d_ff = parse_one("model.d_ff", &v)?;
    }
    if let Some(v) = take("model.max_len") {
        config.model.max_len = parse_one("model.max_len", &v)?;
    }
    if let Some(v) = take("model.granularities") {
        config.model.granularities = parse_list("model.granularities", &v)?;
    }
    if let Some(v) = take("model.composition") {
        config.model.composition = parse_one("model.composition", &v)?;
    }
    if let Some(v) = take("model.interaction") {
        config.model.interaction = parse_one("model.interaction", &v)?;
    }
    if let Some(v) = take("model.pre_norm") {
        config.model.pre_norm = parse_one("model.pre_norm", &v)?;
    }
    if let Some(v) = take("model.learned_positions") {
        config.model.learned_positions = parse_one("model.learned_positions", &v)?;
    }
    config.model.mg_layers = match take("model.mg_layers") {
        Some(v) if v != "all" => parse_list("model.mg_layers", &v)?,
        _ => (0..config.model.n_layers).collect(),
    };

    if let Some(v) = take("train.tasks") {
        config.train.tasks =
            if v == "all" { ALL_TASKS.to_vec() } else { parse_list::<Task>("train.tasks", &v)? };
    }
    if let Some(v) = take("train.epochs") {
        config.train.epochs = parse_one("train.epochs", &v)?;
    }
    if let Some(v) = take("train.lr") {
        config.train.lr = parse_one("train.lr", &v)?;
    }
    if let Some(v) = take("train.batch_tokens") {
        config.train.batch_tokens = parse_one("train.batch_tokens", &v)?;
    }
    if let Some(v) = take("train.tag_lambda") {
        config.train.tag_lambda = parse_one("train.tag_lambda", &v)?;
    }
    if let Some(v) = take("train.seed") {
        config.train.seed = parse_one("train.seed", &v)?;
    }
    if let Some(v) = take("train.clip_norm") {
        config.train.clip_norm = parse_one("train.clip_norm", &v)?;
    }
    if let Some(v) = take("train.eval_every") {
        config.train.eval_every = parse_one("train.eval_every", &v)?;
    }

    if let Some(v) = take("corpus.count") {
        config.corpus.count = parse_one("corpus.count", &v)?;
    }
    if let Some(v) = take("corpus.seed") {
        config.corpus.seed = parse_one("corpus.seed", &v)?;
    }
    if let Some(v) = take("corpus.min_len") {
        config.corpus.min_len = parse_one("corpus.min_len", &v)?;
    }
    if let Some(v) = take("corpus.max_len") {
        config.corpus.max_len = parse_one("corpus.max_len", &v)?;
    }

    if let Some(v) = take("matrix.variants") {
        config.matrix.variants = if v == "all" {
            ALL_VARIANTS.to_vec()
        } else {
            parse_list::<Variant>("matrix.variants", &v)?
        };
    }
    if let Some(v) = take("matrix.seeds") {
        config.matrix.seeds = parse_list("matrix.seeds", &v)?;
    }

    if config.corpus.min_len > config.corpus.max_len {
        return Err(ConfigError::BadValue {
            key: "corpus.min_len".into(),
            message: format!(
                "min_len {} exceeds max_len {}",
                config.corpus.min_len, config.corpus.max_len
            ),
        });
    }
    if config.corpus.max_len > config.model.max_len {
        return Err(ConfigError::BadValue {
            key: "corpus.max_len".into(),
            message: format!(
                "corpus sentences up to {} tokens will not fit the position table ({})",
                config.corpus.max_len, config.model.max_len
            ),
        });
    }
    config
        .model
        .validate()
        .map_err(|e| ConfigError::BadValue { key: "model".into(), message: e.to_string() })?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::GranularitySpec;
    use crate::phrase::{CompositionKind, InteractionKind};

    #[test]
    fn empty_text_yields_defaults() {
        let config = parse_experiment_config("").unwrap();
        assert_eq!(config.model.d_model, 64);
        assert_eq!(config.model.mg_layers, vec![0, 1, 2]);
        assert_eq!(config.train.tasks.len(), 5);
        assert_eq!(config.matrix.variants.len(), 4);
        assert_eq!(config.corpus.count, 5000);
    }

    #[test]
    fn full_config_parses_every_section() {
        let text = "\
# encoder
model.d_model = 32
model.n_heads = 4
model.n_layers = 2
model.d_ff = 64
model.max_len = 32
model.granularities = word, ngram2, syn1, syn2
model.composition = recurrent
model.interaction = onlstm
model.mg_layers = 1
model.pre_norm = false
model.learned_positions = true

train.tasks = Voice, POS
train.epochs = 4
train.lr = 0.05
train.batch_tokens = 128
train.tag_lambda = 0.01
train.seed = 9
train.clip_norm = 0.5
train.eval_every = 2

corpus.count = 400
corpus.seed = 3
corpus.min_len = 6
corpus.max_len = 18

matrix.variants = base, syntactic
matrix.seeds = 5, 6
";
        let config = parse_experiment_config(text).unwrap();
        assert_eq!(config.model.d_model, 32);
        assert_eq!(config.model.granularities[1], GranularitySpec::NGram(2));
        assert_eq!(config.model.composition, CompositionKind::Recurrent);
        assert_eq!(config.model.interaction, InteractionKind::OrderedNeuronsChain);
        assert_eq!(config.model.mg_layers, vec![1]);
        assert!(!config.model.pre_norm);
        assert!(config.model.learned_positions);
        assert_eq!(config.train.tasks, vec![Task::Voice, Task::Pos]);
        assert_eq!(config.train.lr, 0.05);
        assert_eq!(config.train.eval_every, 2);
        assert_eq!(config.corpus.max_len, 18);
        assert_eq!(config.matrix.variants, vec![Variant::Base, Variant::Syntactic]);
        assert_eq!(config.matrix.seeds, vec![5, 6]);
    }

    #[test]
    fn mg_layers_default_tracks_layer_count() {
        let config = parse_experiment_config("model.n_layers = 2").unwrap();
        assert_eq!(config.model.mg_layers, vec![0, 1]);
        let config = parse_experiment_config("model.mg_layers = all\nmodel.n_layers = 4").unwrap();
        assert_eq!(config.model.mg_layers, vec![0, 1, 2, 3]);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        assert!(matches!(
            parse_experiment_config("model.dmodel = 4"),
            Err(ConfigError::UnknownKey(k)) if k == "model.dmodel"
        ));
        assert!(matches!(
            parse_experiment_config("train.lr = 1\ntrain.lr = 2"),
            Err(ConfigError::DuplicateKey(k)) if k == "train.lr"
        ));
        let err = parse_experiment_config("just some words").unwrap_err();
        assert!(matches!(err, ConfigError::Line { line: 1, .. }), "{err}");
        let err = parse_experiment_config("train.epochs = soon").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn cross_field_contradictions_are_rejected() {
        let err = parse_experiment_config("corpus.min_len = 9\ncorpus.max_len = 4").unwrap_err();
        assert!(err.to_string().contains("min_len"), "{err}");
        let err = parse_experiment_config("corpus.max_len = 90\nmodel.max_len = 32").unwrap_err();
        assert!(err.to_string().contains("position table"), "{err}");
        let err = parse_experiment_config("model.n_heads = 2\nmodel.granularities = word, syn1")
            .unwrap_err();
        assert!(err.to_string().contains("quarter"), "{err}");
    }
}
