//! Command-line workbench for the multi-granularity encoder: corpus
//! generation, training, evaluation, the experiment matrix, gradient
//! checking, and attention inspection.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mgsa_core::config::{parse_experiment_config, ExperimentConfig};
use mgsa_core::gradcheck::check_all_ops;
use mgsa_core::probe::{
    evaluate, forward_example, load_checkpoint, render_report, run_matrix, save_checkpoint, train,
    ProbeModel,
};
use mgsa_core::tensor::Tape;
use mgsa_core::treebank::{
    generate_corpus, read_corpus, split_corpus, write_corpus, LabeledExample, SentenceGrammar,
};

#[derive(Parser)]
#[command(name = "mgsa", version, about = "Multi-granularity self-attention workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic treebanked corpus as train/valid/test JSONL.
    Generate {
        /// Output directory for train.jsonl, valid.jsonl, and test.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Number of sentences to generate before splitting.
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Shortest sentence to keep, in tokens.
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        /// Longest sentence to keep, in tokens.
        #[arg(long, default_value_t = 20)]
        max_len: usize,
    },
    /// Train one model per the config file and write a checkpoint.
    Train {
        /// Experiment config file (flat `key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.jsonl and valid.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.json and metrics.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a data directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the split JSONL files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train and evaluate every configured (variant, seed) pair and write
    /// report.json, report.txt, and timings.json.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every autodiff primitive against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-layer, per-head attention maps for treebanked sentences.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL file of labeled examples to encode.
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL file, one record per sentence.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl SplitArg {
    fn file_name(self) -> &'static str {
        match self {
            SplitArg::Train => "train.jsonl",
            SplitArg::Valid => "valid.jsonl",
            SplitArg::Test => "test.jsonl",
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_experiment_config(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_split(dir: &Path, file: &str) -> Result<Vec<LabeledExample>> {
    let path = dir.join(file);
    read_corpus(&path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { out, count, seed, min_len, max_len } => {
            generate(&out, count, seed, min_len, max_len)
        }
        Command::Train { config, data, out, seed } => run_train(&config, &data, &out, seed),
        Command::Evaluate { checkpoint, data, split } => run_evaluate(&checkpoint, &data, split),
        Command::Matrix { config, out } => run_matrix_cmd(&config, &out),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::DumpAttention { checkpoint, input, out } => {
            dump_attention(&checkpoint, &input, &out)
        }
    }
}

fn generate(out: &Path, count: usize, seed: u64, min_len: usize, max_len: usize) -> Result<()> {
    let corpus = generate_corpus(&SentenceGrammar::toy_english(), count, (min_len, max_len), seed)
        .context("generating corpus")?;
    let (train_set, valid_set, test_set) = split_corpus(corpus);
    fs::create_dir_all(out)?;
    for (name, split) in
        [("train.jsonl", &train_set), ("valid.jsonl", &valid_set), ("test.jsonl", &test_set)]
    {
        let path = out.join(name);
        write_corpus(&path, split).with_context(|| format!("writing {}", path.display()))?;
        println!("{}: {} sentences", path.display(), split.len());
    }
    Ok(())
}

fn run_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let experiment = load_config(config)?;
    let mut train_cfg = experiment.train;
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    let train_set = load_split(data, "train.jsonl")?;
    let valid_set = load_split(data, "valid.jsonl")?;
    let outcome =
        train(&experiment.model, &train_cfg, &train_set, &valid_set).context("training")?;
    for m in &outcome.metrics {
        let valid = match &m.valid_accuracy {
            Some(acc) => {
                let parts: Vec<String> =
                    acc.iter().map(|(task, a)| format!("{task} {a:.4}")).collect();
                format!("  valid: {}", parts.join("  "))
            }
            None => String::new(),
        };
        println!(
            "epoch {:>3}  loss {:.4} (task {:.4}, tag {:.4}){valid}",
            m.epoch, m.mean_total_loss, m.mean_task_loss, m.mean_tag_loss
        );
    }
    fs::create_dir_all(out)?;
    let model_path = out.join("model.json");
    save_checkpoint(&outcome.model, &model_path).context("writing checkpoint")?;
    let metrics_path = out.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&outcome.metrics)?)?;
    println!("wrote {}", model_path.display());
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn run_evaluate(checkpoint: &Path, data: &Path, split: SplitArg) -> Result<()> {
    let model =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let examples = load_split(data, split.file_name())?;
    let accuracy = evaluate(&model, &examples).context("evaluating")?;
    println!("{} sentences from {}", examples.len(), data.join(split.file_name()).display());
    for (task, acc) in &accuracy {
        println!("{task:>6}  {acc:.4}");
    }
    Ok(())
}

fn run_matrix_cmd(config: &Path, out: &Path) -> Result<()> {
    let experiment = load_config(config)?;
    let corpus = generate_corpus(
        &SentenceGrammar::toy_english(),
        experiment.corpus.count,
        (experiment.corpus.min_len, experiment.corpus.max_len),
        experiment.corpus.seed,
    )
    .context("generating corpus")?;
    let (train_set, valid_set, test_set) = split_corpus(corpus);
    println!(
        "corpus: {} train / {} valid / {} test",
        train_set.len(),
        valid_set.len(),
        test_set.len()
    );
    let (report, timings) = run_matrix(
        &experiment.model,
        &experiment.train,
        &experiment.matrix,
        &train_set,
        &valid_set,
        &test_set,
    );
    fs::create_dir_all(out)?;
    let table = render_report(&report);
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    print!("{table}");
    println!("wrote report.json, report.txt, timings.json to {}", out.display());
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let reports = check_all_ops(seed);
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:<28} rel err {:>12.3e}  tolerance {:.0e}",
            r.name, r.rel_err, r.tolerance
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

#[derive(Serialize)]
struct HeadDump {
    head: usize,
    granularity: String,
    spans: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
    /// Row-stochastic weights, one row per token, one column per memory slot.
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct LayerDump {
    layer: usize,
    heads: Vec<HeadDump>,
}

#[derive(Serialize)]
struct SentenceDump<'a> {
    tokens: &'a [String],
    layers: Vec<LayerDump>,
}

fn dump_sentence(model: &ProbeModel, ex: &LabeledExample) -> Result<String> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let fwd = forward_example(&mut tape, &bound, model, ex).context("encoding sentence")?;
    let layers = fwd
        .encoder
        .attention
        .iter()
        .map(|layer| LayerDump {
            layer: layer.layer,
            heads: layer
                .heads
                .iter()
                .map(|h| {
                    let cols = h.spans.len();
                    HeadDump {
                        head: h.head,
                        granularity: h.granularity.to_string(),
                        spans: h.spans.clone(),
                        tags: h.tags.clone(),
                        weights: tape.data(h.weights).chunks(cols).map(<[f64]>::to_vec).collect(),
                    }
                })
                .collect(),
        })
        .collect();
    Ok(serde_json::to_string(&SentenceDump { tokens: &ex.tokens, layers })?)
}

fn dump_attention(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let examples = read_corpus(input).with_context(|| format!("reading {}", input.display()))?;
    let mut lines = String::new();
    for ex in &examples {
        lines.push_str(&dump_sentence(&model, ex)?);
        lines.push('\n');
    }
    fs::write(out, lines)?;
    println!("wrote attention maps for {} sentences to {}", examples.len(), out.display());
    Ok(())
}
