//! Partitioning a sentence into phrases at one granularity.
//!
//! Two schemes produce the phrase spans that phrase-level attention heads
//! consume: fixed-width n-gram blocks, and syntactic constituents read off a
//! parse tree by breaking down the nodes of its top `k` layers. Partitions
//! always tile the sentence left to right.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::ParseTree;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("n-gram width must be at least 2, got {0}")]
    NGramTooNarrow(usize),
}

/// What one attention head attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GranularitySpec {
    /// Plain token-level attention.
    WordLevel,
    /// Fixed blocks of `n ≥ 2` consecutive tokens.
    NGram(usize),
    /// Constituents at the frontier of the top `k ≥ 1` tree layers.
    SyntacticLayer(usize),
}

impl GranularitySpec {
    pub fn is_phrase(self) -> bool {
        self != GranularitySpec::WordLevel
    }

    pub fn needs_tree(self) -> bool {
        matches!(self, GranularitySpec::SyntacticLayer(_))
    }

    pub fn validate(self) -> Result<(), String> {
        match self {
            GranularitySpec::NGram(n) if n < 2 => {
                Err(format!("n-gram width must be at least 2, got {n}"))
            }
            GranularitySpec::SyntacticLayer(0) => {
                Err("syntactic layer index starts at 1".to_string())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GranularitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GranularitySpec::WordLevel => write!(f, "word"),
            GranularitySpec::NGram(n) => write!(f, "ngram{n}"),
            GranularitySpec::SyntacticLayer(k) => write!(f, "syn{k}"),
        }
    }
}

impl FromStr for GranularitySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let spec = if s == "word" {
            GranularitySpec::WordLevel
        } else if let Some(n) = s.strip_prefix("ngram") {
            GranularitySpec::NGram(n.parse().map_err(|_| format!("bad granularity {s:?}"))?)
        } else if let Some(k) = s.strip_prefix("syn") {
            GranularitySpec::SyntacticLayer(
                k.parse().map_err(|_| format!("bad granularity {s:?}"))?,
            )
        } else {
            return Err(format!("bad granularity {s:?}: expected word, ngram<n>, or syn<k>"));
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Contiguous phrase spans covering a sentence, with constituent tags when
/// the partition came from a tree. `pad_len` is the number of filler rows
/// the final n-gram phrase needs to reach full width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhrasePartition {
    pub granularity: GranularitySpec,
    pub spans: Vec<(usize, usize)>,
    pub tags: Option<Vec<String>>,
    pub pad_len: usize,
}

impl PhrasePartition {
    /// Number of phrases, `M`.
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// One span per token; what a word-level head sees.
    pub fn word_level(t: usize) -> Self {
        PhrasePartition {
            granularity: GranularitySpec::WordLevel,
            spans: (0..t).map(|i| (i, i + 1)).collect(),
            tags: None,
            pad_len: 0,
        }
    }
}

/// Splits `t` tokens into `⌈t/n⌉` blocks of `n`; the final block keeps its
/// true (shorter) span and `pad_len` records the missing rows.
pub fn ngram_partition(t: usize, n: usize) -> Result<PhrasePartition, PartitionError> {
    if n < 2 {
        return Err(PartitionError::NGramTooNarrow(n));
    }
    assert!(t >= 1, "cannot partition an empty sentence");
    let m = t.div_ceil(n);
    let spans = (0..m).map(|i| (i * n, ((i + 1) * n).min(t))).collect();
    Ok(PhrasePartition {
        granularity: GranularitySpec::NGram(n),
        spans,
        tags: None,
        pad_len: m * n - t,
    })
}

/// Reads the phrases at layer `k` of a parse tree: the frontier reached by
/// breaking down nodes for `k` levels from the root. Descent stops early at
/// terminals and at tag nodes whose children are all terminals, so those
/// keep their span and label; deeper layers only ever refine shallower ones.
pub fn syntactic_partition(tree: &ParseTree, k: usize) -> PhrasePartition {
    assert!(k >= 1, "syntactic layer index starts at 1");
    let mut nodes = Vec::new();
    frontier(tree, k, &mut nodes);
    PhrasePartition {
        granularity: GranularitySpec::SyntacticLayer(k),
        spans: nodes.iter().map(|n| n.span).collect(),
        tags: Some(nodes.iter().map(|n| n.label.clone()).collect()),
        pad_len: 0,
    }
}

fn frontier<'a>(node: &'a ParseTree, depth: usize, out: &mut Vec<&'a ParseTree>) {
    let tag_node = !node.is_terminal() && node.children.iter().all(ParseTree::is_terminal);
    if depth == 0 || node.is_terminal() || tag_node {
        out.push(node);
    } else {
        for c in &node.children {
            frontier(c, depth - 1, out);
        }
    }
}
