//! Training objectives: vocabulary indexing, auxiliary phrase-tag
//! supervision, and the combined loss.
//!
//! Syntactic granularity groups expose tag logits for their composed phrase
//! memories; classifying each phrase's constituent label is the auxiliary
//! signal that total loss mixes in with weight `lambda`. N-gram groups have
//! no gold labels and contribute exactly zero tag loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::TagOutput;
use crate::tensor::{Tape, TensorId};

/// Weight of the tag supervision term in the total loss.
pub const DEFAULT_TAG_LAMBDA: f64 = 0.001;

/// String-to-index mapping with a reserved unknown entry at index 0.
/// Lookups of unseen strings fall back to the unknown index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl Vocabulary {
    /// Builds from the distinct strings produced by `items`, sorted for
    /// determinism, with the unknown entry prepended.
    pub fn build<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut distinct: Vec<String> = items.into_iter().map(|s| s.as_ref().to_string()).collect();
        distinct.sort();
        distinct.dedup();
        distinct.retain(|s| s != UNK);
        let mut names = vec![UNK.to_string()];
        names.extend(distinct);
        names.into()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Index of `name`, or the unknown index for unseen strings.
    pub fn id(&self, name: &str) -> usize {
        self.index.get(name).copied().unwrap_or(0)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Vocabulary { names, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.names
    }
}

/// Summed cross entropy of one tag block against its gold constituent
/// labels; `None` when the block carries no gold tags.
pub fn tag_loss(tape: &mut Tape, out: &TagOutput, vocab: &Vocabulary) -> Option<TensorId> {
    let tags = out.tags.as_ref()?;
    let targets: Vec<usize> = tags.iter().map(|t| vocab.id(t)).collect();
    Some(tape.cross_entropy_from_logits(out.logits, &targets))
}

/// The combined objective and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// `task + lambda * tag`.
    pub total: TensorId,
    pub task: TensorId,
    /// Sum of all tag-block losses; `None` when no block had gold tags.
    pub tag: Option<TensorId>,
}

/// Combines a task loss with the summed tag losses of every supervised
/// block: `total = task + lambda * sum(tag)`.
pub fn total_loss(
    tape: &mut Tape,
    task: TensorId,
    tag_outputs: &[TagOutput],
    vocab: &Vocabulary,
    lambda: f64,
) -> LossBreakdown {
    let mut tag: Option<TensorId> = None;
    for out in tag_outputs {
        if let Some(part) = tag_loss(tape, out, vocab) {
            tag = Some(match tag {
                Some(sum) => tape.add(sum, part),
                None => part,
            });
        }
    }
    let total = match tag {
        Some(sum) => {
            let weighted = tape.scale(sum, lambda);
            tape.add(task, weighted)
        }
        None => task,
    };
    LossBreakdown { total, task, tag }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::GranularitySpec;

    fn tag_block(logits: TensorId, tags: Vec<&str>) -> TagOutput {
        TagOutput {
            layer: 0,
            granularity: GranularitySpec::SyntacticLayer(1),
            logits,
            spans: (0..tags.len()).map(|i| (i, i + 1)).collect(),
            tags: Some(tags.into_iter().map(String::from).collect()),
        }
    }

    #[test]
    fn vocabulary_reserves_unknown_and_sorts_names() {
        let v = Vocabulary::build(["VP", "NP", "VP", "PP"]);
        assert_eq!(v.names(), ["<unk>", "NP", "PP", "VP"]);
        assert_eq!(v.id("PP"), 2);
        assert_eq!(v.id("ZZZ"), 0);
        assert_eq!(v.name(0), "<unk>");
        assert!(v.contains("VP"));
        assert!(!v.contains("ZZZ"));
    }

    #[test]
    fn vocabulary_round_trips_through_json() {
        let v = Vocabulary::build(["NP", "VP"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["<unk>","NP","VP"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("VP"), 2);
    }

    #[test]
    fn uniform_logits_cost_phrase_count_times_log_vocab() {
        let vocab = Vocabulary::build(["A", "B", "C", "D"]);
        assert_eq!(vocab.len(), 5);
        let mut tape = Tape::new();
        let logits = tape.constant(vec![4, 5], vec![0.0; 20]);
        let out = tag_block(logits, vec!["A", "B", "C", "D"]);
        let loss = tag_loss(&mut tape, &out, &vocab).unwrap();
        let expected = 4.0 * 5.0f64.ln();
        assert!((tape.data(loss)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn total_loss_mixes_tag_term_with_lambda() {
        let vocab = Vocabulary::build(["A"]);
        let mut tape = Tape::new();
        let task = tape.constant(vec![1], vec![2.0]);
        // One two-class phrase whose cross entropy is exactly 1: the gold
        // tag "A" sits at index 1, and ln(1 + e^(b-a)) = 1 when
        // b - a = ln(e - 1).
        let logits = tape.constant(vec![1, 2], vec![(std::f64::consts::E - 1.0).ln(), 0.0]);
        let out = tag_block(logits, vec!["A"]);
        let breakdown = total_loss(&mut tape, task, &[out], &vocab, 0.001);
        assert!((tape.data(breakdown.tag.unwrap())[0] - 1.0).abs() < 1e-12);
        assert!((tape.data(breakdown.total)[0] - 2.001).abs() < 1e-12);
        assert_eq!(tape.data(breakdown.task), &[2.0]);
    }

    #[test]
    fn blocks_without_gold_tags_contribute_nothing() {
        let vocab = Vocabulary::build(["A"]);
        let mut tape = Tape::new();
        let task = tape.constant(vec![1], vec![3.5]);
        let logits = tape.constant(vec![2, 2], vec![5.0, -1.0, 0.3, 0.4]);
        let untagged = TagOutput {
            layer: 0,
            granularity: GranularitySpec::NGram(2),
            logits,
            spans: vec![(0, 2), (2, 4)],
            tags: None,
        };
        assert!(tag_loss(&mut tape, &untagged, &vocab).is_none());
        let breakdown = total_loss(&mut tape, task, &[untagged], &vocab, 0.5);
        assert!(breakdown.tag.is_none());
        assert_eq!(breakdown.total, task);
    }

    #[test]
    fn unseen_gold_tags_fall_back_to_unknown() {
        let vocab = Vocabulary::build(["NP"]);
        let mut tape = Tape::new();
        // Put all probability on the unknown class: loss over an unseen tag
        // should then be near zero.
        let logits = tape.constant(vec![1, 2], vec![30.0, 0.0]);
        let out = tag_block(logits, vec!["MYSTERY"]);
        let loss = tag_loss(&mut tape, &out, &vocab).unwrap();
        assert!(tape.data(loss)[0] < 1e-12);
    }

    #[test]
    fn gradients_reach_the_logits_through_the_mixed_loss() {
        let vocab = Vocabulary::build(["A", "B"]);
        let mut tape = Tape::new();
        let task = tape.constant(vec![1], vec![1.0]);
        let logits = tape.leaf(
            crate::tensor::Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.2])
                .with_grad(),
        );
        let out = tag_block(logits, vec!["A", "B"]);
        let breakdown = total_loss(&mut tape, task, &[out], &vocab, 0.25);
        tape.backward(breakdown.total);
        let grad = tape.grad(logits).unwrap();
        assert!(grad.iter().any(|g| g.abs() > 1e-6));
        // Softmax rows minus one-hot sum to zero, scaled by lambda.
        for row in grad.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }
}
