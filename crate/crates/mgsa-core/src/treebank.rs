//! Constituency treebank reading, task labeling, and synthetic corpora.
//!
//! Trees arrive and leave as bracketed expressions, one per line, e.g.
//! `(S (NP Bush) (VP (VBD held) (NP a talk) (PP with Sharon)))`. From a tree
//! the module derives the five probing labels: sentence-level Voice, Tense,
//! and TSS (top syntactic sequence), plus per-token SPC (smallest phrase
//! constituent) and POS. A weighted context-free grammar produces labeled
//! synthetic sentences deterministically from a seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("labeling error: {0}")]
    Labeling(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("corpus record on line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(offset: usize, message: impl Into<String>) -> TreebankError {
    TreebankError::Parse { offset, message: message.into() }
}

// ── Trees ────────────────────────────────────────────────────────────────

/// Constituency tree node. Terminals carry the token as their label and have
/// no children; spans are half-open token index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub label: String,
    pub children: Vec<ParseTree>,
    pub span: (usize, usize),
}

impl ParseTree {
    pub fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }

    /// A node with a single terminal child: the tag position of a token.
    pub fn is_preterminal(&self) -> bool {
        self.children.len() == 1 && self.children[0].is_terminal()
    }

    pub fn token_count(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn tokens(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_tokens(&mut out);
        out
    }

    fn collect_tokens<'a>(&'a self, out: &mut Vec<&'a str>) {
        if self.is_terminal() {
            out.push(&self.label);
        } else {
            for c in &self.children {
                c.collect_tokens(out);
            }
        }
    }

    fn has_preterminal(&self) -> bool {
        self.is_preterminal() || self.children.iter().any(ParseTree::has_preterminal)
    }

    /// Bracketed rendering with single spaces; `parse_bracketed ∘ render` is
    /// the identity and `render ∘ parse_bracketed` normalizes whitespace.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        if self.is_terminal() {
            out.push_str(&self.label);
            return;
        }
        let _ = write!(out, "({}", self.label);
        for c in &self.children {
            out.push(' ');
            c.render_into(out);
        }
        out.push(')');
    }

    fn assign_spans(&mut self, start: usize) -> usize {
        if self.is_terminal() {
            self.span = (start, start + 1);
            return start + 1;
        }
        let mut cursor = start;
        for c in &mut self.children {
            cursor = c.assign_spans(cursor);
        }
        self.span = (start, cursor);
        cursor
    }
}

/// Parses one bracketed tree, rejecting trailing content. A label-less
/// wrapper around a single tree, as in `( (S ...) )`, is unwrapped.
pub fn parse_bracketed(input: &str) -> Result<ParseTree, TreebankError> {
    let mut p = Parser { bytes: input.as_bytes(), pos: 0 };
    p.skip_ws();
    let open = p.pos;
    let mut tree = p.node()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(parse_err(p.pos, "trailing content after tree"));
    }
    if tree.label.is_empty() {
        if tree.children.len() == 1 && !tree.children[0].is_terminal() {
            tree = tree.children.pop().unwrap();
        } else {
            return Err(parse_err(open, "missing constituent label"));
        }
    }
    tree.assign_spans(0);
    Ok(tree)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> &str {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'('
            && self.bytes[self.pos] != b')'
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).expect("input was a valid str")
    }

    fn node(&mut self) -> Result<ParseTree, TreebankError> {
        let open = self.pos;
        if self.pos >= self.bytes.len() || self.bytes[self.pos] != b'(' {
            return Err(parse_err(self.pos, "expected '('"));
        }
        self.pos += 1;
        self.skip_ws();
        let label = self.atom().to_string();
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.bytes.get(self.pos) {
                None => {
                    return Err(parse_err(
                        self.pos,
                        "unbalanced brackets: constituent never closed",
                    ))
                }
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => {
                    let child = self.node()?;
                    if child.label.is_empty() {
                        return Err(parse_err(open, "missing constituent label"));
                    }
                    children.push(child);
                }
                Some(_) => {
                    let word = self.atom().to_string();
                    children.push(ParseTree { label: word, children: Vec::new(), span: (0, 0) });
                }
            }
        }
        if children.is_empty() {
            return Err(parse_err(open, "empty constituent"));
        }
        Ok(ParseTree { label, children, span: (0, 0) })
    }
}

// ── Task labels ──────────────────────────────────────────────────────────

/// The five probing labels of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLabels {
    pub voice: String,
    pub tense: String,
    pub tss: String,
    pub spc: Vec<String>,
    pub pos: Vec<String>,
}

const BE_FORMS: [&str; 8] = ["is", "are", "was", "were", "am", "be", "been", "being"];

/// Derives all five labels from a tree. POS is the label of each token's
/// parent; SPC is the label of the nearest ancestor that is not a
/// preterminal (falling back to the root); TSS joins the root children's
/// labels with dashes. Voice and Tense come from surface heuristics, which
/// are approximate: a be-form followed by a VBN marks passive, and a first
/// verb tagged VBD or VBN marks past. Generated corpora replace both with
/// exact values from the grammar.
pub fn derive_task_labels(tree: &ParseTree) -> Result<TaskLabels, TreebankError> {
    if tree.is_terminal() {
        return Err(TreebankError::Labeling(
            "tree is a bare terminal with no constituent structure".into(),
        ));
    }
    if !tree.has_preterminal() {
        return Err(TreebankError::Labeling("tree has no preterminals".into()));
    }
    let mut pos = Vec::new();
    let mut spc = Vec::new();
    let mut stack: Vec<&ParseTree> = Vec::new();
    collect_token_labels(tree, &mut stack, &mut pos, &mut spc, &tree.label);

    let tss = tree.children.iter().map(|c| c.label.as_str()).collect::<Vec<_>>().join("-");

    let tokens = tree.tokens();
    let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let first_be = lowered.iter().position(|t| BE_FORMS.contains(&t.as_str()));
    let voice = match first_be {
        Some(i) if pos[i + 1..].iter().any(|p| p == "VBN") => "passive",
        _ => "active",
    };
    let tense = match pos.iter().position(|p| p.starts_with("VB")) {
        Some(i) if pos[i] == "VBD" || pos[i] == "VBN" => "past",
        _ => "nonpast",
    };

    Ok(TaskLabels { voice: voice.into(), tense: tense.into(), tss, spc, pos })
}

fn collect_token_labels<'a>(
    node: &'a ParseTree,
    ancestors: &mut Vec<&'a ParseTree>,
    pos: &mut Vec<String>,
    spc: &mut Vec<String>,
    root_label: &str,
) {
    if node.is_terminal() {
        let parent = ancestors.last().expect("terminal below the root has a parent");
        pos.push(parent.label.clone());
        let phrase = ancestors
            .iter()
            .rev()
            .find(|a| !a.is_preterminal())
            .map(|a| a.label.as_str())
            .unwrap_or(root_label);
        spc.push(phrase.to_string());
        return;
    }
    ancestors.push(node);
    for c in &node.children {
        collect_token_labels(c, ancestors, pos, spc, root_label);
    }
    ancestors.pop();
}

// ── Labeled examples and corpus files ────────────────────────────────────

/// One corpus sentence: tokens, gold tree, and the five task labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<String>,
    pub tree: ParseTree,
    pub labels: TaskLabels,
}

impl LabeledExample {
    pub fn from_tree(tree: ParseTree) -> Result<Self, TreebankError> {
        let labels = derive_task_labels(&tree)?;
        let tokens = tree.tokens().into_iter().map(str::to_string).collect();
        Ok(LabeledExample { tokens, tree, labels })
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    tree: String,
    labels: BTreeMap<String, LabelValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Sentence(String),
    PerToken(Vec<String>),
}

impl LabeledExample {
    fn to_record(&self) -> Record {
        let mut labels = BTreeMap::new();
        labels.insert("Voice".into(), LabelValue::Sentence(self.labels.voice.clone()));
        labels.insert("Tense".into(), LabelValue::Sentence(self.labels.tense.clone()));
        labels.insert("TSS".into(), LabelValue::Sentence(self.labels.tss.clone()));
        labels.insert("SPC".into(), LabelValue::PerToken(self.labels.spc.clone()));
        labels.insert("POS".into(), LabelValue::PerToken(self.labels.pos.clone()));
        Record { tokens: self.tokens.clone(), tree: self.tree.render(), labels }
    }

    fn from_record(record: Record, line: usize) -> Result<Self, TreebankError> {
        let bad = |message: String| TreebankError::Record { line, message };
        let tree = parse_bracketed(&record.tree).map_err(|e| bad(format!("invalid tree: {e}")))?;
        if tree.tokens() != record.tokens.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(bad("tokens field does not match tree terminals".into()));
        }
        let mut labels = record.labels;
        let mut sentence = |task: &str| match labels.remove(task) {
            Some(LabelValue::Sentence(v)) => Ok(v),
            Some(LabelValue::PerToken(_)) => {
                Err(bad(format!("label {task} must be a single string")))
            }
            None => Err(bad(format!("missing label {task}"))),
        };
        let voice = sentence("Voice")?;
        let tense = sentence("Tense")?;
        let tss = sentence("TSS")?;
        let mut per_token = |task: &str| match labels.remove(task) {
            Some(LabelValue::PerToken(v)) if v.len() == record.tokens.len() => Ok(v),
            Some(LabelValue::PerToken(v)) => Err(bad(format!(
                "label {task} has {} entries for {} tokens",
                v.len(),
                record.tokens.len()
            ))),
            Some(LabelValue::Sentence(_)) => {
                Err(bad(format!("label {task} must be a per-token list")))
            }
            None => Err(bad(format!("missing label {task}"))),
        };
        let spc = per_token("SPC")?;
        let pos = per_token("POS")?;
        Ok(LabeledExample {
            tokens: record.tokens,
            tree,
            labels: TaskLabels { voice, tense, tss, spc, pos },
        })
    }
}

/// Writes examples as JSON lines.
pub fn write_corpus(path: &Path, examples: &[LabeledExample]) -> Result<(), TreebankError> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, &ex.to_record())
            .map_err(|e| TreebankError::Record { line: 0, message: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines corpus, reporting the first malformed line.
pub fn read_corpus(path: &Path) -> Result<Vec<LabeledExample>, TreebankError> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| TreebankError::Record { line: i + 1, message: e.to_string() })?;
        examples.push(LabeledExample::from_record(record, i + 1)?);
    }
    Ok(examples)
}

/// Corpus split assigned by a deterministic hash of the example index,
/// at a 10/1/1 train/valid/test ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

pub fn split_for_index(index: usize) -> Split {
    match splitmix64(index as u64) % 12 {
        10 => Split::Valid,
        11 => Split::Test,
        _ => Split::Train,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Partitions a corpus into (train, valid, test) by example index.
pub fn split_corpus(
    examples: Vec<LabeledExample>,
) -> (Vec<LabeledExample>, Vec<LabeledExample>, Vec<LabeledExample>) {
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, ex) in examples.into_iter().enumerate() {
        match split_for_index(i) {
            Split::Train => train.push(ex),
            Split::Valid => valid.push(ex),
            Split::Test => test.push(ex),
        }
    }
    (train, valid, test)
}

// ── Weighted context-free generation ─────────────────────────────────────

const MAX_EXPANSION_DEPTH: usize = 48;
const MAX_SAMPLE_ATTEMPTS: usize = 500;

/// Weighted CFG. A right-hand-side symbol is a nonterminal exactly when it
/// appears as a rule head; anything else is emitted as a token.
#[derive(Debug, Clone, Default)]
pub struct Pcfg {
    pub start: String,
    rules: BTreeMap<String, Vec<(f64, Vec<String>)>>,
}

impl Pcfg {
    pub fn new(start: &str) -> Self {
        Pcfg { start: start.to_string(), rules: BTreeMap::new() }
    }

    /// Adds `lhs -> rhs` with the given positive weight; `rhs` is a
    /// whitespace-separated symbol list.
    pub fn rule(&mut self, lhs: &str, weight: f64, rhs: &str) {
        assert!(weight > 0.0, "rule weight must be positive, got {weight}");
        let symbols: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
        assert!(!symbols.is_empty(), "rule for {lhs} must produce at least one symbol");
        self.rules.entry(lhs.to_string()).or_default().push((weight, symbols));
    }

    /// Samples one tree, failing if expansion exceeds the depth bound.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<ParseTree, TreebankError> {
        let mut tree = self.expand(&self.start, MAX_EXPANSION_DEPTH, rng)?;
        if tree.is_terminal() {
            return Err(TreebankError::Generation(format!(
                "start symbol {:?} has no rules",
                self.start
            )));
        }
        tree.assign_spans(0);
        Ok(tree)
    }

    fn expand(
        &self,
        symbol: &str,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<ParseTree, TreebankError> {
        let Some(alternatives) = self.rules.get(symbol) else {
            return Ok(ParseTree { label: symbol.to_string(), children: Vec::new(), span: (0, 0) });
        };
        if depth == 0 {
            return Err(TreebankError::Generation(format!(
                "grammar did not terminate within depth {MAX_EXPANSION_DEPTH} while expanding {symbol:?}"
            )));
        }
        let total: f64 = alternatives.iter().map(|(w, _)| w).sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = &alternatives[alternatives.len() - 1].1;
        for (w, rhs) in alternatives {
            if pick < *w {
                chosen = rhs;
                break;
            }
            pick -= w;
        }
        let children =
            chosen.iter().map(|s| self.expand(s, depth - 1, rng)).collect::<Result<Vec<_>, _>>()?;
        Ok(ParseTree { label: symbol.to_string(), children, span: (0, 0) })
    }
}

/// A grammar variant with known sentence-level facts about what it emits.
#[derive(Debug, Clone)]
pub struct GrammarVariant {
    pub voice: String,
    pub tense: String,
    pub pcfg: Pcfg,
}

/// Family of grammars covering the voice and tense alternations, sampled
/// uniformly per sentence so both sentence labels stay balanced.
#[derive(Debug, Clone)]
pub struct SentenceGrammar {
    pub variants: Vec<GrammarVariant>,
}

impl SentenceGrammar {
    /// Small English-like grammar over diplomacy vocabulary. Every token
    /// sits under a POS preterminal; passives nest the participle VP under
    /// the auxiliary.
    pub fn toy_english() -> Self {
        let mut shared = Pcfg::new("S");
        shared.rule("NP", 3.0, "NNP");
        shared.rule("NP", 4.0, "DT NN");
        shared.rule("NP", 3.0, "DT JJ NN");
        shared.rule("NP", 1.0, "DT JJ JJ NN");
        shared.rule("NP", 2.0, "DT NNS");
        shared.rule("NP", 1.5, "DT NN PP");
        shared.rule("NPSG", 3.0, "NNP");
        shared.rule("NPSG", 3.0, "DT NN");
        shared.rule("NPSG", 2.0, "DT JJ NN");
        shared.rule("PP", 1.0, "IN NP");
        shared.rule("PPBY", 1.0, "INBY NP");
        shared.rule("ADVP", 1.0, "RB");
        for word in ["Bush", "Sharon", "Clinton", "Putin", "Merkel", "Blair"] {
            shared.rule("NNP", 1.0, word);
        }
        for word in ["the", "a", "this", "every"] {
            shared.rule("DT", 1.0, word);
        }
        for word in ["long", "brief", "formal", "secret", "historic", "tense"] {
            shared.rule("JJ", 1.0, word);
        }
        for word in
            ["talk", "report", "treaty", "plan", "meeting", "speech", "deal", "summit", "proposal"]
        {
            shared.rule("NN", 1.0, word);
        }
        for word in ["talks", "reports", "plans", "ministers", "delegates"] {
            shared.rule("NNS", 1.0, word);
        }
        for word in ["with", "about", "after", "during", "before"] {
            shared.rule("IN", 1.0, word);
        }
        shared.rule("INBY", 1.0, "by");
        for word in ["yesterday", "today", "recently", "quietly"] {
            shared.rule("RB", 1.0, word);
        }

        let verbs = ["held", "signed", "praised", "rejected", "approved", "discussed"];
        let verbs_s = ["holds", "signs", "praises", "rejects", "approves", "discusses"];

        let active = |tense: &str| {
            let mut g = shared.clone();
            let tag = if tense == "past" { "VBD" } else { "VBZ" };
            let forms: &[&str] = if tense == "past" { &verbs } else { &verbs_s };
            for word in forms {
                g.rule(tag, 1.0, word);
            }
            g.rule("S", 5.0, "NP VP");
            g.rule("S", 1.5, "ADVP NP VP");
            g.rule("S", 1.5, "NP VP PP");
            g.rule("VP", 2.0, &format!("{tag} NP"));
            g.rule("VP", 1.0, &format!("{tag} NP PP"));
            GrammarVariant { voice: "active".into(), tense: tense.into(), pcfg: g }
        };
        let passive = |tense: &str| {
            let mut g = shared.clone();
            let (aux_tag, aux) = if tense == "past" { ("VBD", "was") } else { ("VBZ", "is") };
            g.rule(aux_tag, 1.0, aux);
            for word in &verbs {
                g.rule("VBN", 1.0, word);
            }
            // Passive subjects stay singular to agree with the auxiliary.
            g.rule("S", 5.0, "NPSG VP");
            g.rule("S", 1.5, "ADVP NPSG VP");
            g.rule("S", 1.5, "NPSG VP PP");
            g.rule("VP", 1.0, &format!("{aux_tag} VPPART"));
            g.rule("VPPART", 3.0, "VBN PPBY");
            g.rule("VPPART", 1.0, "VBN");
            g.rule("VPPART", 1.0, "VBN PPBY PP");
            GrammarVariant { voice: "passive".into(), tense: tense.into(), pcfg: g }
        };

        SentenceGrammar {
            variants: vec![active("past"), active("nonpast"), passive("past"), passive("nonpast")],
        }
    }
}

/// Generates `count` labeled sentences whose lengths fall inside the given
/// token band. Sentence trees are sampled with rejection; Voice and Tense
/// come from the generating variant rather than the surface heuristics.
pub fn generate_corpus(
    grammar: &SentenceGrammar,
    count: usize,
    band: (usize, usize),
    seed: u64,
) -> Result<Vec<LabeledExample>, TreebankError> {
    let (min_len, max_len) = band;
    if min_len == 0 || max_len < min_len {
        return Err(TreebankError::Generation(format!(
            "invalid length band {min_len}..={max_len}"
        )));
    }
    if grammar.variants.is_empty() {
        return Err(TreebankError::Generation("grammar has no variants".into()));
    }
    let mut rng = crate::tensor::seeded_rng(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        let mut last_error = None;
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let variant = &grammar.variants[rng.random_range(0..grammar.variants.len())];
            match variant.pcfg.sample(&mut rng) {
                Ok(tree) => {
                    let len = tree.token_count();
                    if len >= min_len && len <= max_len {
                        accepted = Some((tree, variant));
                        break;
                    }
                }
                Err(e) => last_error = Some(e),
            }
        }
        let Some((tree, variant)) = accepted else {
            return Err(last_error.unwrap_or_else(|| {
                TreebankError::Generation(format!(
                    "no sentence of {min_len}..={max_len} tokens in {MAX_SAMPLE_ATTEMPTS} attempts"
                ))
            }));
        };
        let mut example = LabeledExample::from_tree(tree)?;
        example.labels.voice = variant.voice.clone();
        example.labels.tense = variant.tense.clone();
        out.push(example);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1: &str = "(S (NP Bush) (VP (VBD held) (NP a talk) (PP with Sharon)))";

    #[test]
    fn parses_abbreviated_tree_with_spans() {
        let tree = parse_bracketed(FIG1).unwrap();
        assert_eq!(tree.label, "S");
        assert_eq!(tree.span, (0, 6));
        assert_eq!(
            tree.children.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(),
            ["NP", "VP"]
        );
        assert_eq!(tree.children[0].span, (0, 1));
        assert_eq!(tree.children[1].span, (1, 6));
        assert_eq!(tree.tokens(), ["Bush", "held", "a", "talk", "with", "Sharon"]);
    }

    #[test]
    fn accepts_bare_terminal_next_to_constituent() {
        let tree = parse_bracketed("(S (NP a) b)").unwrap();
        assert_eq!(tree.children[1].label, "b");
        assert!(tree.children[1].is_terminal());
    }

    #[test]
    fn render_normalizes_whitespace_and_round_trips() {
        let messy = "( S   (NP  Bush)\n\t(VP (VBD held)  (NP a talk) (PP with Sharon) ) )";
        let tree = parse_bracketed(messy).unwrap();
        assert_eq!(tree.render(), FIG1);
        assert_eq!(parse_bracketed(&tree.render()).unwrap(), tree);
    }

    #[test]
    fn unwraps_unlabeled_top_level_wrapper() {
        let tree = parse_bracketed("( (S (NP Bush) (VP (VBD spoke))) )").unwrap();
        assert_eq!(tree.label, "S");
    }

    #[test]
    fn parse_errors_carry_byte_offsets() {
        let unclosed = parse_bracketed("(S (NP Bush)").unwrap_err();
        assert!(matches!(unclosed, TreebankError::Parse { offset: 12, .. }), "{unclosed}");

        let empty = parse_bracketed("(S (NP))").unwrap_err();
        assert!(matches!(empty, TreebankError::Parse { offset: 3, .. }), "{empty}");

        let trailing = parse_bracketed("(NP Bush) extra").unwrap_err();
        assert!(matches!(trailing, TreebankError::Parse { offset: 10, .. }), "{trailing}");

        let not_open = parse_bracketed("NP Bush").unwrap_err();
        assert!(matches!(not_open, TreebankError::Parse { offset: 0, .. }), "{not_open}");
    }

    #[test]
    fn labels_on_the_abbreviated_example() {
        let tree = parse_bracketed(FIG1).unwrap();
        let labels = derive_task_labels(&tree).unwrap();
        // Tokens: Bush held a talk with Sharon
        assert_eq!(labels.pos[1], "VBD");
        assert_eq!(labels.spc[3], "NP");
        assert_eq!(labels.spc[1], "VP");
        assert_eq!(labels.spc[0], "S");
        assert_eq!(labels.tss, "NP-VP");
        assert_eq!(labels.voice, "active");
        assert_eq!(labels.tense, "past");
    }

    #[test]
    fn labels_on_a_fully_tagged_tree() {
        let tree =
            parse_bracketed("(S (NP (NNP Bush)) (VP (VBD held) (NP (DT a) (NN talk))))").unwrap();
        let labels = derive_task_labels(&tree).unwrap();
        assert_eq!(labels.pos, ["NNP", "VBD", "DT", "NN"]);
        assert_eq!(labels.spc, ["NP", "VP", "NP", "NP"]);
        assert_eq!(labels.tss, "NP-VP");
    }

    #[test]
    fn passive_heuristics_fire_on_aux_plus_participle() {
        let tree = parse_bracketed(
            "(S (NP (NNP Bush)) (VP (VBD was) (VP (VBN held) (PP (IN by) (NP (NNP Sharon))))))",
        )
        .unwrap();
        let labels = derive_task_labels(&tree).unwrap();
        assert_eq!(labels.voice, "passive");
        assert_eq!(labels.tense, "past");

        let nonpast = parse_bracketed(
            "(S (NP (NNP Bush)) (VP (VBZ is) (VP (VBN held) (PP (IN by) (NP (NNP Sharon))))))",
        )
        .unwrap();
        let labels = derive_task_labels(&nonpast).unwrap();
        assert_eq!(labels.voice, "passive");
        assert_eq!(labels.tense, "nonpast");
    }

    #[test]
    fn trees_without_preterminals_are_rejected() {
        let tree = parse_bracketed("(S a b)").unwrap();
        assert!(matches!(derive_task_labels(&tree), Err(TreebankError::Labeling(_))));
    }

    #[test]
    fn generation_is_deterministic_and_inside_the_band() {
        let grammar = SentenceGrammar::toy_english();
        let a = generate_corpus(&grammar, 50, (5, 20), 11).unwrap();
        let b = generate_corpus(&grammar, 50, (5, 20), 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|ex| (5..=20).contains(&ex.tokens.len())));
        let c = generate_corpus(&grammar, 50, (5, 20), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_corpora_cover_both_voices_and_tenses() {
        let grammar = SentenceGrammar::toy_english();
        let corpus = generate_corpus(&grammar, 200, (5, 20), 3).unwrap();
        for value in ["active", "passive"] {
            assert!(corpus.iter().any(|ex| ex.labels.voice == value));
        }
        for value in ["past", "nonpast"] {
            assert!(corpus.iter().any(|ex| ex.labels.tense == value));
        }
        // Surface heuristics agree with generation metadata on this grammar.
        for ex in &corpus {
            let derived = derive_task_labels(&ex.tree).unwrap();
            assert_eq!(derived.voice, ex.labels.voice, "{:?}", ex.tokens);
            assert_eq!(derived.tense, ex.labels.tense, "{:?}", ex.tokens);
        }
    }

    #[test]
    fn generated_trees_round_trip_through_the_parser() {
        let grammar = SentenceGrammar::toy_english();
        let corpus = generate_corpus(&grammar, 300, (5, 20), 17).unwrap();
        for ex in &corpus {
            let reparsed = parse_bracketed(&ex.tree.render()).unwrap();
            assert_eq!(reparsed, ex.tree);
        }
    }

    #[test]
    fn zero_count_generation_is_empty() {
        let grammar = SentenceGrammar::toy_english();
        assert!(generate_corpus(&grammar, 0, (5, 20), 1).unwrap().is_empty());
    }

    #[test]
    fn non_terminating_grammar_reports_generation_error() {
        let mut g = Pcfg::new("S");
        g.rule("S", 1.0, "S S");
        let grammar = SentenceGrammar {
            variants: vec![GrammarVariant {
                voice: "active".into(),
                tense: "past".into(),
                pcfg: g,
            }],
        };
        assert!(matches!(
            generate_corpus(&grammar, 1, (5, 20), 1),
            Err(TreebankError::Generation(_))
        ));
    }

    #[test]
    fn split_ratio_is_roughly_ten_one_one_and_deterministic() {
        let counts = (0..12_000).fold([0usize; 3], |mut acc, i| {
            match split_for_index(i) {
                Split::Train => acc[0] += 1,
                Split::Valid => acc[1] += 1,
                Split::Test => acc[2] += 1,
            }
            acc
        });
        assert!((9_700..=10_300).contains(&counts[0]), "{counts:?}");
        assert!((800..=1_200).contains(&counts[1]), "{counts:?}");
        assert!((800..=1_200).contains(&counts[2]), "{counts:?}");
        assert_eq!(split_for_index(123), split_for_index(123));
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let grammar = SentenceGrammar::toy_english();
        let corpus = generate_corpus(&grammar, 25, (5, 20), 5).unwrap();
        write_corpus(&path, &corpus).unwrap();
        let loaded = read_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn malformed_corpus_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, "{\"tokens\": [\"a\"], \"tree\": \"(\", \"labels\": {}}\n").unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(matches!(err, TreebankError::Record { line: 1, .. }), "{err}");
    }
}
