//! Phrase memories: composing token spans into phrase vectors and letting
//! phrases interact along the sentence.
//!
//! For one granularity group the pipeline is: project the token states into
//! the group width, cut them by the phrase partition, compose each slice
//! into a single vector, then optionally run a recurrent interaction over
//! the phrase sequence. The result is the memory that the group's attention
//! heads use for keys and values.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{BoundParams, ParamStore, Parameter};
use crate::partition::{
    ngram_partition, syntactic_partition, GranularitySpec, PartitionError, PhrasePartition,
};
use crate::tensor::{uniform_init, Tape, TensorId};
use crate::treebank::ParseTree;

#[derive(Debug, Error)]
pub enum PhraseError {
    #[error("syntactic partition requires a parse tree")]
    MissingTree,
    #[error("tree covers {tree_tokens} tokens but the sentence has {rows} rows")]
    TokenMismatch { tree_tokens: usize, rows: usize },
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// How the tokens of one phrase collapse into a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompositionKind {
    /// Columnwise maximum over the phrase rows.
    MaxPool,
    /// Last hidden state of an LSTM run over the phrase rows.
    Recurrent,
    /// Single-query scaled dot attention over the phrase rows, with the
    /// max-pool vector as the query.
    AttentivePool,
}

impl fmt::Display for CompositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CompositionKind::MaxPool => "maxpool",
            CompositionKind::Recurrent => "recurrent",
            CompositionKind::AttentivePool => "attentive",
        };
        write!(f, "{s}")
    }
}

impl FromStr for CompositionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "maxpool" => Ok(CompositionKind::MaxPool),
            "recurrent" => Ok(CompositionKind::Recurrent),
            "attentive" => Ok(CompositionKind::AttentivePool),
            _ => Err(format!("bad composition {s:?}: expected maxpool, recurrent, or attentive")),
        }
    }
}

/// Whether and how composed phrases exchange information along the sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionKind {
    /// Phrases stay independent.
    None,
    /// LSTM over the phrase sequence; the memory becomes its hidden states.
    RecurrentChain,
    /// Ordered-neurons LSTM over the phrase sequence.
    OrderedNeuronsChain,
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InteractionKind::None => "none",
            InteractionKind::RecurrentChain => "lstm",
            InteractionKind::OrderedNeuronsChain => "onlstm",
        };
        write!(f, "{s}")
    }
}

impl FromStr for InteractionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(InteractionKind::None),
            "lstm" => Ok(InteractionKind::RecurrentChain),
            "onlstm" => Ok(InteractionKind::OrderedNeuronsChain),
            _ => Err(format!("bad interaction {s:?}: expected none, lstm, or onlstm")),
        }
    }
}

// ── Recurrent cells ──────────────────────────────────────────────────────

const GATES: [&str; 4] = ["i", "f", "g", "o"];
const MASTER_GATES: [&str; 2] = ["mf", "mi"];

/// Tape bindings of one LSTM cell (input, forget, cell, output gates).
#[derive(Debug, Clone)]
pub struct LstmWeights {
    wx: [TensorId; 4],
    wh: [TensorId; 4],
    b: [TensorId; 4],
    hidden: usize,
}

impl LstmWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) {
        for gate in GATES {
            store.insert_tensor(&format!("{prefix}.wx.{gate}"), uniform_init(input, hidden, rng));
            store.insert_tensor(&format!("{prefix}.wh.{gate}"), uniform_init(hidden, hidden, rng));
            store.insert(&format!("{prefix}.b.{gate}"), Parameter::zeros(vec![hidden]));
        }
    }

    pub fn bind(bound: &BoundParams, prefix: &str, tape: &Tape) -> Self {
        let pick = |gate: &str, part: &str| bound.id(&format!("{prefix}.{part}.{gate}"));
        let wx = GATES.map(|g| pick(g, "wx"));
        let wh = GATES.map(|g| pick(g, "wh"));
        let b = GATES.map(|g| pick(g, "b"));
        let hidden = tape.shape(b[0])[0];
        LstmWeights { wx, wh, b, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn gate_preact(&self, tape: &mut Tape, idx: usize, x: TensorId, h: TensorId) -> TensorId {
        let from_x = tape.matmul(x, self.wx[idx]);
        let from_h = tape.matmul(h, self.wh[idx]);
        let sum = tape.add(from_x, from_h);
        tape.add_bias(sum, self.b[idx])
    }

    /// One step over a `[1, input]` row; returns the next `(h, c)`.
    pub fn step(
        &self,
        tape: &mut Tape,
        x: TensorId,
        h: TensorId,
        c: TensorId,
    ) -> (TensorId, TensorId) {
        let pre_i = self.gate_preact(tape, 0, x, h);
        let pre_f = self.gate_preact(tape, 1, x, h);
        let pre_g = self.gate_preact(tape, 2, x, h);
        let pre_o = self.gate_preact(tape, 3, x, h);
        let i = tape.sigmoid(pre_i);
        let f = tape.sigmoid(pre_f);
        let g = tape.tanh(pre_g);
        let o = tape.sigmoid(pre_o);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        let c_next = tape.add(keep, write);
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act);
        (h_next, c_next)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (TensorId, TensorId) {
        let h = tape.constant(vec![1, self.hidden], vec![0.0; self.hidden]);
        let c = tape.constant(vec![1, self.hidden], vec![0.0; self.hidden]);
        (h, c)
    }
}

/// Ordered-neurons LSTM: a standard cell plus two master gates built with
/// the cumulative softmax, which makes each master gate monotone
/// nondecreasing from 0 toward 1 along the hidden dimension (chunk factor 1).
#[derive(Debug, Clone)]
pub struct OnLstmWeights {
    base: LstmWeights,
    wx: [TensorId; 2],
    wh: [TensorId; 2],
    b: [TensorId; 2],
}

/// One ordered-neurons step, with the master-gate activations exposed.
pub struct OnLstmStep {
    pub h: TensorId,
    pub c: TensorId,
    /// cumax of the master-forget preactivation.
    pub master_forget: TensorId,
    /// cumax of the master-input preactivation; the effective input gate is
    /// its complement.
    pub master_input_cumax: TensorId,
}

impl OnLstmWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) {
        LstmWeights::init(store, prefix, input, hidden, rng);
        for gate in MASTER_GATES {
            store.insert_tensor(&format!("{prefix}.wx.{gate}"), uniform_init(input, hidden, rng));
            store.insert_tensor(&format!("{prefix}.wh.{gate}"), uniform_init(hidden, hidden, rng));
            store.insert(&format!("{prefix}.b.{gate}"), Parameter::zeros(vec![hidden]));
        }
    }

    pub fn bind(bound: &BoundParams, prefix: &str, tape: &Tape) -> Self {
        let base = LstmWeights::bind(bound, prefix, tape);
        let pick = |gate: &str, part: &str| bound.id(&format!("{prefix}.{part}.{gate}"));
        OnLstmWeights {
            base,
            wx: MASTER_GATES.map(|g| pick(g, "wx")),
            wh: MASTER_GATES.map(|g| pick(g, "wh")),
            b: MASTER_GATES.map(|g| pick(g, "b")),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (TensorId, TensorId) {
        self.base.zero_state(tape)
    }

    fn cumax(&self, tape: &mut Tape, idx: usize, x: TensorId, h: TensorId) -> TensorId {
        let from_x = tape.matmul(x, self.wx[idx]);
        let from_h = tape.matmul(h, self.wh[idx]);
        let sum = tape.add(from_x, from_h);
        let pre = tape.add_bias(sum, self.b[idx]);
        let soft = tape.softmax_rows(pre);
        tape.cumsum_rows(soft)
    }

    pub fn step(&self, tape: &mut Tape, x: TensorId, h: TensorId, c: TensorId) -> OnLstmStep {
        let hidden = self.base.hidden;
        let pre_i = self.base.gate_preact(tape, 0, x, h);
        let pre_f = self.base.gate_preact(tape, 1, x, h);
        let pre_g = self.base.gate_preact(tape, 2, x, h);
        let pre_o = self.base.gate_preact(tape, 3, x, h);
        let i = tape.sigmoid(pre_i);
        let f = tape.sigmoid(pre_f);
        let g = tape.tanh(pre_g);
        let o = tape.sigmoid(pre_o);

        let master_forget = self.cumax(tape, 0, x, h);
        let master_input_cumax = self.cumax(tape, 1, x, h);
        let ones = tape.constant(vec![1, hidden], vec![1.0; hidden]);
        let master_input = tape.sub(ones, master_input_cumax);

        let overlap = tape.mul(master_forget, master_input);
        let f_in = tape.mul(f, overlap);
        let f_out = tape.sub(master_forget, overlap);
        let f_hat = tape.add(f_in, f_out);
        let i_in = tape.mul(i, overlap);
        let i_out = tape.sub(master_input, overlap);
        let i_hat = tape.add(i_in, i_out);

        let keep = tape.mul(f_hat, c);
        let write = tape.mul(i_hat, g);
        let c_next = tape.add(keep, write);
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act);
        OnLstmStep { h: h_next, c: c_next, master_forget, master_input_cumax }
    }
}

// ── Composition ──────────────────────────────────────────────────────────

/// Tape bindings for one composition function; parameters are shared by all
/// phrases of the granularity group.
#[derive(Debug, Clone)]
pub enum CompositionWeights {
    MaxPool,
    Recurrent(LstmWeights),
    Attentive { wq: TensorId, wk: TensorId, wv: TensorId },
}

impl CompositionWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: CompositionKind,
        dim: usize,
        rng: &mut impl Rng,
    ) {
        match kind {
            CompositionKind::MaxPool => {}
            CompositionKind::Recurrent => LstmWeights::init(store, prefix, dim, dim, rng),
            CompositionKind::AttentivePool => {
                for name in ["wq", "wk", "wv"] {
                    store.insert_tensor(&format!("{prefix}.{name}"), uniform_init(dim, dim, rng));
                }
            }
        }
    }

    pub fn bind(bound: &BoundParams, prefix: &str, kind: CompositionKind, tape: &Tape) -> Self {
        match kind {
            CompositionKind::MaxPool => CompositionWeights::MaxPool,
            CompositionKind::Recurrent => {
                CompositionWeights::Recurrent(LstmWeights::bind(bound, prefix, tape))
            }
            CompositionKind::AttentivePool => CompositionWeights::Attentive {
                wq: bound.id(&format!("{prefix}.wq")),
                wk: bound.id(&format!("{prefix}.wk")),
                wv: bound.id(&format!("{prefix}.wv")),
            },
        }
    }
}

/// Collapses a `[l, d]` phrase slice into a `[1, d]` vector. Rows flagged in
/// `pad_mask` are dropped before any arithmetic, which realizes exact pad
/// masking: padded values cannot influence the output at all.
pub fn compose(
    tape: &mut Tape,
    slice: TensorId,
    pad_mask: &[bool],
    weights: &CompositionWeights,
) -> TensorId {
    let rows = tape.tensor(slice).rows();
    assert_eq!(
        pad_mask.len(),
        rows,
        "pad mask has {} entries for {} phrase rows",
        pad_mask.len(),
        rows
    );
    assert!(!pad_mask.iter().all(|&p| p), "phrase must contain at least one real token");
    let real = gather_unpadded(tape, slice, pad_mask);
    match weights {
        CompositionWeights::MaxPool => tape.max_over_axis(real, 0),
        CompositionWeights::Recurrent(lstm) => {
            let (mut h, mut c) = lstm.zero_state(tape);
            let l = tape.tensor(real).rows();
            for t in 0..l {
                let x = tape.slice_rows(real, t, t + 1);
                (h, c) = lstm.step(tape, x, h, c);
            }
            h
        }
        CompositionWeights::Attentive { wq, wk, wv } => {
            let d = tape.tensor(real).cols();
            let pooled = tape.max_over_axis(real, 0);
            let q = tape.matmul(pooled, *wq);
            let k = tape.matmul(real, *wk);
            let v = tape.matmul(real, *wv);
            let k_t = tape.transpose(k);
            let raw = tape.matmul(q, k_t);
            let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            tape.matmul(attn, v)
        }
    }
}

fn gather_unpadded(tape: &mut Tape, slice: TensorId, pad_mask: &[bool]) -> TensorId {
    if pad_mask.iter().all(|&p| !p) {
        return slice;
    }
    let kept: Vec<TensorId> = pad_mask
        .iter()
        .enumerate()
        .filter(|(_, &p)| !p)
        .map(|(i, _)| tape.slice_rows(slice, i, i + 1))
        .collect();
    tape.concat_rows(&kept)
}

// ── Interaction ──────────────────────────────────────────────────────────

/// Tape bindings for the interaction over the phrase sequence.
#[derive(Debug, Clone)]
pub enum InteractionWeights {
    None,
    Recurrent(LstmWeights),
    OrderedNeurons(OnLstmWeights),
}

impl InteractionWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: InteractionKind,
        dim: usize,
        rng: &mut impl Rng,
    ) {
        match kind {
            InteractionKind::None => {}
            InteractionKind::RecurrentChain => LstmWeights::init(store, prefix, dim, dim, rng),
            InteractionKind::OrderedNeuronsChain => {
                OnLstmWeights::init(store, prefix, dim, dim, rng)
            }
        }
    }

    pub fn bind(bound: &BoundParams, prefix: &str, kind: InteractionKind, tape: &Tape) -> Self {
        match kind {
            InteractionKind::None => InteractionWeights::None,
            InteractionKind::RecurrentChain => {
                InteractionWeights::Recurrent(LstmWeights::bind(bound, prefix, tape))
            }
            InteractionKind::OrderedNeuronsChain => {
                InteractionWeights::OrderedNeurons(OnLstmWeights::bind(bound, prefix, tape))
            }
        }
    }
}

/// Runs the phrase sequence `[M, d]` through the configured chain, returning
/// the per-phrase hidden states. `None` returns the input node unchanged.
pub fn interact(tape: &mut Tape, memory: TensorId, weights: &InteractionWeights) -> TensorId {
    match weights {
        InteractionWeights::None => memory,
        InteractionWeights::Recurrent(lstm) => {
            let m = tape.tensor(memory).rows();
            let (mut h, mut c) = lstm.zero_state(tape);
            let mut states = Vec::with_capacity(m);
            for i in 0..m {
                let x = tape.slice_rows(memory, i, i + 1);
                (h, c) = lstm.step(tape, x, h, c);
                states.push(h);
            }
            tape.concat_rows(&states)
        }
        InteractionWeights::OrderedNeurons(cell) => {
            let m = tape.tensor(memory).rows();
            let (mut h, mut c) = cell.zero_state(tape);
            let mut states = Vec::with_capacity(m);
            for i in 0..m {
                let x = tape.slice_rows(memory, i, i + 1);
                let step = cell.step(tape, x, h, c);
                h = step.h;
                c = step.c;
                states.push(h);
            }
            tape.concat_rows(&states)
        }
    }
}

// ── Whole-group pipeline ─────────────────────────────────────────────────

/// Trainable pieces of one granularity group's memory function.
#[derive(Debug, Clone)]
pub struct GroupWeights {
    pub proj: TensorId,
    pub composition: CompositionWeights,
    pub interaction: InteractionWeights,
}

impl GroupWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_group: usize,
        comp: CompositionKind,
        inter: InteractionKind,
        rng: &mut impl Rng,
    ) {
        store.insert_tensor(&format!("{prefix}.proj"), uniform_init(d_model, d_group, rng));
        CompositionWeights::init(store, &format!("{prefix}.comp"), comp, d_group, rng);
        InteractionWeights::init(store, &format!("{prefix}.inter"), inter, d_group, rng);
    }

    pub fn bind(
        bound: &BoundParams,
        prefix: &str,
        comp: CompositionKind,
        inter: InteractionKind,
        tape: &Tape,
    ) -> Self {
        GroupWeights {
            proj: bound.id(&format!("{prefix}.proj")),
            composition: CompositionWeights::bind(bound, &format!("{prefix}.comp"), comp, tape),
            interaction: InteractionWeights::bind(bound, &format!("{prefix}.inter"), inter, tape),
        }
    }
}

/// Phrase memory of one granularity group for one sentence.
pub struct PhraseMemory {
    pub partition: PhrasePartition,
    /// `[M, d]` memory after composition, before interaction; tag
    /// supervision reads this node.
    pub composed: TensorId,
    /// `[M, d]` memory the group's heads attend over.
    pub memory: TensorId,
}

/// Builds the phrase memory for `spec` from token states `h` (`[T, d_model]`).
/// Word level returns `h` unchanged with one span per token. Phrase levels
/// project into the group width, then compose each partition slice, then
/// interact: the padded tail of the last n-gram block is masked out of
/// composition.
pub fn build_phrase_memory(
    tape: &mut Tape,
    h: TensorId,
    spec: GranularitySpec,
    tree: Option<&ParseTree>,
    weights: Option<&GroupWeights>,
) -> Result<PhraseMemory, PhraseError> {
    let t = tape.tensor(h).rows();
    let partition = match spec {
        GranularitySpec::WordLevel => {
            return Ok(PhraseMemory {
                partition: PhrasePartition::word_level(t),
                composed: h,
                memory: h,
            });
        }
        GranularitySpec::NGram(n) => ngram_partition(t, n)?,
        GranularitySpec::SyntacticLayer(k) => {
            let tree = tree.ok_or(PhraseError::MissingTree)?;
            if tree.token_count() != t {
                return Err(PhraseError::TokenMismatch {
                    tree_tokens: tree.token_count(),
                    rows: t,
                });
            }
            syntactic_partition(tree, k)
        }
    };
    let weights = weights.expect("phrase granularities require group weights");
    let d_group = tape.tensor(weights.proj).cols();
    let projected = tape.matmul(h, weights.proj);

    let last = partition.len() - 1;
    let mut phrases = Vec::with_capacity(partition.len());
    for (idx, &(a, b)) in partition.spans.iter().enumerate() {
        let body = tape.slice_rows(projected, a, b);
        let pad = if idx == last { partition.pad_len } else { 0 };
        let (slice, mask) = if pad > 0 {
            let filler = tape.constant(vec![pad, d_group], vec![0.0; pad * d_group]);
            let padded = tape.concat_rows(&[body, filler]);
            let mut mask = vec![false; b - a];
            mask.extend(std::iter::repeat_n(true, pad));
            (padded, mask)
        } else {
            (body, vec![false; b - a])
        };
        phrases.push(compose(tape, slice, &mask, &weights.composition));
    }
    let composed = tape.concat_rows(&phrases);
    let memory = interact(tape, composed, &weights.interaction);
    Ok(PhraseMemory { partition, composed, memory })
}
