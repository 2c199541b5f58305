//! The multi-granularity encoder.
//!
//! A Transformer-style encoder whose attention heads are split into
//! granularity groups. Word-level heads attend over the token states as
//! usual; each phrase-level group first builds a phrase memory for its
//! granularity (n-gram blocks or one syntactic layer) and its heads attend
//! over that memory instead, so a single layer can mix token-to-token and
//! token-to-phrase attention. Layers outside `mg_layers` run with every
//! head at word level.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{BoundParams, ParamStore, Parameter};
use crate::partition::GranularitySpec;
use crate::phrase::{
    build_phrase_memory, CompositionKind, GroupWeights, InteractionKind, PhraseError,
};
use crate::tensor::{uniform_init, Tape, TensorId};
use crate::treebank::ParseTree;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the position table ({max})")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Phrase(#[from] PhraseError),
}

/// Encoder hyperparameters. The `granularities` list controls the head split
/// inside the layers named by `mg_layers`; every other layer attends purely
/// word to word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub granularities: Vec<GranularitySpec>,
    pub composition: CompositionKind,
    pub interaction: InteractionKind,
    pub mg_layers: Vec<usize>,
    /// Size of the phrase-tag vocabulary; 0 disables the tag classifiers.
    pub tag_vocab: usize,
    pub pre_norm: bool,
    pub learned_positions: bool,
}

impl ModelConfig {
    /// Desk-scale defaults with every layer multi-granularity.
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            d_ff: 256,
            max_len: 64,
            granularities: vec![GranularitySpec::WordLevel],
            composition: CompositionKind::AttentivePool,
            interaction: InteractionKind::None,
            mg_layers: (0..3).collect(),
            tag_vocab: 0,
            pre_norm: true,
            learned_positions: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads, n_layers, and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        for spec in &self.granularities {
            spec.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        for &l in &self.mg_layers {
            if l >= self.n_layers {
                return fail(format!("mg layer {l} out of range for {} layers", self.n_layers));
            }
        }
        HeadAssignment::quartered(self.n_heads, &self.granularities)?;
        Ok(())
    }

    /// Head split used inside layer `layer`.
    pub fn layer_assignment(&self, layer: usize) -> HeadAssignment {
        if self.mg_layers.contains(&layer) {
            HeadAssignment::quartered(self.n_heads, &self.granularities).expect("validated config")
        } else {
            HeadAssignment::word_only(self.n_heads)
        }
    }
}

/// How a layer's heads divide into granularity groups. Heads are numbered
/// contiguously group by group, word level first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadAssignment {
    groups: Vec<(GranularitySpec, usize)>,
}

impl HeadAssignment {
    pub fn word_only(n_heads: usize) -> Self {
        HeadAssignment { groups: vec![(GranularitySpec::WordLevel, n_heads)] }
    }

    /// Splits `n_heads` so that each phrase granularity receives a quarter
    /// of the heads (rounded down) and word level keeps the remainder.
    /// Every group must end up with at least one head, and word level must
    /// be listed exactly once.
    pub fn quartered(
        n_heads: usize,
        granularities: &[GranularitySpec],
    ) -> Result<Self, ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if granularities.is_empty() {
            return fail("granularity list is empty".into());
        }
        let words = granularities.iter().filter(|s| !s.is_phrase()).count();
        if words != 1 {
            return fail(format!("expected word level exactly once, found it {words} times"));
        }
        let phrases: Vec<GranularitySpec> =
            granularities.iter().copied().filter(|s| s.is_phrase()).collect();
        for (i, a) in phrases.iter().enumerate() {
            if phrases[..i].contains(a) {
                return fail(format!("granularity {a} listed twice"));
            }
        }
        if phrases.is_empty() {
            return Ok(Self::word_only(n_heads));
        }
        let per_phrase = n_heads / 4;
        if per_phrase == 0 {
            return fail(format!("{n_heads} heads cannot give each phrase granularity a quarter"));
        }
        let word_heads = n_heads as i64 - (phrases.len() * per_phrase) as i64;
        if word_heads < 1 {
            return fail(format!(
                "{} phrase granularities with {per_phrase} heads each leave no word head of {n_heads}",
                phrases.len()
            ));
        }
        let mut groups = vec![(GranularitySpec::WordLevel, word_heads as usize)];
        groups.extend(phrases.into_iter().map(|s| (s, per_phrase)));
        Ok(HeadAssignment { groups })
    }

    pub fn groups(&self) -> &[(GranularitySpec, usize)] {
        &self.groups
    }

    pub fn n_heads(&self) -> usize {
        self.groups.iter().map(|&(_, n)| n).sum()
    }

    /// Granularity of each head in order.
    pub fn head_specs(&self) -> Vec<GranularitySpec> {
        self.groups.iter().flat_map(|&(spec, n)| std::iter::repeat_n(spec, n)).collect()
    }

    pub fn is_all_word(&self) -> bool {
        self.groups.iter().all(|(s, _)| !s.is_phrase())
    }
}

// ── Parameter construction ───────────────────────────────────────────────

fn ln_params(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.gamma"), Parameter { shape: vec![dim], data: vec![1.0; dim] });
    store.insert(&format!("{prefix}.beta"), Parameter::zeros(vec![dim]));
}

/// Creates every trainable tensor of the encoder. Weights draw from `rng`
/// in a fixed creation order, so one seed yields one model.
pub fn init_model(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore, ModelError> {
    config.validate()?;
    let d = config.d_model;
    let d_h = config.head_dim();
    let mut store = ParamStore::new();
    store.insert_tensor("embed.tok", uniform_init(config.vocab_size, d, rng));
    if config.learned_positions {
        store.insert_tensor("embed.pos", uniform_init(config.max_len, d, rng));
    }
    for l in 0..config.n_layers {
        let assignment = config.layer_assignment(l);
        ln_params(&mut store, &format!("enc.l{l}.ln1"), d);
        let mut head = 0;
        for &(spec, count) in assignment.groups() {
            let kv_in = if spec.is_phrase() { d_h } else { d };
            for _ in 0..count {
                let p = format!("enc.l{l}.attn.h{head}");
                store.insert_tensor(&format!("{p}.wq"), uniform_init(d, d_h, rng));
                store.insert_tensor(&format!("{p}.wk"), uniform_init(kv_in, d_h, rng));
                store.insert_tensor(&format!("{p}.wv"), uniform_init(kv_in, d_h, rng));
                head += 1;
            }
        }
        store.insert_tensor(&format!("enc.l{l}.attn.wo"), uniform_init(d, d, rng));
        for &(spec, _) in assignment.groups() {
            if !spec.is_phrase() {
                continue;
            }
            let p = format!("enc.l{l}.attn.g{spec}");
            GroupWeights::init(&mut store, &p, d, d_h, config.composition, config.interaction, rng);
            if config.tag_vocab > 0 && matches!(spec, GranularitySpec::SyntacticLayer(_)) {
                store
                    .insert_tensor(&format!("{p}.tag.w"), uniform_init(d_h, config.tag_vocab, rng));
                store.insert(&format!("{p}.tag.b"), Parameter::zeros(vec![config.tag_vocab]));
            }
        }
        ln_params(&mut store, &format!("enc.l{l}.ln2"), d);
        store.insert_tensor(&format!("enc.l{l}.ffn.w1"), uniform_init(d, config.d_ff, rng));
        store.insert(&format!("enc.l{l}.ffn.b1"), Parameter::zeros(vec![config.d_ff]));
        store.insert_tensor(&format!("enc.l{l}.ffn.w2"), uniform_init(config.d_ff, d, rng));
        store.insert(&format!("enc.l{l}.ffn.b2"), Parameter::zeros(vec![d]));
    }
    if config.pre_norm {
        ln_params(&mut store, "enc.final_ln", d);
    }
    Ok(store)
}

// ── Forward pass ─────────────────────────────────────────────────────────

/// Sinusoidal position table for `t` positions of width `d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Vec<f64> {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    data
}

/// Attention of every query row over a shared memory: returns the context
/// `[T, d_h]` and the row-stochastic weights `[T, M]`.
pub fn attention_head(
    tape: &mut Tape,
    queries: TensorId,
    memory: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
) -> (TensorId, TensorId) {
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(memory, wk);
    let v = tape.matmul(memory, wv);
    let d_h = tape.tensor(q).cols();
    let k_t = tape.transpose(k);
    let raw = tape.matmul(q, k_t);
    let scaled = tape.scale(raw, 1.0 / (d_h as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let out = tape.matmul(attn, v);
    (out, attn)
}

/// Attention pattern of one head for one sentence.
#[derive(Debug)]
pub struct HeadAttention {
    pub head: usize,
    pub granularity: GranularitySpec,
    /// `[T, M]` row-stochastic weights over the head's memory slots.
    pub weights: TensorId,
    /// Token span of each memory slot.
    pub spans: Vec<(usize, usize)>,
    pub tags: Option<Vec<String>>,
}

/// Tag classifier logits for one phrase group of one layer.
#[derive(Debug)]
pub struct TagOutput {
    pub layer: usize,
    pub granularity: GranularitySpec,
    /// `[M, tag_vocab]` logits over the composed (pre-interaction) memory.
    pub logits: TensorId,
    pub spans: Vec<(usize, usize)>,
    /// Gold constituent labels when the granularity provides them.
    pub tags: Option<Vec<String>>,
}

#[derive(Debug)]
pub struct LayerAttention {
    pub layer: usize,
    pub heads: Vec<HeadAttention>,
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// `[T, d_model]` final token states.
    pub states: TensorId,
    pub tag_outputs: Vec<TagOutput>,
    pub attention: Vec<LayerAttention>,
}

/// One grouped attention sublayer: builds each group's memory once, runs its
/// heads over it, concatenates all heads, and applies the output projection.
pub fn grouped_attention_sublayer(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    layer: usize,
    h: TensorId,
    tree: Option<&ParseTree>,
) -> Result<(TensorId, Vec<HeadAttention>, Vec<TagOutput>), ModelError> {
    let assignment = config.layer_assignment(layer);
    let attn_prefix = format!("enc.l{layer}.attn");
    let mut head_outs = Vec::with_capacity(config.n_heads);
    let mut patterns = Vec::with_capacity(config.n_heads);
    let mut tag_outputs = Vec::new();
    let mut head = 0;
    for &(spec, count) in assignment.groups() {
        let (memory, spans, tags) = if spec.is_phrase() {
            let gp = format!("{attn_prefix}.g{spec}");
            let weights =
                GroupWeights::bind(bound, &gp, config.composition, config.interaction, tape);
            let pm = build_phrase_memory(tape, h, spec, tree, Some(&weights))?;
            if config.tag_vocab > 0 && matches!(spec, GranularitySpec::SyntacticLayer(_)) {
                let w = bound.id(&format!("{gp}.tag.w"));
                let b = bound.id(&format!("{gp}.tag.b"));
                let proj = tape.matmul(pm.composed, w);
                let logits = tape.add_bias(proj, b);
                tag_outputs.push(TagOutput {
                    layer,
                    granularity: spec,
                    logits,
                    spans: pm.partition.spans.clone(),
                    tags: pm.partition.tags.clone(),
                });
            }
            (pm.memory, pm.partition.spans, pm.partition.tags)
        } else {
            let t = tape.tensor(h).rows();
            (h, (0..t).map(|i| (i, i + 1)).collect(), None)
        };
        for _ in 0..count {
            let p = format!("{attn_prefix}.h{head}");
            let wq = bound.id(&format!("{p}.wq"));
            let wk = bound.id(&format!("{p}.wk"));
            let wv = bound.id(&format!("{p}.wv"));
            let (out, attn) = attention_head(tape, h, memory, wq, wk, wv);
            head_outs.push(out);
            patterns.push(HeadAttention {
                head,
                granularity: spec,
                weights: attn,
                spans: spans.clone(),
                tags: tags.clone(),
            });
            head += 1;
        }
    }
    let concat = tape.concat_last_dim(&head_outs);
    let wo = bound.id(&format!("{attn_prefix}.wo"));
    let projected = tape.matmul(concat, wo);
    Ok((projected, patterns, tag_outputs))
}

/// Reference multi-head self-attention over single tokens, written as one
/// straight-line computation so the grouped path can be checked against it.
/// Reads the same `enc.l{layer}.attn` weights.
pub fn vanilla_attention_sublayer(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: usize,
    n_heads: usize,
    h: TensorId,
) -> TensorId {
    let mut outs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let p = format!("enc.l{layer}.attn.h{head}");
        let wq = bound.id(&format!("{p}.wq"));
        let wk = bound.id(&format!("{p}.wk"));
        let wv = bound.id(&format!("{p}.wv"));
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let d_h = tape.tensor(q).cols();
        let k_t = tape.transpose(k);
        let raw = tape.matmul(q, k_t);
        let scaled = tape.scale(raw, 1.0 / (d_h as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        outs.push(tape.matmul(attn, v));
    }
    let concat = tape.concat_last_dim(&outs);
    let wo = bound.id(&format!("enc.l{layer}.attn.wo"));
    tape.matmul(concat, wo)
}

fn ffn_sublayer(tape: &mut Tape, bound: &BoundParams, layer: usize, x: TensorId) -> TensorId {
    let w1 = bound.id(&format!("enc.l{layer}.ffn.w1"));
    let b1 = bound.id(&format!("enc.l{layer}.ffn.b1"));
    let w2 = bound.id(&format!("enc.l{layer}.ffn.w2"));
    let b2 = bound.id(&format!("enc.l{layer}.ffn.b2"));
    let a = tape.matmul(x, w1);
    let a = tape.add_bias(a, b1);
    let a = tape.relu(a);
    let a = tape.matmul(a, w2);
    tape.add_bias(a, b2)
}

fn ln(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: TensorId) -> TensorId {
    let gamma = bound.id(&format!("{prefix}.gamma"));
    let beta = bound.id(&format!("{prefix}.beta"));
    tape.layer_norm(x, gamma, beta)
}

/// Runs the encoder over one sentence. `tree` is required whenever an active
/// granularity needs syntax. Returns the final states plus every tag logit
/// block and attention pattern produced along the way.
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    tokens: &[usize],
    tree: Option<&ParseTree>,
) -> Result<EncoderOutput, ModelError> {
    assert!(!tokens.is_empty(), "cannot encode an empty sentence");
    let t = tokens.len();
    if t > config.max_len {
        return Err(ModelError::TooLong { len: t, max: config.max_len });
    }
    let d = config.d_model;
    let embedded = tape.embedding_lookup(bound.id("embed.tok"), tokens);
    let scaled = tape.scale(embedded, (d as f64).sqrt());
    let positions = if config.learned_positions {
        tape.slice_rows(bound.id("embed.pos"), 0, t)
    } else {
        tape.constant(vec![t, d], sinusoidal_positions(t, d))
    };
    let mut x = tape.add(scaled, positions);

    let mut tag_outputs = Vec::new();
    let mut attention = Vec::new();
    for l in 0..config.n_layers {
        let ln1 = format!("enc.l{l}.ln1");
        let ln2 = format!("enc.l{l}.ln2");
        if config.pre_norm {
            let a_in = ln(tape, bound, &ln1, x);
            let (a, heads, tags) = grouped_attention_sublayer(tape, bound, config, l, a_in, tree)?;
            x = tape.add(x, a);
            let f_in = ln(tape, bound, &ln2, x);
            let f = ffn_sublayer(tape, bound, l, f_in);
            x = tape.add(x, f);
            tag_outputs.extend(tags);
            attention.push(LayerAttention { layer: l, heads });
        } else {
            let (a, heads, tags) = grouped_attention_sublayer(tape, bound, config, l, x, tree)?;
            let sum = tape.add(x, a);
            x = ln(tape, bound, &ln1, sum);
            let f = ffn_sublayer(tape, bound, l, x);
            let sum = tape.add(x, f);
            x = ln(tape, bound, &ln2, sum);
            tag_outputs.extend(tags);
            attention.push(LayerAttention { layer: l, heads });
        }
    }
    if config.pre_norm {
        x = ln(tape, bound, "enc.final_ln", x);
    }
    Ok(EncoderOutput { states: x, tag_outputs, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_parameter_gradients, MODEL_TOLERANCE};
    use crate::tensor::seeded_rng;
    use crate::treebank::parse_bracketed;
    use std::collections::BTreeMap;

    fn mg_config() -> ModelConfig {
        let mut config = ModelConfig::new(10);
        config.d_model = 8;
        config.n_heads = 4;
        config.n_layers = 2;
        config.d_ff = 16;
        config.max_len = 16;
        config.granularities = vec![
            GranularitySpec::WordLevel,
            GranularitySpec::NGram(2),
            GranularitySpec::SyntacticLayer(1),
            GranularitySpec::SyntacticLayer(2),
        ];
        config.interaction = InteractionKind::OrderedNeuronsChain;
        config.mg_layers = vec![0, 1];
        config.tag_vocab = 3;
        config
    }

    fn sample_tree() -> ParseTree {
        parse_bracketed("(S (NP Bush) (VP (VBD held) (NP a talk) (PP with Sharon)))").unwrap()
    }

    #[test]
    fn quarter_rule_gives_each_phrase_group_a_quarter() {
        let gs = [
            GranularitySpec::WordLevel,
            GranularitySpec::NGram(2),
            GranularitySpec::SyntacticLayer(1),
            GranularitySpec::SyntacticLayer(2),
        ];
        let a = HeadAssignment::quartered(8, &gs).unwrap();
        let counts: Vec<usize> = a.groups().iter().map(|&(_, n)| n).collect();
        assert_eq!(counts, [2, 2, 2, 2]);
        assert_eq!(a.groups()[0].0, GranularitySpec::WordLevel);

        let a = HeadAssignment::quartered(4, &gs).unwrap();
        let counts: Vec<usize> = a.groups().iter().map(|&(_, n)| n).collect();
        assert_eq!(counts, [1, 1, 1, 1]);

        let a = HeadAssignment::quartered(7, &gs).unwrap();
        let counts: Vec<usize> = a.groups().iter().map(|&(_, n)| n).collect();
        assert_eq!(counts, [4, 1, 1, 1]);
        assert_eq!(a.n_heads(), 7);

        assert!(HeadAssignment::quartered(3, &gs).is_err());
        assert!(HeadAssignment::quartered(4, &gs[1..]).is_err());
        assert!(HeadAssignment::quartered(4, &[gs[0], gs[1], gs[1]]).is_err());
        let word_only = HeadAssignment::quartered(5, &gs[..1]).unwrap();
        assert!(word_only.is_all_word());
        assert_eq!(word_only.head_specs().len(), 5);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = mg_config();
        let a = init_model(&config, &mut seeded_rng(11)).unwrap();
        let b = init_model(&config, &mut seeded_rng(11)).unwrap();
        let c = init_model(&config, &mut seeded_rng(12)).unwrap();
        let flat = |s: &ParamStore| {
            s.iter().map(|(n, p)| (n.to_string(), p.data.clone())).collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn position_table_starts_with_the_zero_one_pattern() {
        let table = sinusoidal_positions(3, 4);
        assert_eq!(&table[..4], &[0.0, 1.0, 0.0, 1.0]);
        let expect = [1f64.sin(), 1f64.cos(), (1.0 / 100.0f64).sin(), (1.0 / 100.0f64).cos()];
        for (got, want) in table[4..8].iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn every_attention_row_is_stochastic_and_spans_match() {
        let config = mg_config();
        let store = init_model(&config, &mut seeded_rng(5)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tree = sample_tree();
        let out =
            encoder_forward(&mut tape, &bound, &config, &[1, 2, 3, 4, 5, 6], Some(&tree)).unwrap();
        assert_eq!(tape.shape(out.states), &[6, 8]);
        assert_eq!(out.attention.len(), 2);
        for layer in &out.attention {
            assert_eq!(layer.heads.len(), 4);
            for head in &layer.heads {
                let shape = tape.shape(head.weights).to_vec();
                assert_eq!(shape[0], 6);
                assert_eq!(shape[1], head.spans.len());
                if !head.granularity.is_phrase() {
                    assert_eq!(shape[1], 6);
                }
                for row in tape.data(head.weights).chunks(shape[1]) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
                }
            }
        }
        // One tag block per syntactic group per layer.
        assert_eq!(out.tag_outputs.len(), 4);
        assert_eq!(tape.shape(out.tag_outputs[0].logits)[1], 3);
    }

    #[test]
    fn single_token_sentences_attend_with_weight_one() {
        let config = mg_config();
        let store = init_model(&config, &mut seeded_rng(6)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tree = parse_bracketed("(S (NP Bush))").unwrap();
        let out = encoder_forward(&mut tape, &bound, &config, &[3], Some(&tree)).unwrap();
        for layer in &out.attention {
            for head in &layer.heads {
                assert_eq!(tape.data(head.weights), &[1.0]);
            }
        }
    }

    #[test]
    fn identical_keys_attend_uniformly() {
        let config = mg_config();
        let mut store = init_model(&config, &mut seeded_rng(7)).unwrap();
        for h in 0..4 {
            store.get_mut(&format!("enc.l0.attn.h{h}.wk")).data.fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tree = sample_tree();
        let out =
            encoder_forward(&mut tape, &bound, &config, &[1, 2, 3, 4, 5, 6], Some(&tree)).unwrap();
        for head in &out.attention[0].heads {
            let m = head.spans.len() as f64;
            for w in tape.data(head.weights) {
                assert_eq!(*w, 1.0 / m);
            }
        }
    }

    #[test]
    fn word_only_layers_emit_no_tags_and_attend_token_to_token() {
        let mut config = mg_config();
        config.mg_layers = vec![1];
        let store = init_model(&config, &mut seeded_rng(8)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tree = sample_tree();
        let out =
            encoder_forward(&mut tape, &bound, &config, &[1, 2, 3, 4, 5, 6], Some(&tree)).unwrap();
        assert!(out.tag_outputs.iter().all(|t| t.layer == 1));
        assert_eq!(out.tag_outputs.len(), 2);
        for head in &out.attention[0].heads {
            assert_eq!(head.granularity, GranularitySpec::WordLevel);
            assert_eq!(tape.shape(head.weights), &[6, 6]);
        }
        assert!(out.attention[1].heads.iter().any(|h| h.granularity.is_phrase()));

        config.mg_layers = vec![];
        let store = init_model(&config, &mut seeded_rng(8)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = encoder_forward(&mut tape, &bound, &config, &[1, 2, 3], None).unwrap();
        assert!(out.tag_outputs.is_empty());
    }

    #[test]
    fn syntactic_heads_without_a_tree_are_an_error() {
        let config = mg_config();
        let store = init_model(&config, &mut seeded_rng(9)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let err = encoder_forward(&mut tape, &bound, &config, &[1, 2, 3], None).unwrap_err();
        assert!(matches!(err, ModelError::Phrase(PhraseError::MissingTree)));
    }

    #[test]
    fn overlong_sentences_are_rejected() {
        let config = mg_config();
        let store = init_model(&config, &mut seeded_rng(9)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let err = encoder_forward(&mut tape, &bound, &config, &[1; 17], None).unwrap_err();
        assert!(matches!(err, ModelError::TooLong { len: 17, max: 16 }));
    }

    #[test]
    fn all_word_grouped_layer_matches_the_reference_sublayer() {
        let mut config = ModelConfig::new(10);
        config.d_model = 8;
        config.n_heads = 4;
        config.n_layers = 1;
        config.d_ff = 16;
        config.mg_layers = vec![0];
        let store = init_model(&config, &mut seeded_rng(21)).unwrap();
        let mut rng = seeded_rng(22);
        for trial in 0..20 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let t = 1 + (trial % 7);
            let data = (0..t * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = tape.constant(vec![t, 8], data);
            let (grouped, _, _) =
                grouped_attention_sublayer(&mut tape, &bound, &config, 0, h, None).unwrap();
            let vanilla = vanilla_attention_sublayer(&mut tape, &bound, 0, 4, h);
            for (a, b) in tape.data(grouped).iter().zip(tape.data(vanilla)) {
                assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn post_norm_runs_and_differs_from_pre_norm() {
        let mut config = mg_config();
        let pre_store = init_model(&config, &mut seeded_rng(30)).unwrap();
        config.pre_norm = false;
        let post_store = init_model(&config, &mut seeded_rng(30)).unwrap();
        assert!(pre_store.contains("enc.final_ln.gamma"));
        assert!(!post_store.contains("enc.final_ln.gamma"));

        let tree = sample_tree();
        let mut tape = Tape::new();
        let bound = post_store.bind(&mut tape);
        let out =
            encoder_forward(&mut tape, &bound, &config, &[1, 2, 3, 4, 5, 6], Some(&tree)).unwrap();
        assert_eq!(tape.shape(out.states), &[6, 8]);
        for v in tape.data(out.states) {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = mg_config();
        let mut store = init_model(&config, &mut seeded_rng(40)).unwrap();
        // Jitter every weight off its symmetric starting point: with unit
        // gamma and zero beta a normalized row sums to exactly zero, which
        // would hide entire subgraphs from a plain-sum loss.
        let mut jitter = seeded_rng(41);
        for (_, p) in store.iter_mut() {
            for v in &mut p.data {
                *v += jitter.random_range(-0.05..0.05);
            }
        }
        let tree = sample_tree();
        let tokens = [1usize, 2, 3, 4, 5, 6];

        // Projecting each output block against fixed random weights keeps
        // the loss sensitive to every coordinate.
        let forward = |s: &ParamStore, tape: &mut Tape| {
            let bound = s.bind(tape);
            let out = encoder_forward(tape, &bound, &config, &tokens, Some(&tree)).unwrap();
            let mut project = seeded_rng(99);
            let mut blocks = vec![out.states];
            blocks.extend(out.tag_outputs.iter().map(|t| t.logits));
            let mut total = tape.constant(vec![1], vec![0.0]);
            for block in blocks {
                let shape = tape.shape(block).to_vec();
                let n: usize = shape.iter().product();
                let weights = (0..n).map(|_| project.random_range(0.5..1.5)).collect::<Vec<f64>>();
                let r = tape.constant(shape, weights);
                let weighted = tape.mul(block, r);
                let part = tape.sum_all(weighted);
                total = tape.add(total, part);
            }
            (bound, total)
        };
        let loss = |s: &ParamStore| {
            let mut tape = Tape::new();
            let (_, l) = forward(s, &mut tape);
            tape.data(l)[0]
        };
        let grads = |s: &ParamStore| -> BTreeMap<String, Vec<f64>> {
            let mut tape = Tape::new();
            let (bound, l) = forward(s, &mut tape);
            tape.backward(l);
            bound.grads(&tape)
        };
        let reports = check_parameter_gradients(&store, MODEL_TOLERANCE, loss, grads);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.passed(), "{}: rel err {} over {}", r.name, r.rel_err, r.tolerance);
        }
    }
}
