//! Benchmarks for partition construction and the encoder's forward and
//! forward-plus-backward passes, comparing the word-only layout against
//! the syntactic multi-granularity layout.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use mgsa_bench::{sample_sentences, syntactic_config, token_ids, word_only_config};
use mgsa_core::attention::{encoder_forward, init_model, ModelConfig};
use mgsa_core::partition::{ngram_partition, syntactic_partition};
use mgsa_core::tensor::{seeded_rng, Tape};
use mgsa_core::treebank::LabeledExample;

fn bench_partitions(c: &mut Criterion) {
    let sentences = sample_sentences(64);
    let mut group = c.benchmark_group("partition");
    group.bench_function("ngram_n3", |b| {
        let mut i = 0;
        b.iter(|| {
            let t = sentences[i % sentences.len()].tokens.len();
            i += 1;
            black_box(ngram_partition(black_box(t), 3).unwrap())
        });
    });
    group.bench_function("syntactic_k2", |b| {
        let mut i = 0;
        b.iter(|| {
            let tree = &sentences[i % sentences.len()].tree;
            i += 1;
            black_box(syntactic_partition(black_box(tree), 2))
        });
    });
    group.finish();
}

fn run_encoder(config: &ModelConfig, ex: &LabeledExample, backward: bool) -> f64 {
    let store = init_model(config, &mut seeded_rng(11)).unwrap();
    let tokens = token_ids(ex, config.vocab_size);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = encoder_forward(&mut tape, &bound, config, &tokens, Some(&ex.tree)).unwrap();
    let loss = tape.sum_all(out.states);
    if backward {
        tape.backward(loss);
    }
    tape.data(loss)[0]
}

fn bench_encoder(c: &mut Criterion) {
    let sentences = sample_sentences(8);
    let configs = [("word_only", word_only_config()), ("syntactic", syntactic_config())];
    for phase in ["forward", "forward_backward"] {
        let mut group = c.benchmark_group(phase);
        for (name, config) in &configs {
            group.bench_function(*name, |b| {
                let mut i = 0;
                b.iter(|| {
                    let ex = &sentences[i % sentences.len()];
                    i += 1;
                    black_box(run_encoder(config, ex, phase == "forward_backward"))
                });
            });
        }
        group.finish();
    }
}

criterion_group!(benches, bench_partitions, bench_encoder);
criterion_main!(benches);
