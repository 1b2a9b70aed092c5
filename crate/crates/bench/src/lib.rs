//! Shared fixtures for the benchmarks.

use std::path::{Path, PathBuf};

use rumen::data::{EncodedExample, TextEncoder};
use rumen::harness::{prepare, RunConfig};
use rumen::{Model, QaExample};

pub fn toy_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy_squad.json")
}

/// A freshly initialized desk-profile model with the toy corpus, raw and
/// encoded.
pub fn desk_setup() -> (RunConfig, Model, Vec<QaExample>, Vec<EncodedExample>) {
    let mut cfg = RunConfig::desk();
    cfg.train_path = Some(toy_corpus());
    let p = prepare(&cfg).expect("toy corpus loads");
    let enc = TextEncoder {
        vocab: &p.model.vocab,
        chars: &p.model.chars,
        max_word_len: cfg.max_word_len,
        min_word_len: cfg.filter_width,
        max_context: cfg.max_context,
    };
    let encoded = enc.encode_all(&p.train);
    (cfg, p.model, p.train, encoded)
}
