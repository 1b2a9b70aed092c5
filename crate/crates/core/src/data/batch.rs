//! Id encoding, length-bucketed batching and padding masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::squad::QaExample;
use crate::embedding::{CharVocab, Vocab};

/// Word and character ids for one token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedText {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    /// Position in the source example list.
    pub index: usize,
    pub context: EncodedText,
    pub question: EncodedText,
    pub gold: (usize, usize),
}

/// Maps tokens to ids with the model's vocabularies.
#[derive(Debug, Clone)]
pub struct TextEncoder<'a> {
    pub vocab: &'a Vocab,
    pub chars: &'a CharVocab,
    pub max_word_len: usize,
    /// Character ids are right-padded to at least this many (the filter
    /// width).
    pub min_word_len: usize,
    /// Optional cap on context tokens.
    pub max_context: Option<usize>,
}

impl TextEncoder<'_> {
    pub fn encode_tokens<'t>(&self, tokens: impl IntoIterator<Item = &'t str>) -> EncodedText {
        let mut words = Vec::new();
        let mut chars = Vec::new();
        for t in tokens {
            words.push(self.vocab.id(t));
            chars.push(self.chars.word_ids(t, self.max_word_len, self.min_word_len));
        }
        EncodedText { words, chars }
    }

    /// `None` when the context cap cuts off the gold span.
    pub fn encode(&self, index: usize, ex: &QaExample) -> Option<EncodedExample> {
        let mut ctx: Vec<&str> = ex.context_tokens().iter().map(|t| t.text.as_str()).collect();
        if let Some(cap) = self.max_context {
            ctx.truncate(cap.max(1));
        }
        let gold = ex.gold();
        if gold.1 >= ctx.len() {
            return None;
        }
        Some(EncodedExample {
            index,
            context: self.encode_tokens(ctx),
            question: self.encode_tokens(ex.question_tokens.iter().map(|t| t.text.as_str())),
            gold,
        })
    }

    pub fn encode_all(&self, examples: &[QaExample]) -> Vec<EncodedExample> {
        examples
            .iter()
            .enumerate()
            .filter_map(|(i, ex)| self.encode(i, ex))
            .collect()
    }
}

/// Padded ids and masks for one side (context or question) of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedText {
    /// `batch × max_len`, padded with the unknown id.
    pub words: Vec<Vec<usize>>,
    /// `batch × max_len × chars`, padding positions hold a single PAD run.
    pub chars: Vec<Vec<Vec<usize>>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedText {
    fn pad(texts: &[&EncodedText], min_word_len: usize) -> Self {
        let max_len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut out = Self {
            words: Vec::new(),
            chars: Vec::new(),
            mask: Vec::new(),
        };
        for t in texts {
            let mut w = t.words.clone();
            let mut c = t.chars.clone();
            let mut m = vec![true; t.len()];
            w.resize(max_len, Vocab::UNK);
            c.resize(max_len, vec![CharVocab::PAD; min_word_len.max(1)]);
            m.resize(max_len, false);
            out.words.push(w);
            out.chars.push(c);
            out.mask.push(m);
        }
        out
    }

    /// Row `i` with padding stripped.
    pub fn unpad(&self, i: usize) -> EncodedText {
        let n = self.mask[i].iter().filter(|&&m| m).count();
        EncodedText {
            words: self.words[i][..n].to_vec(),
            chars: self.chars[i][..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub context: PaddedText,
    pub question: PaddedText,
    pub gold: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(examples: &[&EncodedExample], min_word_len: usize) -> Self {
        let ctx: Vec<&EncodedText> = examples.iter().map(|e| &e.context).collect();
        let q: Vec<&EncodedText> = examples.iter().map(|e| &e.question).collect();
        Self {
            indices: examples.iter().map(|e| e.index).collect(),
            context: PaddedText::pad(&ctx, min_word_len),
            question: PaddedText::pad(&q, min_word_len),
            gold: examples.iter().map(|e| e.gold).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn example(&self, i: usize) -> EncodedExample {
        EncodedExample {
            index: self.indices[i],
            context: self.context.unpad(i),
            question: self.question.unpad(i),
            gold: self.gold[i],
        }
    }

    pub fn unbatch(&self) -> Vec<EncodedExample> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }
}

/// Sort by context length, cut into batches of `size`, then shuffle the
/// batch order with `seed`. `seed = None` keeps length order.
pub fn make_batches(examples: &[EncodedExample], size: usize, seed: Option<u64>, min_word_len: usize) -> Vec<Batch> {
    let mut order: Vec<&EncodedExample> = examples.iter().collect();
    order.sort_by_key(|e| e.context.len());
    let mut batches: Vec<Batch> = order
        .chunks(size.max(1))
        .map(|chunk| Batch::new(chunk, min_word_len))
        .collect();
    if let Some(s) = seed {
        batches.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    batches
}
