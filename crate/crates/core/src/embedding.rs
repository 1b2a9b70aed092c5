//! Word + character embeddings fused by a two-layer highway network.
//!
//! Word vectors come from a frozen pretrained table looked up
//! case-insensitively. Characters go through a width-5 convolution with
//! max-over-time pooling. The concatenation is projected to the model width
//! `d` when the sizes differ, then passed through two highway layers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const UNK_TOKEN: &str = "<unk>";

/// Token → id map. Id 0 is always the unknown token; lookups lowercase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: usize = 0;

    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: vec![UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK_TOKEN.to_string(), 0);
        for t in tokens {
            let key = t.to_lowercase();
            if !v.index.contains_key(&key) {
                v.index.insert(key.clone(), v.tokens.len());
                v.tokens.push(key);
            }
        }
        v
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Character inventory with reserved padding and unknown ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen: Vec<char> = words.into_iter().flat_map(str::chars).collect();
        seen.sort_unstable();
        seen.dedup();
        let mut v = Self {
            chars: seen,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub fn reindex(&mut self) {
        self.index = self.chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
    }

    /// Number of ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(Self::UNK)
    }

    /// Ids for one word, truncated to `max_len` characters and right-padded
    /// with `PAD` up to `min_len`.
    pub fn word_ids(&self, word: &str, max_len: usize, min_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = word.chars().take(max_len).map(|c| self.id(c)).collect();
        while ids.len() < min_len {
            ids.push(Self::PAD);
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub filters: usize,
    pub filter_width: usize,
    pub max_word_len: usize,
    /// Model width `d`.
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CharConvParams {
    /// `|charset| × char_dim`
    pub table: ParamId,
    /// `(width·char_dim) × filters`
    pub filters: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

/// `y = g∘x + (1−g)∘relu(x·Wt + bt)` with carry gate `g = σ(x·Wg + bg)`.
#[derive(Debug, Clone, Copy)]
pub struct HighwayLayer {
    pub transform_w: ParamId,
    pub transform_b: ParamId,
    pub carry_w: ParamId,
    pub carry_b: ParamId,
}

impl HighwayLayer {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            transform_w: store.weight(format!("{prefix}/transform_w"), d, d, rng),
            transform_b: store.bias(format!("{prefix}/transform_b"), d),
            carry_w: store.weight(format!("{prefix}/carry_w"), d, d, rng),
            carry_b: store.bias(format!("{prefix}/carry_b"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = g.drop(x)?;
        let h = g.linear(x, self.transform_w, Some(self.transform_b))?;
        let h = g.tape.relu(h);
        let gate = g.linear(x, self.carry_w, Some(self.carry_b))?;
        let gate = g.tape.sigmoid(gate);
        let carried = g.tape.mul(gate, x)?;
        let open = g.tape.one_minus(gate);
        let moved = g.tape.mul(open, h)?;
        g.tape.add(carried, moved)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub config: EmbeddingConfig,
    /// Frozen `|V| × word_dim` table.
    pub word_table: ParamId,
    pub chars: CharConvParams,
    /// `(word_dim + filters) × d`, present only when the sizes differ.
    pub projection: Option<ParamId>,
    pub highway: [HighwayLayer; 2],
}

impl EmbeddingParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: EmbeddingConfig,
        word_table: Tensor,
        charset_len: usize,
        rng: &mut R,
    ) -> Self {
        let word_table = store.frozen("embed/word_table", word_table);
        let chars = CharConvParams {
            table: store.weight("embed/char_table", charset_len, config.char_dim, rng),
            filters: store.weight(
                "embed/char_filters",
                config.filter_width * config.char_dim,
                config.filters,
                rng,
            ),
            bias: store.bias("embed/char_bias", config.filters),
            width: config.filter_width,
        };
        let concat = config.word_dim + config.filters;
        let projection = (concat != config.hidden).then(|| store.weight("embed/proj", concat, config.hidden, rng));
        let highway = [
            HighwayLayer::new(store, "embed/highway0", config.hidden, rng),
            HighwayLayer::new(store, "embed/highway1", config.hidden, rng),
        ];
        Self {
            config,
            word_table,
            chars,
            projection,
            highway,
        }
    }

    /// `1 × filters` character feature for one word (ids already padded to
    /// at least the filter width).
    pub fn char_embed(&self, g: &mut Graph, char_ids: &[usize]) -> Result<Var> {
        if char_ids.len() < self.chars.width {
            return Err(TensorError::Invalid {
                op: "char_embed",
                msg: format!(
                    "word has {} character ids, filter width is {}",
                    char_ids.len(),
                    self.chars.width
                ),
            });
        }
        let table = g.param(self.chars.table);
        let emb = g.tape.gather_rows(table, char_ids)?;
        let emb = g.drop(emb)?;
        let filters = g.param(self.chars.filters);
        let conv = g.tape.conv1d(emb, filters, self.chars.width)?;
        let bias = g.param(self.chars.bias);
        let conv = g.tape.add(conv, bias)?;
        let act = g.tape.relu(conv);
        g.tape.max_pool_over_time(act)
    }

    /// `len × d` representation of a token sequence.
    pub fn embed_sequence(&self, g: &mut Graph, word_ids: &[usize], char_ids: &[Vec<usize>]) -> Result<Var> {
        if word_ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embed_sequence",
                msg: "empty token list".into(),
            });
        }
        if word_ids.len() != char_ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embed_sequence",
                lhs: vec![word_ids.len()],
                rhs: vec![char_ids.len()],
            });
        }
        let table = g.param(self.word_table);
        let words = g.tape.gather_rows(table, word_ids)?;
        let char_rows = char_ids
            .iter()
            .map(|ids| self.char_embed(g, ids))
            .collect::<Result<Vec<_>>>()?;
        let chars = if char_rows.len() == 1 {
            char_rows[0]
        } else {
            g.tape.concat(&char_rows, Axis::Rows)?
        };
        let mut x = g.tape.concat(&[words, chars], Axis::Cols)?;
        if let Some(p) = self.projection {
            x = g.linear(x, p, None)?;
        }
        for layer in &self.highway {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}
