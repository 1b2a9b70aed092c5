//! Dataset loading, tokenization, pretrained vectors and batching.

pub mod batch;
pub mod glove;
pub mod squad;
pub mod tokenize;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use batch::{make_batches, Batch, EncodedExample, EncodedText, TextEncoder};
pub use glove::{load_glove, random_table, save_glove, EmbeddingTable};
pub use squad::{align_answer, examples_from, load_squad, parse_squad, LoadStats, QaExample, SquadFile};
pub use tokenize::{tokenize, Token};

use crate::embedding::{CharVocab, Vocab};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {source}\n  {snippet}")]
    Json {
        line: usize,
        column: usize,
        snippet: String,
        #[source]
        source: serde_json::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Word and character vocabularies from training contexts and questions.
pub fn build_vocabs(examples: &[QaExample]) -> (Vocab, CharVocab) {
    let mut seen_passages = std::collections::HashSet::new();
    let mut words: Vec<&str> = Vec::new();
    for ex in examples {
        if seen_passages.insert(std::sync::Arc::as_ptr(&ex.passage)) {
            words.extend(ex.context_tokens().iter().map(|t| t.text.as_str()));
        }
        words.extend(ex.question_tokens.iter().map(|t| t.text.as_str()));
    }
    let vocab = Vocab::build(words.iter().copied());
    let chars = CharVocab::build(words.iter().copied());
    (vocab, chars)
}
