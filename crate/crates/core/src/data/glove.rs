//! Pretrained word vectors in GloVe text format: one token per line
//! followed by its space-separated components.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;
use crate::embedding::Vocab;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `|V| × dim`; row 0 (unknown) is zero.
    pub table: Tensor,
    /// Whether each vocabulary row came from the file.
    pub found: Vec<bool>,
    pub skipped_lines: usize,
}

impl EmbeddingTable {
    pub fn oov_count(&self) -> usize {
        self.found.iter().skip(1).filter(|f| !**f).count()
    }
}

/// Rows for the tokens of `vocab`; tokens not in the file keep the zero
/// unknown row. Lines with the wrong number of components are skipped.
pub fn load_glove(path: &Path, vocab: &Vocab, dim: usize) -> Result<EmbeddingTable, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut table = Tensor::zeros(vocab.len(), dim);
    let mut found = vec![false; vocab.len()];
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let mut parts = line.split(' ');
        let Some(word) = parts.next() else { continue };
        if word.is_empty() {
            continue;
        }
        let values: Result<Vec<f64>, _> = parts.filter(|p| !p.is_empty()).map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) if v.len() == dim => v,
            _ => {
                skipped += 1;
                continue;
            }
        };
        if !vocab.contains(word) {
            continue;
        }
        let id = vocab.id(word);
        if id == Vocab::UNK || found[id] {
            continue;
        }
        found[id] = true;
        for (k, v) in values.into_iter().enumerate() {
            table.set(id, k, v);
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed lines", path.display());
    }
    Ok(EmbeddingTable {
        table,
        found,
        skipped_lines: skipped,
    })
}

/// Write `(token, vector)` rows in GloVe text format.
pub fn save_glove(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (word, vec) in rows {
        let mut line = word.clone();
        for v in vec {
            line.push(' ');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Seeded uniform `[-0.1, 0.1]` vectors for when no pretrained file is
/// available. The unknown row stays zero.
pub fn random_table(vocab_len: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Tensor::zeros(vocab_len, dim);
    for r in 1..vocab_len {
        for c in 0..dim {
            table.set(r, c, rng.gen_range(-0.1..0.1));
        }
    }
    EmbeddingTable {
        table,
        found: (0..vocab_len).map(|i| i > 0).collect(),
        skipped_lines: 0,
    }
}

/// Token → vector map of a GloVe file, for inspection and tests.
pub fn read_glove_map(path: &Path) -> Result<HashMap<String, Vec<f64>>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = HashMap::new();
    for line in text.lines() {
        let mut parts = line.split(' ');
        if let Some(word) = parts.next() {
            if let Ok(v) = parts.map(str::parse::<f64>).collect::<Result<Vec<_>, _>>() {
                out.entry(word.to_string()).or_insert(v);
            }
        }
    }
    Ok(out)
}
