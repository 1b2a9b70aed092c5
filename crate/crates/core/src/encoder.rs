//! Shared bidirectional sequence encoder for context and question.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::lstm::BiLstm;
use crate::tensor::Result;

/// One BiLSTM instance used for both the context and the question.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub bilstm: BiLstm,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            bilstm: BiLstm::new(store, "encoder", d, d, rng),
        }
    }

    /// `len × d` embeddings → `len × 2d` encodings. Masked positions are zero.
    pub fn encode(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        Ok(self.bilstm.run(g, x, mask)?.seq)
    }
}
