//! The full reader: embeddings, shared encoder, first attention hop, the
//! optional summarize / ruminate / second-hop block, and the output layer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attention_flow, AttentionParams, AttentionTrace};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::checkpoint::{self, CheckpointError};
use crate::data::batch::{Batch, EncodedText};
use crate::decode::{decode_span, Span};
use crate::embedding::{CharVocab, EmbeddingConfig, EmbeddingParams, Vocab};
use crate::encoder::EncoderParams;
use crate::output::{aqs_loss, modeling, nll_loss, span_distributions, OutputParams, SpanScores};
use crate::ruminate::{context_ruminate, query_ruminate, summarize, RuminateParams, Ruminated, Variant, VariantConfig};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width `d`.
    pub d: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub filters: usize,
    pub filter_width: usize,
    pub max_word_len: usize,
    pub variant: Variant,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 100,
            word_dim: 100,
            char_dim: 8,
            filters: 100,
            filter_width: 5,
            max_word_len: 16,
            variant: Variant::Full,
            window: crate::decode::DEFAULT_WINDOW,
        }
    }
}

impl ModelConfig {
    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            filters: self.filters,
            filter_width: self.filter_width,
            max_word_len: self.max_word_len,
            hidden: self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(TensorError::Invalid {
                op: "model_config",
                msg: msg.to_string(),
            })
        };
        if self.d == 0 || self.word_dim == 0 || self.char_dim == 0 || self.filters == 0 {
            return bad("dimensions must be at least 1");
        }
        if self.filter_width == 0 || self.max_word_len < self.filter_width {
            return bad("max word length must be at least the filter width");
        }
        VariantConfig::new(self.variant).map_err(|e| TensorError::Invalid {
            op: "model_config",
            msg: e.to_string(),
        })?;
        Ok(())
    }
}

/// One example's ids and masks. Masks are prefixes of true positions.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub context_words: &'a [usize],
    pub context_chars: &'a [Vec<usize>],
    pub context_mask: &'a [bool],
    pub question_words: &'a [usize],
    pub question_chars: &'a [Vec<usize>],
    pub question_mask: &'a [bool],
}

/// All-true masks for unpadded inputs.
pub struct FullMasks {
    context: Vec<bool>,
    question: Vec<bool>,
}

impl FullMasks {
    pub fn new(context: &EncodedText, question: &EncodedText) -> Self {
        Self {
            context: vec![true; context.len()],
            question: vec![true; question.len()],
        }
    }

    pub fn input<'a>(&'a self, context: &'a EncodedText, question: &'a EncodedText) -> ModelInput<'a> {
        ModelInput {
            context_words: &context.words,
            context_chars: &context.chars,
            context_mask: &self.context,
            question_words: &question.words,
            question_chars: &question.chars,
            question_mask: &self.question,
        }
    }
}

impl<'a> ModelInput<'a> {
    /// Row `i` of a padded batch.
    pub fn from_batch(batch: &'a Batch, i: usize) -> Self {
        Self {
            context_words: &batch.context.words[i],
            context_chars: &batch.context.chars[i],
            context_mask: &batch.context.mask[i],
            question_words: &batch.question.words[i],
            question_chars: &batch.question.chars[i],
            question_mask: &batch.question.mask[i],
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub scores: SpanScores,
    /// Hop-1 context encoding (`C × 2d`).
    pub context_enc: Var,
    /// Hop-1 question encoding (`Q × 2d`).
    pub question_enc: Var,
    /// Input to the modeling layer (`C × 8d`).
    pub fused: Var,
    pub summary: Option<Var>,
    pub query_ruminated: Option<Ruminated>,
    pub context_ruminated: Option<Ruminated>,
}

/// Attention and gate state exported by [`Model::trace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrace {
    pub hop1: AttentionTrace,
    pub hop2: Option<AttentionTrace>,
    pub query_gate_norms: Option<Vec<f64>>,
    pub context_gate_norms: Option<Vec<f64>>,
    pub start_prob: Vec<f64>,
    pub end_prob: Vec<f64>,
    pub span: Span,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy)]
pub struct Layers {
    pub encoder: EncoderParams,
    pub hop1: AttentionParams,
    pub ruminate: Option<RuminateParams>,
    pub hop2: Option<AttentionParams>,
    pub output: OutputParams,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: VariantConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub chars: CharVocab,
    pub embed: EmbeddingParams,
    pub layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vocab,
    chars: CharVocab,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Model {
    /// Build with Glorot-initialized weights. `word_table` is
    /// `|vocab| × word_dim` and stays frozen.
    pub fn new(config: ModelConfig, vocab: Vocab, chars: CharVocab, word_table: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        if word_table.shape() != [vocab.len(), config.word_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "model_new",
                lhs: vec![vocab.len(), config.word_dim],
                rhs: word_table.shape().to_vec(),
            });
        }
        let variant = VariantConfig::new(config.variant).expect("validated");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let embed = EmbeddingParams::new(&mut store, config.embedding(), word_table, chars.len(), &mut rng);
        let encoder = EncoderParams::new(&mut store, d, &mut rng);
        let hop1 = AttentionParams::new(&mut store, "hop1", d, &mut rng);
        let ruminate = RuminateParams::new(&mut store, d, &variant, &mut rng);
        let hop2 = variant
            .second_hop
            .then(|| AttentionParams::new(&mut store, "hop2", d, &mut rng));
        let output = OutputParams::new(&mut store, d, &mut rng);
        Ok(Self {
            config,
            variant,
            store,
            vocab,
            chars,
            layers: Layers {
                encoder,
                hop1,
                ruminate,
                hop2,
                output,
            },
            embed,
        })
    }

    /// Decoding window for this variant.
    pub fn window(&self) -> usize {
        if self.variant.local_search {
            self.config.window
        } else {
            usize::MAX
        }
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<Forward> {
        self.forward_traced(g, input).map(|(f, _)| f)
    }

    fn forward_traced(&self, g: &mut Graph, input: &ModelInput) -> Result<(Forward, Vec<AttentionTrace>)> {
        let (cmask, qmask) = (input.context_mask, input.question_mask);
        let l = &self.layers;
        let xc = self.embed.embed_sequence(g, input.context_words, input.context_chars)?;
        let xq = self
            .embed
            .embed_sequence(g, input.question_words, input.question_chars)?;
        let c = l.encoder.encode(g, xc, cmask)?;
        let q = l.encoder.encode(g, xq, qmask)?;
        let (g1, t1) = attention_flow(g, &l.hop1, c, q, cmask, qmask, 1)?;
        let mut traces = vec![t1];
        let (mut fused, mut summary, mut query_ruminated, mut context_ruminated) = (g1, None, None, None);
        if let (Some(rum), Some(hop2)) = (&l.ruminate, &l.hop2) {
            let s = summarize(g, &rum.summarizer, g1, cmask)?;
            let q2 = if self.variant.query_ruminate {
                let r = query_ruminate(g, rum, q, s, qmask, &self.variant)?;
                query_ruminated = Some(r);
                r.output
            } else {
                q
            };
            let c2 = if self.variant.context_ruminate {
                let r = context_ruminate(g, rum, c, s, cmask, &self.variant)?;
                context_ruminated = Some(r);
                r.output
            } else {
                c
            };
            let (g2, t2) = attention_flow(g, hop2, c2, q2, cmask, qmask, 2)?;
            traces.push(t2);
            fused = g2;
            summary = Some(s);
        }
        let m = modeling(g, &l.output, fused, cmask)?;
        let scores = span_distributions(g, &l.output, fused, m, cmask)?;
        Ok((
            Forward {
                scores,
                context_enc: c,
                question_enc: q,
                fused,
                summary,
                query_ruminated,
                context_ruminated,
            },
            traces,
        ))
    }

    /// Per-example training objective without the L2 term: NLL, plus the
    /// weighted similarity loss when the variant is regularized. Returns
    /// `(loss, nll, aqsl)` handles.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        gold: (usize, usize),
        aqsl_weight: f64,
    ) -> Result<(Var, Var, Option<Var>)> {
        let f = self.forward(g, input)?;
        let nll = nll_loss(g, &f.scores, gold)?;
        if !self.variant.regularized || aqsl_weight == 0.0 {
            return Ok((nll, nll, None));
        }
        let aqs = aqs_loss(
            g,
            &f.scores,
            f.context_enc,
            f.question_enc,
            input.context_mask,
            input.question_mask,
            None,
        )?;
        let weighted = g.tape.scale(aqs, aqsl_weight);
        let loss = g.tape.add(nll, weighted)?;
        Ok((loss, nll, Some(aqs)))
    }

    /// Start/end distributions over the valid context prefix.
    pub fn distributions(&self, input: &ModelInput) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::eval(&self.store);
        let f = self.forward(&mut g, input)?;
        let n = input.context_mask.iter().filter(|&&m| m).count();
        Ok((
            g.value(f.scores.start_prob).data()[..n].to_vec(),
            g.value(f.scores.end_prob).data()[..n].to_vec(),
        ))
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Span> {
        let (ps, pe) = self.distributions(input)?;
        decode_span(&ps, &pe, self.window())
    }

    pub fn trace(&self, input: &ModelInput) -> Result<ModelTrace> {
        let mut g = Graph::eval(&self.store);
        let (f, mut traces) = self.forward_traced(&mut g, input)?;
        let n = input.context_mask.iter().filter(|&&m| m).count();
        let ps = g.value(f.scores.start_prob).data()[..n].to_vec();
        let pe = g.value(f.scores.end_prob).data()[..n].to_vec();
        let span = decode_span(&ps, &pe, self.window())?;
        let norms = |v: Option<Var>| v.map(|v| crate::ruminate::gate_norms(g.value(v)));
        let hop2 = (traces.len() > 1).then(|| traces.remove(1));
        Ok(ModelTrace {
            hop1: traces.remove(0),
            hop2,
            query_gate_norms: norms(f.query_ruminated.map(|r| r.gate)),
            context_gate_norms: norms(f.context_ruminated.map(|r| r.gate)),
            start_prob: ps,
            end_prob: pe,
            span,
        })
    }

    /// Hash of the frozen word table's bits.
    pub fn frozen_table_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.store.value(self.embed.word_table).data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn meta(&self, extra: serde_json::Value) -> std::result::Result<String, serde_json::Error> {
        serde_json::to_string(&Meta {
            config: self.config,
            vocab: self.vocab.clone(),
            chars: self.chars.clone(),
            extra,
        })
    }

    /// Write parameters plus configuration and vocabularies. `extra` is
    /// stored alongside and returned by [`Model::load`].
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> std::result::Result<(), ModelError> {
        checkpoint::save(path, &self.meta(extra)?, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<(Self, serde_json::Value), ModelError> {
        let (meta, loaded) = checkpoint::load(path)?;
        let mut meta: Meta = serde_json::from_str(&meta)?;
        meta.vocab.reindex();
        meta.chars.reindex();
        let table = Tensor::zeros(meta.vocab.len(), meta.config.word_dim);
        let mut model = Self::new(meta.config, meta.vocab, meta.chars, table, 0)?;
        if loaded.len() != model.store.len() {
            return Err(ModelError::Mismatch(format!(
                "{} parameters in file, model has {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.get(id).name.clone();
            let src = loaded
                .id(&name)
                .ok_or_else(|| ModelError::Mismatch(format!("missing parameter {name}")))?;
            let p = loaded.get(src);
            if p.kind != model.store.get(id).kind || p.value().shape() != model.store.value(id).shape() {
                return Err(ModelError::Mismatch(format!(
                    "parameter {name} differs in kind or shape"
                )));
            }
            model.store.set_value(id, p.value().clone());
        }
        Ok((model, meta.extra))
    }
}
