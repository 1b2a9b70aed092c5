//! A two-hop gated attention reader for extractive question answering.
//!
//! The model extends a single-pass bidirectional attention flow reader with
//! a summarization layer, query and context ruminate gates and a second
//! attention hop. Everything runs on a small reverse-mode autodiff tape over
//! dense `f64` matrices.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod embedding;
pub mod encoder;
pub mod evaluate;
pub mod harness;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod output;
pub mod ruminate;
pub mod tensor;
pub mod train;

pub use autodiff::{Axis, Graph, ParamId, ParamKind, ParamStore, Tape, Var};
pub use data::{Batch, EncodedExample, QaExample};
pub use decode::{decode_span, Span, SpanPrediction};
pub use embedding::{CharVocab, Vocab};
pub use metrics::{EvalReport, QuestionRecord};
pub use model::{Model, ModelConfig, ModelInput};
pub use output::LossWeights;
pub use ruminate::{Variant, VariantConfig};
pub use tensor::{Tensor, TensorError};
pub use train::{TrainConfig, Trainer};
