//! Batch prediction and scoring against gold answers.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::batch::{EncodedText, TextEncoder};
use crate::data::squad::QaExample;
use crate::data::tokenize::tokenize;
use crate::decode::SpanPrediction;
use crate::metrics::{breakdown, EvalReport, MetricsError, QuestionRecord};
use crate::model::{FullMasks, Model};
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Word and character ids for an example's (possibly capped) context and
/// question.
pub fn encode_inputs(model: &Model, ex: &QaExample, max_context: Option<usize>) -> (EncodedText, EncodedText) {
    let enc = TextEncoder {
        vocab: &model.vocab,
        chars: &model.chars,
        max_word_len: model.config.max_word_len,
        min_word_len: model.config.filter_width,
        max_context,
    };
    let mut ctx: Vec<&str> = ex.context_tokens().iter().map(|t| t.text.as_str()).collect();
    if let Some(cap) = max_context {
        ctx.truncate(cap.max(1));
    }
    (
        enc.encode_tokens(ctx),
        enc.encode_tokens(ex.question_tokens.iter().map(|t| t.text.as_str())),
    )
}

pub fn predict_one(model: &Model, ex: &QaExample, max_context: Option<usize>) -> Result<SpanPrediction, TensorError> {
    let (c, q) = encode_inputs(model, ex, max_context);
    let masks = FullMasks::new(&c, &q);
    let span = model.predict(&masks.input(&c, &q))?;
    Ok(SpanPrediction {
        start: span.start,
        end: span.end,
        joint_prob: span.prob,
        text: ex.span_text(span.start, span.end).to_string(),
    })
}

/// Predictions in input order.
pub fn predict_all(
    model: &Model,
    examples: &[QaExample],
    max_context: Option<usize>,
) -> Result<Vec<SpanPrediction>, TensorError> {
    examples
        .par_iter()
        .map(|ex| predict_one(model, ex, max_context))
        .collect()
}

/// Question id → answer text, the shape the dataset-level scorer reads.
pub fn predictions_map(examples: &[QaExample], preds: &[SpanPrediction]) -> BTreeMap<String, String> {
    examples
        .iter()
        .zip(preds)
        .map(|(e, p)| (e.id.clone(), p.text.clone()))
        .collect()
}

pub fn score(examples: &[QaExample], preds: &[SpanPrediction]) -> Result<EvalReport, MetricsError> {
    let records = examples
        .iter()
        .zip(preds)
        .map(|(e, p)| {
            let answer_len = e.answers.first().map_or(0, |a| tokenize(a).len());
            QuestionRecord::score(
                e.id.clone(),
                e.question.clone(),
                p.text.clone(),
                e.answers.clone(),
                answer_len,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(breakdown(records))
}

/// Predict and score every example.
pub fn evaluate(
    model: &Model,
    examples: &[QaExample],
    max_context: Option<usize>,
) -> Result<(EvalReport, BTreeMap<String, String>), EvalError> {
    let preds = predict_all(model, examples, max_context)?;
    let report = score(examples, &preds)?;
    Ok((report, predictions_map(examples, &preds)))
}
