//! SQuAD v1.1 parsing and gold-span alignment.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tokenize::{char_to_byte, tokenize, Token};
use super::DataError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquadFile {
    #[serde(default)]
    pub version: Option<String>,
    pub data: Vec<SquadArticle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquadArticle {
    #[serde(default)]
    pub title: String,
    pub paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadQa>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquadQa {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<SquadAnswer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    /// Character index into the context.
    pub answer_start: usize,
}

/// A tokenized context shared by all of its questions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub text: String,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub id: String,
    pub passage: Arc<Passage>,
    pub question: String,
    pub question_tokens: Vec<Token>,
    /// Inclusive token spans, one per aligned gold answer.
    pub spans: Vec<(usize, usize)>,
    /// Every annotated answer string (1–3).
    pub answers: Vec<String>,
}

impl QaExample {
    pub fn context_tokens(&self) -> &[Token] {
        &self.passage.tokens
    }

    /// The training target: the first aligned gold span.
    pub fn gold(&self) -> (usize, usize) {
        self.spans[0]
    }

    /// Original context text covering tokens `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        let t = &self.passage.tokens;
        &self.passage.text[t[start].start..t[end].end]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub questions: usize,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignError {
    OutOfRange,
    NoCover,
    TextMismatch,
}

/// Smallest inclusive token span covering the answer's character range.
pub fn align_answer(
    context: &str,
    answer_start: usize,
    answer_text: &str,
    tokens: &[Token],
) -> Result<(usize, usize), AlignError> {
    let n_chars = answer_text.chars().count();
    let lo = char_to_byte(context, answer_start).ok_or(AlignError::OutOfRange)?;
    let hi = char_to_byte(context, answer_start + n_chars).ok_or(AlignError::OutOfRange)?;
    if context[lo..hi].split_whitespace().ne(answer_text.split_whitespace()) {
        return Err(AlignError::TextMismatch);
    }
    let first = tokens.iter().position(|t| t.end > lo).ok_or(AlignError::NoCover)?;
    let last = tokens.iter().rposition(|t| t.start < hi).ok_or(AlignError::NoCover)?;
    if first > last {
        return Err(AlignError::NoCover);
    }
    Ok((first, last))
}

/// Tokenize and align every question. Questions with no alignable answer
/// are dropped and counted.
pub fn examples_from(file: &SquadFile) -> (Vec<QaExample>, LoadStats) {
    let paragraphs: Vec<&SquadParagraph> = file.data.iter().flat_map(|a| &a.paragraphs).collect();
    let per_para: Vec<(Vec<QaExample>, LoadStats)> = paragraphs
        .par_iter()
        .map(|p| {
            let passage = Arc::new(Passage {
                tokens: tokenize(&p.context),
                text: p.context.clone(),
            });
            let mut stats = LoadStats::default();
            let mut out = Vec::new();
            for qa in &p.qas {
                stats.questions += 1;
                let spans: Vec<(usize, usize)> = qa
                    .answers
                    .iter()
                    .filter_map(|a| align_answer(&p.context, a.answer_start, &a.text, &passage.tokens).ok())
                    .collect();
                let question_tokens = tokenize(&qa.question);
                if spans.is_empty() || question_tokens.is_empty() || passage.tokens.is_empty() {
                    stats.dropped += 1;
                    continue;
                }
                stats.kept += 1;
                out.push(QaExample {
                    id: qa.id.clone(),
                    passage: Arc::clone(&passage),
                    question: qa.question.clone(),
                    question_tokens,
                    spans,
                    answers: qa.answers.iter().map(|a| a.text.clone()).collect(),
                });
            }
            (out, stats)
        })
        .collect();
    let mut stats = LoadStats::default();
    let mut examples = Vec::new();
    for (ex, s) in per_para {
        examples.extend(ex);
        stats.questions += s.questions;
        stats.kept += s.kept;
        stats.dropped += s.dropped;
    }
    if stats.dropped > 0 {
        log::warn!(
            "dropped {} of {} questions with unalignable answers",
            stats.dropped,
            stats.questions
        );
    }
    (examples, stats)
}

pub fn parse_squad(json: &str) -> Result<SquadFile, DataError> {
    serde_json::from_str(json).map_err(|e| {
        let line = e.line();
        let text = json.lines().nth(line.saturating_sub(1)).unwrap_or("");
        let snippet: String = text.chars().take(120).collect();
        DataError::Json {
            line,
            column: e.column(),
            snippet,
            source: e,
        }
    })
}

pub fn load_squad(path: &Path) -> Result<(Vec<QaExample>, LoadStats), DataError> {
    let json = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let file = parse_squad(&json)?;
    Ok(examples_from(&file))
}
