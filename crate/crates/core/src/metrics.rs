//! Answer normalization, F1 / exact match, per-question scoring and the
//! analysis breakdowns.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("question {0:?} has no gold answers")]
    NoGold(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Lowercase, drop ASCII punctuation, drop the articles `a`, `an`, `the`,
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let mut no_articles = String::with_capacity(no_punct.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if matches!(word.as_str(), "a" | "an" | "the") {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in no_punct.chars() {
        if is_word_char(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut no_articles);
            no_articles.push(c);
        }
    }
    flush(&mut word, &mut no_articles);
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split_whitespace().map(str::to_string).collect()
}

/// Token-multiset F1 after normalization. Two empty answers score 1.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let p = tokens(prediction);
    let g = tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut same = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / p.len() as f64;
    let recall = same as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn em_score(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// `(f1, em)`, each the max over golds.
pub fn score_question<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<(f64, f64), MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGold(prediction.to_string()));
    }
    let f1 = golds
        .iter()
        .map(|g| f1_score(prediction, g.as_ref()))
        .fold(0.0, f64::max);
    let em = golds
        .iter()
        .map(|g| em_score(prediction, g.as_ref()))
        .fold(0.0, f64::max);
    Ok((f1, em))
}

pub const WH_WORDS: [&str; 6] = ["what", "which", "when", "who", "why", "how"];

/// First of what/which/when/who/why/how in the question, else `other`.
pub fn wh_word(question: &str) -> &'static str {
    for raw in question.split(|c: char| !is_word_char(c)) {
        let w = raw.to_lowercase();
        if let Some(found) = WH_WORDS.iter().find(|&&x| x == w) {
            return found;
        }
    }
    "other"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub prediction: String,
    pub golds: Vec<String>,
    /// Token length of the first gold answer.
    pub answer_len: usize,
    pub wh: String,
    pub f1: f64,
    pub em: f64,
}

impl QuestionRecord {
    pub fn score(
        id: impl Into<String>,
        question: impl Into<String>,
        prediction: impl Into<String>,
        golds: Vec<String>,
        answer_len: usize,
    ) -> Result<Self, MetricsError> {
        let id = id.into();
        let prediction = prediction.into();
        let question = question.into();
        let (f1, em) = score_question(&prediction, &golds).map_err(|_| MetricsError::NoGold(id.clone()))?;
        Ok(Self {
            wh: wh_word(&question).to_string(),
            id,
            question,
            prediction,
            golds,
            answer_len,
            f1,
            em,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub count: usize,
    /// Percent.
    pub f1: f64,
    /// Percent.
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub failure_pct: f64,
    pub partial_pct: f64,
    pub success_pct: f64,
    /// Mean F1 (percent) of partial successes; absent when there are none.
    pub partial_avg_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub em: f64,
    pub count: usize,
    pub records: Vec<QuestionRecord>,
    pub by_length: Vec<Bucket>,
    pub by_wh: Vec<Bucket>,
    pub outcomes: Outcomes,
}

const SUCCESS_TOL: f64 = 1e-9;
const MAX_LEN_BUCKET: usize = 10;

fn bucket(label: String, rs: &[&QuestionRecord]) -> Bucket {
    let n = rs.len().max(1) as f64;
    Bucket {
        label,
        count: rs.len(),
        f1: 100.0 * rs.iter().map(|r| r.f1).sum::<f64>() / n,
        em: 100.0 * rs.iter().map(|r| r.em).sum::<f64>() / n,
    }
}

pub fn outcomes(records: &[QuestionRecord]) -> Outcomes {
    let n = records.len().max(1) as f64;
    let failure = records.iter().filter(|r| r.f1 == 0.0).count();
    let success = records.iter().filter(|r| (r.f1 - 1.0).abs() <= SUCCESS_TOL).count();
    let partial: Vec<f64> = records
        .iter()
        .filter(|r| r.f1 != 0.0 && (r.f1 - 1.0).abs() > SUCCESS_TOL)
        .map(|r| r.f1)
        .collect();
    Outcomes {
        failure_pct: 100.0 * failure as f64 / n,
        partial_pct: 100.0 * partial.len() as f64 / n,
        success_pct: 100.0 * success as f64 / n,
        partial_avg_f1: (!partial.is_empty()).then(|| 100.0 * partial.iter().sum::<f64>() / partial.len() as f64),
    }
}

/// Aggregate scores and the answer-length, wh-word and outcome tables.
pub fn breakdown(records: Vec<QuestionRecord>) -> EvalReport {
    let all: Vec<&QuestionRecord> = records.iter().collect();
    let total = bucket("all".into(), &all);
    let mut by_length = Vec::new();
    for len in 1..=MAX_LEN_BUCKET {
        let rs: Vec<&QuestionRecord> = records
            .iter()
            .filter(|r| {
                if len == MAX_LEN_BUCKET {
                    r.answer_len >= len
                } else {
                    r.answer_len.max(1) == len
                }
            })
            .collect();
        if !rs.is_empty() {
            let label = if len == MAX_LEN_BUCKET {
                format!("{len}+")
            } else {
                len.to_string()
            };
            by_length.push(bucket(label, &rs));
        }
    }
    let mut by_wh = Vec::new();
    for w in WH_WORDS.iter().chain(std::iter::once(&"other")) {
        let rs: Vec<&QuestionRecord> = records.iter().filter(|r| r.wh == *w).collect();
        if !rs.is_empty() {
            by_wh.push(bucket((*w).to_string(), &rs));
        }
    }
    EvalReport {
        f1: total.f1,
        em: total.em,
        count: records.len(),
        outcomes: outcomes(&records),
        records,
        by_length,
        by_wh,
    }
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "questions  {}", self.count);
        let _ = writeln!(s, "F1         {:.3}", self.f1);
        let _ = writeln!(s, "EM         {:.3}", self.em);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>8}", "answer len", "n", "F1", "EM");
        for b in &self.by_length {
            let _ = writeln!(s, "{:<12} {:>6} {:>8.2} {:>8.2}", b.label, b.count, b.f1, b.em);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>8}", "wh-word", "n", "F1", "EM");
        for b in &self.by_wh {
            let _ = writeln!(s, "{:<12} {:>6} {:>8.2} {:>8.2}", b.label, b.count, b.f1, b.em);
        }
        let o = &self.outcomes;
        let _ = writeln!(s);
        let _ = writeln!(s, "failure    {:.1}%", o.failure_pct);
        match o.partial_avg_f1 {
            Some(avg) => {
                let _ = writeln!(s, "partial    {:.1}% (avg F1 {:.1})", o.partial_pct, avg);
            }
            None => {
                let _ = writeln!(s, "partial    {:.1}%", o.partial_pct);
            }
        }
        let _ = writeln!(s, "success    {:.1}%", o.success_pct);
        s
    }

    /// Breakdown buckets as CSV: `table,label,count,f1,em`.
    pub fn breakdown_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "label", "count", "f1", "em"])?;
        for (table, rows) in [("answer_len", &self.by_length), ("wh", &self.by_wh)] {
            for b in rows.iter() {
                w.write_record([
                    table,
                    &b.label,
                    &b.count.to_string(),
                    &format!("{:.6}", b.f1),
                    &format!("{:.6}", b.em),
                ])?;
            }
        }
        let o = &self.outcomes;
        let partial_avg = o.partial_avg_f1.map(|v| format!("{v:.6}")).unwrap_or_default();
        for (label, pct, f1) in [
            ("failure", o.failure_pct, String::new()),
            ("partial", o.partial_pct, partial_avg),
            ("success", o.success_pct, String::new()),
        ] {
            w.write_record(["outcome", label, &format!("{pct:.6}"), &f1, ""])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

/// Dataset-level scorer that reads a SQuAD v1.1 dataset and a
/// question-id → answer predictions object, scoring unanswered questions as
/// zero. Written separately from the per-question scorer above so the two
/// can cross-check each other.
pub mod official {
    use std::collections::HashMap;

    use serde::Deserialize;

    use super::MetricsError;

    #[derive(Deserialize)]
    struct Dataset {
        data: Vec<Article>,
    }
    #[derive(Deserialize)]
    struct Article {
        paragraphs: Vec<Paragraph>,
    }
    #[derive(Deserialize)]
    struct Paragraph {
        qas: Vec<Qa>,
    }
    #[derive(Deserialize)]
    struct Qa {
        id: String,
        answers: Vec<Answer>,
    }
    #[derive(Deserialize)]
    struct Answer {
        text: String,
    }

    fn normalize(s: &str) -> Vec<String> {
        let mut kept = String::new();
        for c in s.chars().flat_map(char::to_lowercase) {
            if !c.is_ascii_punctuation() {
                kept.push(c);
            }
        }
        // Split on non-word characters, remembering separators so that
        // "a" between two separators can be dropped as a whole word.
        let mut pieces: Vec<(bool, String)> = Vec::new();
        for c in kept.chars() {
            let word = c.is_alphanumeric() || c == '_';
            match pieces.last_mut() {
                Some((w, buf)) if *w == word && word => buf.push(c),
                _ => pieces.push((word, c.to_string())),
            }
        }
        let mut rebuilt = String::new();
        for (word, text) in pieces {
            if word && (text == "a" || text == "an" || text == "the") {
                rebuilt.push(' ');
            } else {
                rebuilt.push_str(&text);
            }
        }
        rebuilt.split_whitespace().map(String::from).collect()
    }

    fn f1(pred: &str, gold: &str) -> f64 {
        let p = normalize(pred);
        let g = normalize(gold);
        if p.is_empty() && g.is_empty() {
            return 1.0;
        }
        let mut pool = g.clone();
        let mut same = 0.0;
        for t in &p {
            if let Some(i) = pool.iter().position(|x| x == t) {
                pool.swap_remove(i);
                same += 1.0;
            }
        }
        if same == 0.0 {
            return 0.0;
        }
        let precision = same / p.len() as f64;
        let recall = same / g.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }

    fn em(pred: &str, gold: &str) -> f64 {
        f64::from(u8::from(normalize(pred) == normalize(gold)))
    }

    /// `(f1, em)` in percent over every question in the dataset.
    pub fn evaluate(dataset_json: &str, predictions_json: &str) -> Result<(f64, f64), MetricsError> {
        let dataset: Dataset = serde_json::from_str(dataset_json)?;
        let predictions: HashMap<String, String> = serde_json::from_str(predictions_json)?;
        let (mut f, mut e, mut total) = (0.0, 0.0, 0usize);
        for qa in dataset.data.iter().flat_map(|a| &a.paragraphs).flat_map(|p| &p.qas) {
            total += 1;
            let Some(pred) = predictions.get(&qa.id) else {
                log::warn!("unanswered question {}", qa.id);
                continue;
            };
            f += qa.answers.iter().map(|a| f1(pred, &a.text)).fold(0.0, f64::max);
            e += qa.answers.iter().map(|a| em(pred, &a.text)).fold(0.0, f64::max);
        }
        let n = total.max(1) as f64;
        Ok((100.0 * f / n, 100.0 * e / n))
    }
}
