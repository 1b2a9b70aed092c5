//! The train / eval / predict / trace / ablate commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::config::{ConfigError, RunConfig};
use crate::data::{self, DataError, LoadStats, QaExample, TextEncoder};
use crate::evaluate::{self, encode_inputs, EvalError};
use crate::metrics::{EvalReport, MetricsError};
use crate::model::{FullMasks, Model, ModelError, ModelTrace};
use crate::ruminate::Variant;
use crate::tensor::{Tensor, TensorError};
use crate::train::{fit, FitOptions, FitSummary, TrainError};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Missing(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |e| CommandError::Io(path.to_path_buf(), e)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CommandError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CommandError> {
    p.as_deref()
        .ok_or_else(|| CommandError::Missing(format!("no {what} path configured")))
}

/// Training examples, optional dev examples and a freshly initialized model.
pub struct Prepared {
    pub train: Vec<QaExample>,
    pub train_stats: LoadStats,
    pub dev: Option<Vec<QaExample>>,
    pub model: Model,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CommandError> {
    cfg.validate()?;
    let (train, train_stats) = data::load_squad(required(&cfg.train_path, "training data")?)?;
    if train.is_empty() {
        return Err(CommandError::Missing("training file has no usable examples".into()));
    }
    let dev = match &cfg.dev_path {
        Some(p) => Some(data::load_squad(p)?.0),
        None => None,
    };
    let (vocab, chars) = data::build_vocabs(&train);
    let table = match &cfg.glove_path {
        Some(p) => {
            let t = data::load_glove(p, &vocab, cfg.word_dim)?;
            log::info!(
                "{} of {} vocabulary words have no pretrained vector",
                t.oov_count(),
                vocab.len() - 1
            );
            t.table
        }
        None => data::random_table(vocab.len(), cfg.word_dim, cfg.seed).table,
    };
    let model = Model::new(cfg.model_config(), vocab, chars, table, cfg.seed)?;
    Ok(Prepared {
        train,
        train_stats,
        dev,
        model,
    })
}

pub fn best_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.join("best.ckpt")
}

pub struct TrainOutcome {
    pub model: Model,
    pub summary: FitSummary,
    pub checkpoint: PathBuf,
    pub dev_report: Option<EvalReport>,
}

/// Train with periodic dev evaluation, keeping the best-dev checkpoint. With
/// no dev set the final parameters are saved instead.
pub fn cmd_train(cfg: &RunConfig, log_out: Option<&mut dyn Write>) -> Result<TrainOutcome, CommandError> {
    let Prepared {
        train, dev, mut model, ..
    } = prepare(cfg)?;
    let encoder = TextEncoder {
        vocab: &model.vocab,
        chars: &model.chars,
        max_word_len: cfg.max_word_len,
        min_word_len: cfg.filter_width,
        max_context: cfg.max_context,
    };
    let encoded = encoder.encode_all(&train);
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_err(&cfg.checkpoint_dir))?;
    let ckpt = best_checkpoint_path(cfg);
    let max_context = cfg.max_context;
    let mut eval_fn = |m: &Model| -> Result<f64, TrainError> {
        let d = dev.as_deref().unwrap_or(&[]);
        let (report, _) = evaluate::evaluate(m, d, max_context).map_err(|e| match e {
            EvalError::Tensor(t) => TrainError::Tensor(t),
            EvalError::Metrics(m) => TrainError::Tensor(TensorError::Invalid {
                op: "dev_eval",
                msg: m.to_string(),
            }),
        })?;
        Ok(report.f1)
    };
    let opts = FitOptions {
        evaluate: dev
            .as_ref()
            .map(|_| &mut eval_fn as &mut dyn FnMut(&Model) -> Result<f64, TrainError>),
        best_checkpoint: Some(ckpt.clone()),
        log: log_out.map(|w| &mut *w as &mut dyn Write),
        stop: None,
    };
    let summary = fit(&mut model, &encoded, cfg.train_config(), opts)?;
    let has_best = summary.best_dev_f1.is_some() && ckpt.exists();
    if !has_best {
        model.save(&ckpt, serde_json::json!({"step": summary.steps}))?;
    }
    let (best, _) = Model::load(&ckpt)?;
    let dev_report = match &dev {
        Some(d) => Some(evaluate::evaluate(&best, d, cfg.max_context)?.0),
        None => None,
    };
    Ok(TrainOutcome {
        model: best,
        summary,
        checkpoint: ckpt,
        dev_report,
    })
}

/// Files written by [`cmd_eval`].
pub struct EvalOutputs {
    pub report: EvalReport,
    pub predictions: BTreeMap<String, String>,
}

/// Score `data_path` and write `report.txt`, `breakdown.csv` and
/// `predictions.json` to `out_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    out_dir: Option<&Path>,
    window: Option<usize>,
    max_context: Option<usize>,
) -> Result<EvalOutputs, CommandError> {
    let (mut model, _) = Model::load(checkpoint)?;
    if let Some(w) = window {
        model.config.window = w;
    }
    let (examples, stats) = data::load_squad(data_path)?;
    if stats.dropped > 0 {
        log::warn!(
            "{} of {} questions could not be aligned and are not scored",
            stats.dropped,
            stats.questions
        );
    }
    let (report, predictions) = evaluate::evaluate(&model, &examples, max_context)?;
    if let Some(dir) = out_dir {
        write_file(&dir.join("report.txt"), report.table().as_bytes())?;
        write_file(&dir.join("breakdown.csv"), report.breakdown_csv()?.as_bytes())?;
        write_predictions(&dir.join("predictions.json"), &predictions)?;
    }
    Ok(EvalOutputs { report, predictions })
}

pub fn write_predictions(path: &Path, predictions: &BTreeMap<String, String>) -> Result<(), CommandError> {
    let json = serde_json::to_string_pretty(predictions).map_err(|e| CommandError::Missing(e.to_string()))?;
    write_file(path, json.as_bytes())
}

/// Question id → answer for every question in `input`, gold answers or not.
pub fn cmd_predict(
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
    window: Option<usize>,
    max_context: Option<usize>,
) -> Result<BTreeMap<String, String>, CommandError> {
    let (mut model, _) = Model::load(checkpoint)?;
    if let Some(w) = window {
        model.config.window = w;
    }
    let json = fs::read_to_string(input).map_err(io_err(input))?;
    let file = data::parse_squad(&json)?;
    let mut out = BTreeMap::new();
    for para in file.data.iter().flat_map(|a| &a.paragraphs) {
        let passage = std::sync::Arc::new(data::squad::Passage {
            tokens: data::tokenize(&para.context),
            text: para.context.clone(),
        });
        if passage.tokens.is_empty() {
            continue;
        }
        for qa in &para.qas {
            let ex = QaExample {
                id: qa.id.clone(),
                passage: std::sync::Arc::clone(&passage),
                question: qa.question.clone(),
                question_tokens: data::tokenize(&qa.question),
                spans: vec![(0, 0)],
                answers: Vec::new(),
            };
            if ex.question_tokens.is_empty() {
                log::warn!("question {} is empty; skipped", qa.id);
                continue;
            }
            let p = evaluate::predict_one(&model, &ex, max_context)?;
            out.insert(qa.id.clone(), p.text);
        }
    }
    if let Some(path) = output {
        write_predictions(path, &out)?;
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Matrix as CSV: header is `corner` then the column tokens, each row
/// starts with its row token.
pub fn matrix_csv(corner: &str, row_tokens: &[&str], col_tokens: &[&str], m: &Tensor) -> String {
    let mut s = String::new();
    s.push_str(&csv_field(corner));
    for t in col_tokens {
        s.push(',');
        s.push_str(&csv_field(t));
    }
    s.push('\n');
    for (i, t) in row_tokens.iter().enumerate() {
        s.push_str(&csv_field(t));
        for j in 0..m.cols() {
            let _ = write!(s, ",{}", m.get(i, j));
        }
        s.push('\n');
    }
    s
}

/// Vector as CSV with a `token,<name>` header.
pub fn vector_csv(name: &str, tokens: &[&str], values: &[f64]) -> String {
    let mut s = format!("token,{name}\n");
    for (t, v) in tokens.iter().zip(values) {
        let _ = writeln!(s, "{},{}", csv_field(t), v);
    }
    s
}

/// Write one CSV per matrix or vector for each question id. Unknown ids
/// are skipped with a warning. Returns the traced ids and their traces.
pub fn cmd_trace(
    checkpoint: &Path,
    data_path: &Path,
    ids: &[String],
    out_dir: &Path,
    max_context: Option<usize>,
) -> Result<Vec<(String, ModelTrace)>, CommandError> {
    let (model, _) = Model::load(checkpoint)?;
    let (examples, _) = data::load_squad(data_path)?;
    let mut out = Vec::new();
    for id in ids {
        let Some(ex) = examples.iter().find(|e| &e.id == id) else {
            log::warn!("question id {id} not found; skipped");
            continue;
        };
        let (c, q) = encode_inputs(&model, ex, max_context);
        let masks = FullMasks::new(&c, &q);
        let trace = model.trace(&masks.input(&c, &q))?;
        let ctoks: Vec<&str> = ex.context_tokens()[..c.len()].iter().map(|t| t.text.as_str()).collect();
        let qtoks: Vec<&str> = ex.question_tokens.iter().map(|t| t.text.as_str()).collect();
        let dir = out_dir.join(id);
        let hops = std::iter::once(&trace.hop1).chain(trace.hop2.as_ref());
        for h in hops {
            let n = h.hop;
            write_file(
                &dir.join(format!("hop{n}_interaction.csv")),
                matrix_csv("context", &ctoks, &qtoks, &h.interaction).as_bytes(),
            )?;
            write_file(
                &dir.join(format!("hop{n}_c2q.csv")),
                matrix_csv("context", &ctoks, &qtoks, &h.c2q).as_bytes(),
            )?;
            write_file(
                &dir.join(format!("hop{n}_q2c.csv")),
                vector_csv("weight", &ctoks, h.q2c.data()).as_bytes(),
            )?;
        }
        if let Some(v) = &trace.query_gate_norms {
            write_file(
                &dir.join("query_gate.csv"),
                vector_csv("gate_norm", &qtoks, v).as_bytes(),
            )?;
        }
        if let Some(v) = &trace.context_gate_norms {
            write_file(
                &dir.join("context_gate.csv"),
                vector_csv("gate_norm", &ctoks, v).as_bytes(),
            )?;
        }
        write_file(
            &dir.join("start.csv"),
            vector_csv("p_start", &ctoks, &trace.start_prob).as_bytes(),
        )?;
        write_file(
            &dir.join("end.csv"),
            vector_csv("p_end", &ctoks, &trace.end_prob).as_bytes(),
        )?;
        let spans = serde_json::json!({
            "id": id,
            "predicted": [trace.span.start, trace.span.end],
            "predicted_text": ex.span_text(trace.span.start, trace.span.end),
            "gold": ex.spans,
            "gold_text": ex.answers,
        });
        write_file(&dir.join("spans.json"), spans.to_string().as_bytes())?;
        out.push((id.clone(), trace));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub f1: f64,
    pub em: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:<62} {:>8} {:>8}", "id", "variant", "dev F1", "dev EM");
    for (i, r) in rows.iter().enumerate() {
        if r.variant == Variant::Full && i > 0 {
            let _ = writeln!(s, "{}", "-".repeat(87));
        }
        let _ = writeln!(
            s,
            "{:<6} {:<62} {:>8.2} {:>8.2}",
            r.variant.label(),
            r.description,
            r.f1,
            r.em
        );
    }
    s
}

/// Train and evaluate each variant under the same budget and seed. With no
/// dev set, scores are on the training data.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>, CommandError> {
    let mut rows = Vec::new();
    for &v in variants {
        let mut c = cfg.clone();
        c.variant = v;
        c.checkpoint_dir = cfg.checkpoint_dir.join(format!("variant_{}", v.label()));
        log::info!("ablation: training variant {v}");
        let outcome = cmd_train(&c, None)?;
        let report = match outcome.dev_report {
            Some(r) => r,
            None => {
                let (train, _) = data::load_squad(required(&c.train_path, "training data")?)?;
                evaluate::evaluate(&outcome.model, &train, c.max_context)?.0
            }
        };
        rows.push(AblationRow {
            variant: v,
            description: v.describe().to_string(),
            f1: report.f1,
            em: report.em,
        });
    }
    Ok(rows)
}
