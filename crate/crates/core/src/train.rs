//! AdaDelta, the learning-rate schedule and the training loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamKind, ParamStore};
use crate::data::batch::{make_batches, Batch, EncodedExample};
use crate::model::{FullMasks, Model, ModelError};
use crate::output::LossWeights;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("training log: {0}")]
    Io(#[from] std::io::Error),
    #[error("no training examples")]
    Empty,
}

/// AdaDelta with the learning rate applied as a multiplier on the step:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1−ρ) g²
/// Δ     = √(E[Δ²] + ε) / √(E[g²] + ε) · g
/// E[Δ²] ← ρ E[Δ²] + (1−ρ) Δ²
/// θ     ← θ − lr · Δ
/// ```
#[derive(Debug, Clone)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    grad_acc: HashMap<ParamId, Tensor>,
    step_acc: HashMap<ParamId, Tensor>,
}

impl Default for AdaDelta {
    fn default() -> Self {
        Self::new(0.95, 1e-6)
    }
}

impl AdaDelta {
    pub fn new(rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            grad_acc: HashMap::new(),
            step_acc: HashMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, id: ParamId, grad: &Tensor, lr: f64) {
        let n = grad.len();
        let shape = grad.shape();
        let eg = self
            .grad_acc
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        let ed = self
            .step_acc
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        let theta = store.get_mut(id).value_mut();
        let (rho, eps) = (self.rho, self.eps);
        let (eg, ed, th) = (eg.data_mut(), ed.data_mut(), theta.data_mut());
        for k in 0..n {
            let g = grad.data()[k];
            eg[k] = rho * eg[k] + (1.0 - rho) * g * g;
            let delta = (ed[k] + eps).sqrt() / (eg[k] + eps).sqrt() * g;
            ed[k] = rho * ed[k] + (1.0 - rho) * delta * delta;
            th[k] -= lr * delta;
        }
    }
}

/// Starts at `initial`, drops to `decayed` once after `patience`
/// consecutive evaluations without an F1 gain of at least `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    stale: usize,
    has_decayed: bool,
}

impl LrSchedule {
    pub fn new(initial: f64, decayed: f64, patience: usize) -> Self {
        Self {
            initial,
            decayed,
            patience,
            min_delta: 0.1,
            best: None,
            stale: 0,
            has_decayed: false,
        }
    }

    pub fn lr(&self) -> f64 {
        if self.has_decayed {
            self.decayed
        } else {
            self.initial
        }
    }

    pub fn has_decayed(&self) -> bool {
        self.has_decayed
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Record a dev F1; returns true when it is a new best.
    pub fn observe(&mut self, f1: f64) -> bool {
        let improved = self.best.map_or(true, |b| f1 >= b + self.min_delta);
        if improved {
            self.best = Some(f1);
            self.stale = 0;
        } else {
            self.stale += 1;
            if !self.has_decayed && self.stale >= self.patience {
                self.has_decayed = true;
                self.stale = 0;
            }
        }
        improved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    pub patience: usize,
    pub loss: LossWeights,
    pub dropout: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Evaluate on dev every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            lr_initial: 0.5,
            lr_decayed: 0.2,
            patience: 3,
            loss: LossWeights::default(),
            dropout: 0.2,
            seed: 0,
            max_steps: 1000,
            eval_every: 100,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub nll: f64,
    /// `l2 · Σ‖W‖²`.
    pub l2: f64,
    /// Mean unweighted similarity loss.
    pub aqsl: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,nll,l2,aqsl,total,lr";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            self.step, self.nll, self.l2, self.aqsl, self.total, self.lr
        )
    }
}

/// Dropout seed for example `i` of step `step`.
fn example_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Gradients and loss terms for one batch, parameters unchanged.
pub struct BatchGradients {
    pub grads: Vec<(ParamId, Tensor)>,
    pub stats: StepStats,
}

/// Forward and backward over every example of `batch` in parallel, then a
/// sequential reduction in example order.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<BatchGradients, TrainError> {
    let weights = if model.variant.regularized {
        cfg.loss
    } else {
        LossWeights::none()
    };
    let per_example: Vec<Result<(f64, f64, f64, Vec<(ParamId, Tensor)>), TrainError>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let ex = batch.example(i);
            let masks = FullMasks::new(&ex.context, &ex.question);
            let input = masks.input(&ex.context, &ex.question);
            let mut g = Graph::new(&model.store, true, cfg.dropout, example_seed(cfg.seed, step, i));
            let (loss, nll, aqs) = model.example_loss(&mut g, &input, ex.gold, weights.aqsl)?;
            let loss_v = g.value(loss).item();
            let nll_v = g.value(nll).item();
            let aqs_v = aqs.map_or(0.0, |a| g.value(a).item());
            let mut grads = g.tape.backward(loss)?;
            Ok((loss_v, nll_v, aqs_v, g.param_grads(&mut grads)))
        })
        .collect();
    let n = batch.len().max(1) as f64;
    let mut acc: HashMap<ParamId, Tensor> = HashMap::new();
    let mut order: Vec<ParamId> = Vec::new();
    let (mut loss, mut nll, mut aqs) = (0.0, 0.0, 0.0);
    for r in per_example {
        let (l, nl, a, grads) = r?;
        loss += l;
        nll += nl;
        aqs += a;
        for (id, g) in grads {
            match acc.get_mut(&id) {
                Some(t) => t.add_assign(&g),
                None => {
                    order.push(id);
                    acc.insert(id, g);
                }
            }
        }
    }
    let mut grads: Vec<(ParamId, Tensor)> = order
        .into_iter()
        .map(|id| {
            let g = acc.remove(&id).expect("accumulated").map(|v| v / n);
            (id, g)
        })
        .collect();
    let mut l2_term = 0.0;
    if weights.l2 > 0.0 {
        l2_term = weights.l2 * model.store.weight_sum_squares();
        for (id, g) in grads.iter_mut() {
            if model.store.get(*id).kind == ParamKind::Weight {
                let w = model.store.value(*id);
                for (gv, wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *gv += 2.0 * weights.l2 * wv;
                }
            }
        }
    }
    let stats = StepStats {
        step,
        nll: nll / n,
        l2: l2_term,
        aqsl: aqs / n,
        total: loss / n + l2_term,
        lr: 0.0,
    };
    if !stats.total.is_finite() {
        return Err(TrainError::NonFinite { step });
    }
    Ok(BatchGradients { grads, stats })
}

/// Optimizer state plus the schedule, advanced one batch at a time.
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdaDelta,
    pub schedule: LrSchedule,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            optimizer: AdaDelta::default(),
            schedule: LrSchedule::new(config.lr_initial, config.lr_decayed, config.patience),
            config,
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, batch: &Batch) -> Result<StepStats, TrainError> {
        self.step += 1;
        let bg = batch_gradients(model, batch, &self.config, self.step)?;
        let lr = self.schedule.lr();
        for (id, g) in &bg.grads {
            if model.store.get(*id).kind != ParamKind::Frozen {
                self.optimizer.update(&mut model.store, *id, g, lr);
            }
        }
        Ok(StepStats { lr, ..bg.stats })
    }
}

/// Where and how often [`fit`] evaluates and saves.
pub struct FitOptions<'a> {
    /// Returns dev F1 (percent) for the current parameters.
    pub evaluate: Option<&'a mut dyn FnMut(&Model) -> Result<f64, TrainError>>,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
    /// Stop early once this returns true (checked after every step).
    pub stop: Option<&'a mut dyn FnMut(&Model, &StepStats) -> bool>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        Self {
            evaluate: None,
            best_checkpoint: None,
            log: None,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps: usize,
    pub history: Vec<StepStats>,
    pub best_dev_f1: Option<f64>,
    pub lr_decayed: bool,
}

/// Train for `max_steps` steps over length-bucketed batches reshuffled each
/// epoch. On a non-finite loss the error is returned and the best checkpoint
/// already on disk is left untouched.
pub fn fit(
    model: &mut Model,
    train: &[EncodedExample],
    config: TrainConfig,
    mut opts: FitOptions,
) -> Result<FitSummary, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut trainer = Trainer::new(config);
    let mut history = Vec::new();
    if let Some(w) = opts.log.as_deref_mut() {
        writeln!(w, "{}", StepStats::CSV_HEADER)?;
    }
    let min_word_len = model.config.filter_width;
    let mut epoch = 0u64;
    'outer: while trainer.step < config.max_steps {
        let batches = make_batches(
            train,
            config.batch_size,
            Some(config.seed.wrapping_add(epoch)),
            min_word_len,
        );
        epoch += 1;
        for batch in &batches {
            let stats = trainer.step(model, batch)?;
            if let Some(w) = opts.log.as_deref_mut() {
                writeln!(w, "{}", stats.csv_line())?;
            }
            log::debug!("{}", stats.csv_line());
            history.push(stats);
            let at_eval = config.eval_every > 0 && trainer.step % config.eval_every == 0;
            if at_eval {
                if let Some(eval) = opts.evaluate.as_deref_mut() {
                    let f1 = eval(model)?;
                    let improved = trainer.schedule.observe(f1);
                    log::info!("step {} dev F1 {f1:.3} lr {}", trainer.step, trainer.schedule.lr());
                    if improved {
                        if let Some(path) = &opts.best_checkpoint {
                            model.save(path, serde_json::json!({"step": trainer.step, "dev_f1": f1}))?;
                        }
                    }
                }
            }
            if let Some(stop) = opts.stop.as_deref_mut() {
                if stop(model, &stats) {
                    break 'outer;
                }
            }
            if trainer.step >= config.max_steps {
                break 'outer;
            }
        }
    }
    Ok(FitSummary {
        steps: trainer.step,
        history,
        best_dev_f1: trainer.schedule.best(),
        lr_decayed: trainer.schedule.has_decayed(),
    })
}
