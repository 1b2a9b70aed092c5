//! Modeling layers, start/end span distributions and the training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamId, ParamKind, ParamStore, Var};
use crate::lstm::BiLstm;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct OutputParams {
    pub modeling: [BiLstm; 2],
    pub end_modeling: BiLstm,
    /// `10d × 1` start scorer.
    pub w_start: ParamId,
    /// `10d × 1` end scorer.
    pub w_end: ParamId,
}

impl OutputParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            modeling: [
                BiLstm::new(store, "modeling/layer0", 8 * d, d, rng),
                BiLstm::new(store, "modeling/layer1", 2 * d, d, rng),
            ],
            end_modeling: BiLstm::new(store, "modeling/end", 2 * d, d, rng),
            w_start: store.weight("output/w_start", 10 * d, 1, rng),
            w_end: store.weight("output/w_end", 10 * d, 1, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2: f64,
    pub aqsl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l2: 1e-4, aqsl: 1.0 }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        Self { l2: 0.0, aqsl: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.aqsl >= 0.0) {
            return Err(TensorError::Invalid {
                op: "loss_weights",
                msg: format!("weights must be nonnegative, got {self:?}"),
            });
        }
        Ok(())
    }

    /// `nll + l2·‖θ‖² + aqsl·aqs` on plain numbers.
    pub fn combine(&self, nll: f64, weight_sum_squares: f64, aqs: f64) -> f64 {
        nll + self.l2 * weight_sum_squares + self.aqsl * aqs
    }
}

/// Two stacked BiLSTMs over `G` (`C × 8d` → `C × 2d`).
pub fn modeling(g: &mut Graph, params: &OutputParams, fused: Var, mask: &[bool]) -> Result<Var> {
    let m = params.modeling[0].run(g, fused, mask)?.seq;
    Ok(params.modeling[1].run(g, m, mask)?.seq)
}

/// Start and end distributions as `1 × C` rows.
#[derive(Debug, Clone, Copy)]
pub struct SpanScores {
    pub start_prob: Var,
    pub end_prob: Var,
    pub start_logp: Var,
    pub end_logp: Var,
}

fn scores(g: &mut Graph, fused: Var, m: Var, w: ParamId) -> Result<Var> {
    let x = g.tape.concat(&[fused, m], Axis::Cols)?;
    let x = g.drop(x)?;
    let col = g.linear(x, w, None)?;
    g.tape.transpose(col)
}

pub fn span_distributions(
    g: &mut Graph,
    params: &OutputParams,
    fused: Var,
    model_start: Var,
    mask: &[bool],
) -> Result<SpanScores> {
    let s = scores(g, fused, model_start, params.w_start)?;
    let model_end = params.end_modeling.run(g, model_start, mask)?.seq;
    let e = scores(g, fused, model_end, params.w_end)?;
    let t = &mut g.tape;
    Ok(SpanScores {
        start_prob: t.masked_softmax(s, mask)?,
        end_prob: t.masked_softmax(e, mask)?,
        start_logp: t.masked_log_softmax(s, mask)?,
        end_logp: t.masked_log_softmax(e, mask)?,
    })
}

/// `−log p^s[start] − log p^e[end]`.
pub fn nll_loss(g: &mut Graph, scores: &SpanScores, gold: (usize, usize)) -> Result<Var> {
    let (a, b) = gold;
    if a > b {
        return Err(TensorError::Invalid {
            op: "nll_loss",
            msg: format!("gold start {a} after end {b}"),
        });
    }
    let t = &mut g.tape;
    let s = t.pick(scores.start_logp, &[(0, a)])?;
    let e = t.pick(scores.end_logp, &[(0, b)])?;
    let both = t.add(s, e)?;
    Ok(t.scale(both, -1.0))
}

/// First index of the largest unmasked entry.
pub fn masked_argmax(values: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// `cos(C_s, q_bow) + cos(C_e, q_bow)` with `s`, `e` the argmax positions of
/// the two distributions (or `pinned`), treated as constants.
pub fn aqs_loss(
    g: &mut Graph,
    scores: &SpanScores,
    cenc: Var,
    qenc: Var,
    cmask: &[bool],
    qmask: &[bool],
    pinned: Option<(usize, usize)>,
) -> Result<Var> {
    let (s, e) = match pinned {
        Some(p) => p,
        None => {
            let ps = g.value(scores.start_prob).data();
            let pe = g.value(scores.end_prob).data();
            let s = masked_argmax(ps, cmask);
            let e = masked_argmax(pe, cmask);
            match (s, e) {
                (Some(s), Some(e)) => (s, e),
                _ => {
                    return Err(TensorError::Invalid {
                        op: "aqs_loss",
                        msg: "context mask has no valid position".into(),
                    })
                }
            }
        }
    };
    let q_len = crate::lstm::valid_prefix("aqs_loss", qmask, g.value(qenc).rows())?;
    let t = &mut g.tape;
    let q = t.slice_rows(qenc, 0, q_len)?;
    let bow = t.mean_over_axis(q, Axis::Rows)?;
    let cs = t.slice_rows(cenc, s, 1)?;
    let ce = t.slice_rows(cenc, e, 1)?;
    let a = t.cosine_similarity(cs, bow)?;
    let b = t.cosine_similarity(ce, bow)?;
    t.add(a, b)
}

/// `Σ‖W‖²` over every `Weight` parameter, on the tape.
pub fn l2_penalty(g: &mut Graph) -> Result<Var> {
    let store = g.store();
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(id, _)| id)
        .collect();
    let mut acc: Option<Var> = None;
    for id in ids {
        let w = g.param(id);
        let sq = g.tape.mul(w, w)?;
        let s = g.tape.sum(sq);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| g.tape.constant(crate::Tensor::scalar(0.0))))
}

fn mean(g: &mut Graph, xs: &[Var], op: &'static str) -> Result<Var> {
    let (first, rest) = xs.split_first().ok_or_else(|| TensorError::Invalid {
        op,
        msg: "empty batch".into(),
    })?;
    let mut acc = *first;
    for &x in rest {
        acc = g.tape.add(acc, x)?;
    }
    Ok(g.tape.scale(acc, 1.0 / xs.len() as f64))
}

/// Mean NLL + `l2`·`Σ‖W‖²` + `aqsl`·mean AQSL on one tape. Terms with zero
/// weight are left off the tape.
pub fn total_loss(g: &mut Graph, nlls: &[Var], aqsls: &[Var], weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut total = mean(g, nlls, "total_loss")?;
    if weights.l2 > 0.0 {
        let l2 = l2_penalty(g)?;
        let l2 = g.tape.scale(l2, weights.l2);
        total = g.tape.add(total, l2)?;
    }
    if weights.aqsl > 0.0 && !aqsls.is_empty() {
        let a = mean(g, aqsls, "total_loss")?;
        let a = g.tape.scale(a, weights.aqsl);
        total = g.tape.add(total, a)?;
    }
    Ok(total)
}
