//! Bi-directional attention flow between context and question encodings.
//!
//! The same layer structure serves both hops; each hop owns its own
//! interaction weight vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Var, MASK_NEG};
use crate::tensor::{Result, Tensor, TensorError};

/// Interaction weights stored as a `6d × 1` column: blocks for the context
/// encoding, the question encoding and their elementwise product.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w: ParamId,
    pub d: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w: store.weight(format!("{prefix}/w_interaction"), 6 * d, 1, rng),
            d,
        }
    }
}

/// Exported attention state for one hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub hop: u8,
    /// `C × Q` interaction matrix.
    pub interaction: Tensor,
    /// `C × Q` context-to-query weights; rows are distributions.
    pub c2q: Tensor,
    /// `1 × C` query-to-context weights.
    pub q2c: Tensor,
}

fn check_width(op: &'static str, g: &Graph, x: Var, width: usize) -> Result<()> {
    let t = g.value(x);
    if t.cols() != width {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![t.rows(), width],
            rhs: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// `I[c][q] = w · [C_c; Q_q; C_c ∘ Q_q]`.
pub fn interaction(g: &mut Graph, params: &AttentionParams, cenc: Var, qenc: Var) -> Result<Var> {
    let two_d = 2 * params.d;
    check_width("interaction", g, cenc, two_d)?;
    check_width("interaction", g, qenc, two_d)?;
    let w = g.param(params.w);
    let t = &mut g.tape;
    let w_c = t.slice_rows(w, 0, two_d)?;
    let w_q = t.slice_rows(w, two_d, two_d)?;
    let w_cq = t.slice_rows(w, 2 * two_d, two_d)?;
    let c_term = t.matmul(cenc, w_c)?;
    let q_term = t.matmul(qenc, w_q)?;
    let q_term = t.transpose(q_term)?;
    let w_cq = t.transpose(w_cq)?;
    let cw = t.mul(cenc, w_cq)?;
    let qt = t.transpose(qenc)?;
    let cross = t.matmul(cw, qt)?;
    let s = t.add(cross, c_term)?;
    t.add(s, q_term)
}

/// Context-to-query attention. Returns `(Q̃ : C × 2d, a : C × Q)`.
pub fn context_to_query(g: &mut Graph, interaction: Var, qenc: Var, qmask: &[bool]) -> Result<(Var, Var)> {
    let a = g.tape.masked_softmax(interaction, qmask)?;
    let attended = g.tape.matmul(a, qenc)?;
    Ok((attended, a))
}

/// Query-to-context attention. Returns `(C̃ : C × 2d, b : 1 × C)`; the
/// attended context vector is tiled across all `C` rows.
pub fn query_to_context(
    g: &mut Graph,
    interaction: Var,
    cenc: Var,
    qmask: &[bool],
    cmask: &[bool],
) -> Result<(Var, Var)> {
    let (rows, cols) = g.value(interaction).dims2("query_to_context")?;
    let scores = if qmask.iter().all(|&m| m) {
        interaction
    } else {
        let mut fill = Tensor::zeros(1, cols);
        for (j, &m) in qmask.iter().enumerate() {
            if !m {
                fill.set(0, j, MASK_NEG);
            }
        }
        let fill = g.tape.constant(fill);
        g.tape.add(interaction, fill)?
    };
    let t = &mut g.tape;
    let row_max = t.max_over_axis(scores, Axis::Cols)?;
    let row_max = t.transpose(row_max)?;
    let b = t.masked_softmax(row_max, cmask)?;
    let attended = t.matmul(b, cenc)?;
    let tiled = t.tile_rows(attended, rows)?;
    Ok((tiled, b))
}

/// `G_c = [C_c; Q̃_c; C_c ∘ Q̃_c; C_c ∘ C̃_c]`, giving `C × 8d`.
pub fn fuse_g(g: &mut Graph, cenc: Var, c2q: Var, q2c: Var) -> Result<Var> {
    let t = &mut g.tape;
    let cq = t.mul(cenc, c2q)?;
    let cc = t.mul(cenc, q2c)?;
    t.concat(&[cenc, c2q, cq, cc], Axis::Cols)
}

/// Full attention flow layer for one hop.
pub fn attention_flow(
    g: &mut Graph,
    params: &AttentionParams,
    cenc: Var,
    qenc: Var,
    cmask: &[bool],
    qmask: &[bool],
    hop: u8,
) -> Result<(Var, AttentionTrace)> {
    if !(1..=2).contains(&hop) {
        return Err(TensorError::Invalid {
            op: "attention_flow",
            msg: format!("hop must be 1 or 2, got {hop}"),
        });
    }
    let i = interaction(g, params, cenc, qenc)?;
    let (c2q, a) = context_to_query(g, i, qenc, qmask)?;
    let (q2c, b) = query_to_context(g, i, cenc, qmask, cmask)?;
    let out = fuse_g(g, cenc, c2q, q2c)?;
    let trace = AttentionTrace {
        hop,
        interaction: g.value(i).clone(),
        c2q: g.value(a).clone(),
        q2c: g.value(b).clone(),
    };
    Ok((out, trace))
}
