//! LSTM cells and bidirectional sequence runners on the tape.

use rand::Rng;

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// One LSTM direction. Gate blocks along the `4·hidden` axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `input_dim × 4·hidden`
    pub wx: ParamId,
    /// `hidden × 4·hidden`
    pub wh: ParamId,
    /// `1 × 4·hidden`
    pub b: ParamId,
}

impl LstmParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input_dim,
            hidden,
            wx: store.weight(format!("{prefix}/wx"), input_dim, 4 * hidden, rng),
            wh: store.weight(format!("{prefix}/wh"), hidden, 4 * hidden, rng),
            b: store.bias(format!("{prefix}/b"), 4 * hidden),
        }
    }

    /// One cell update from a raw `1 × input_dim` input.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xd = g.value(x).cols();
        if xd != self.input_dim || g.value(h).cols() != self.hidden || g.value(c).cols() != self.hidden {
            return Err(TensorError::ShapeMismatch {
                op: "lstm_step",
                lhs: vec![self.input_dim, self.hidden, self.hidden],
                rhs: vec![xd, g.value(h).cols(), g.value(c).cols()],
            });
        }
        let proj = g.linear(x, self.wx, Some(self.b))?;
        self.step_projected(g, proj, Some((h, c)))
    }

    /// Cell update given `x·Wx + b` already computed. `None` state means the
    /// zero initial state.
    fn step_projected(&self, g: &mut Graph, proj: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let d = self.hidden;
        let gates = match state {
            Some((h, _)) => {
                let wh = g.param(self.wh);
                let hh = g.tape.matmul(h, wh)?;
                g.tape.add(proj, hh)?
            }
            None => proj,
        };
        let t = &mut g.tape;
        let i = t.slice_cols(gates, 0, d)?;
        let i = t.sigmoid(i);
        let f = t.slice_cols(gates, d, d)?;
        let f = t.sigmoid(f);
        let cand = t.slice_cols(gates, 2 * d, d)?;
        let cand = t.tanh(cand);
        let o = t.slice_cols(gates, 3 * d, d)?;
        let o = t.sigmoid(o);
        let ig = t.mul(i, cand)?;
        let c_new = match state {
            Some((_, c)) => {
                let fc = t.mul(f, c)?;
                t.add(fc, ig)?
            }
            None => ig,
        };
        let tc = t.tanh(c_new);
        let h_new = t.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Run over the rows of a `len × input_dim` sequence. Returns the
    /// `len × hidden` outputs in positional order and the final hidden state
    /// (position `len−1` going forward, position 0 going backward).
    pub fn run(&self, g: &mut Graph, xs: Var, reverse: bool) -> Result<(Var, Var)> {
        let len = g.value(xs).rows();
        if len == 0 {
            return Err(TensorError::Invalid {
                op: "lstm",
                msg: "empty sequence".into(),
            });
        }
        let proj = g.linear(xs, self.wx, Some(self.b))?;
        let mut outs = vec![None; len];
        let mut state = None;
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let row = g.tape.slice_rows(proj, t, 1)?;
            let (h, c) = self.step_projected(g, row, state)?;
            outs[t] = Some(h);
            state = Some((h, c));
        }
        let rows: Vec<Var> = outs.into_iter().map(|v| v.expect("every step ran")).collect();
        let last = state.expect("nonempty").0;
        let seq = if rows.len() == 1 {
            rows[0]
        } else {
            g.tape.concat(&rows, Axis::Rows)?
        };
        Ok((seq, last))
    }
}

/// Output of a bidirectional pass.
#[derive(Debug, Clone, Copy)]
pub struct BiOutput {
    /// `len × 2·hidden`: forward outputs then backward outputs per row.
    pub seq: Var,
    /// Forward state at the last valid position.
    pub fwd_last: Var,
    /// Backward state at position 0.
    pub bwd_first: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: LstmParams::new(store, &format!("{prefix}/fwd"), input_dim, hidden, rng),
            bwd: LstmParams::new(store, &format!("{prefix}/bwd"), input_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    /// Bidirectional pass over the valid prefix selected by `mask` (true
    /// positions must form a prefix). Masked rows of the output are zero.
    /// Dropout is applied to the input.
    pub fn run(&self, g: &mut Graph, xs: Var, mask: &[bool]) -> Result<BiOutput> {
        let len = g.value(xs).rows();
        let valid = valid_prefix("bilstm", mask, len)?;
        let xs = g.drop(xs)?;
        let input = if valid < len {
            g.tape.slice_rows(xs, 0, valid)?
        } else {
            xs
        };
        let (f_seq, f_last) = self.fwd.run(g, input, false)?;
        let (b_seq, b_first) = self.bwd.run(g, input, true)?;
        let mut seq = g.tape.concat(&[f_seq, b_seq], Axis::Cols)?;
        if valid < len {
            let pad = g.tape.constant(Tensor::zeros(len - valid, self.output_dim()));
            seq = g.tape.concat(&[seq, pad], Axis::Rows)?;
        }
        Ok(BiOutput {
            seq,
            fwd_last: f_last,
            bwd_first: b_first,
        })
    }
}

/// Number of leading true entries; errors unless the mask is a nonempty
/// prefix of length `len`.
pub(crate) fn valid_prefix(op: &'static str, mask: &[bool], len: usize) -> Result<usize> {
    if mask.len() != len {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![len],
            rhs: vec![mask.len()],
        });
    }
    let valid = mask.iter().take_while(|&&m| m).count();
    if valid == 0 || mask[valid..].iter().any(|&m| m) {
        return Err(TensorError::Invalid {
            op,
            msg: "mask must be a nonempty prefix of true positions".into(),
        });
    }
    Ok(valid)
}
