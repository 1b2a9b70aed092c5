use std::sync::Arc;

use rand::Rng;

use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Result, Tensor, TensorError};

/// Logit added to masked positions before a softmax or a max.
pub const MASK_NEG: f64 = -1.0e30;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>, Axis),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    MaskedSoftmax(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    MaxOverAxis(Var, Axis, Vec<usize>),
    MeanOverAxis(Var, Axis),
    Sum(Var),
    Conv1d(Var, Var, usize),
    Dropout(Var, Vec<f64>),
    Cosine(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    TileRows(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Concat(..) => "concat",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::MaskedLogSoftmax(..) => "masked_log_softmax",
            Op::MaxOverAxis(..) => "max_over_axis",
            Op::MeanOverAxis(..) => "mean_over_axis",
            Op::Sum(..) => "sum",
            Op::Conv1d(..) => "conv1d",
            Op::Dropout(..) => "dropout",
            Op::Cosine(..) => "cosine_similarity",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::TileRows(..) => "tile_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every input of node `k` has an
/// index below `k` and insertion order is already a topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes the loss does not depend on or that were not tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Output shape for a broadcasting binary op: each dim must match or be 1.
fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims2(op)?;
    let (br, bc) = b.dims2(op)?;
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(mismatch(op, a, b)),
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, rows: usize, cols: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if ar == br && ac == bc {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::matrix(rows, cols, data).expect("shape");
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..cols {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            data.push(f(a.data()[ia * ac + ja], b.data()[ib * bc + jb]));
        }
    }
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Sum a full-size gradient back down to a broadcast operand's shape.
fn reduce_to(grad: &Tensor, rows: usize, cols: usize) -> Tensor {
    if grad.rows() == rows && grad.cols() == cols {
        return grad.clone();
    }
    let gc = grad.cols();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..grad.rows() {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if cols == 1 { 0 } else { j };
            out.data_mut()[oi * cols + oj] += grad.data()[i * gc + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `x` with `MASK_NEG` added at masked columns.
fn softmax_rows(x: &Tensor, mask: &[bool]) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = x.dims2("masked_softmax")?;
    let mut out = vec![0.0; r * c];
    let mut log_norm = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row_slice(i);
        let mut shifted = vec![0.0; c];
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            shifted[j] = if mask[j] { row[j] } else { row[j] + MASK_NEG };
            max = max.max(shifted[j]);
        }
        let mut z = 0.0;
        for j in 0..c {
            let e = (shifted[j] - max).exp();
            out[i * c + j] = e;
            z += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
        log_norm.push(max + z.ln());
    }
    Ok((Tensor::matrix(r, c, out)?, log_norm))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Primitive kind that produced `v`.
    pub fn kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Input ids of `v`, used to check the topological-order invariant.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Conv1d(a, b, _)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::MaskedSoftmax(a)
            | Op::MaskedLogSoftmax(a, _)
            | Op::MaxOverAxis(a, ..)
            | Op::MeanOverAxis(a, _)
            | Op::Sum(a)
            | Op::Dropout(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::TileRows(a)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _) => vec![*a],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn push_binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push_binary(a, b, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.dims2("transpose")?;
        let out = t.transpose();
        Ok(self.push_unary(x, out, Op::Transpose(x)))
    }

    /// Elementwise sum; either operand may broadcast along a size-1 dim.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims("add", ta, tb)?;
        let out = broadcast_apply(ta, tb, r, c, |x, y| x + y);
        Ok(self.push_binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims("sub", ta, tb)?;
        let out = broadcast_apply(ta, tb, r, c, |x, y| x - y);
        Ok(self.push_binary(a, b, out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims("mul", ta, tb)?;
        let out = broadcast_apply(ta, tb, r, c, |x, y| x * y);
        Ok(self.push_binary(a, b, out, Op::Mul(a, b)))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push_unary(x, out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let (r0, c0) = self.value(first).dims2("concat")?;
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &x in xs {
                    let t = self.value(x);
                    let (r, c) = t.dims2("concat")?;
                    if c != c0 {
                        return Err(mismatch("concat", self.value(first), t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &x in xs {
                    let t = self.value(x);
                    let (r, c) = t.dims2("concat")?;
                    if r != r0 {
                        return Err(mismatch("concat", self.value(first), t));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &x in xs {
                        data.extend_from_slice(self.value(x).row_slice(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        let rg = xs.iter().any(|x| self.nodes[x.0].requires_grad);
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push_unary(x, out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_unary(x, out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_unary(x, out, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push_unary(x, out, Op::Log(x))
    }

    /// Row-wise softmax over columns where `mask` is true. Masked columns
    /// come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.dims2("masked_softmax")?;
        check_mask("masked_softmax", mask, c)?;
        let (out, _) = softmax_rows(t, mask)?;
        Ok(self.push_unary(x, out, Op::MaskedSoftmax(x)))
    }

    /// Row-wise log-softmax; masked columns hold `MASK_NEG`.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("masked_log_softmax")?;
        check_mask("masked_log_softmax", mask, c)?;
        let (_, log_norm) = softmax_rows(t, mask)?;
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let v = if mask[j] { t.get(i, j) - log_norm[i] } else { MASK_NEG };
                out.set(i, j, v);
            }
        }
        Ok(self.push_unary(x, out, Op::MaskedLogSoftmax(x, mask.to_vec())))
    }

    /// Max along `axis`; `Rows` collapses to `1 × cols`, `Cols` to `rows × 1`.
    /// Ties resolve to the first index.
    pub fn max_over_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("max_over_axis")?;
        if r == 0 || c == 0 {
            return Err(TensorError::Invalid {
                op: "max_over_axis",
                msg: "empty tensor".into(),
            });
        }
        let (out, arg) = match axis {
            Axis::Rows => {
                let mut vals = t.row_slice(0).to_vec();
                let mut arg = vec![0usize; c];
                for i in 1..r {
                    for (j, &v) in t.row_slice(i).iter().enumerate() {
                        if v > vals[j] {
                            vals[j] = v;
                            arg[j] = i;
                        }
                    }
                }
                (Tensor::matrix(1, c, vals)?, arg)
            }
            Axis::Cols => {
                let mut vals = Vec::with_capacity(r);
                let mut arg = Vec::with_capacity(r);
                for i in 0..r {
                    let row = t.row_slice(i);
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    vals.push(row[best]);
                    arg.push(best);
                }
                (Tensor::matrix(r, 1, vals)?, arg)
            }
        };
        Ok(self.push_unary(x, out, Op::MaxOverAxis(x, axis, arg)))
    }

    /// Max over positions of a `len × features` sequence.
    pub fn max_pool_over_time(&mut self, x: Var) -> Result<Var> {
        self.max_over_axis(x, Axis::Rows)
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("mean_over_axis")?;
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, v) in acc.iter_mut().zip(t.row_slice(i)) {
                        *a += v;
                    }
                }
                Tensor::matrix(1, c, acc.into_iter().map(|v| v / r as f64).collect())?
            }
            Axis::Cols => Tensor::matrix(
                r,
                1,
                (0..r).map(|i| t.row_slice(i).iter().sum::<f64>() / c as f64).collect(),
            )?,
        };
        Ok(self.push_unary(x, out, Op::MeanOverAxis(x, axis)))
    }

    /// Sum of all elements as a `1 × 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_unary(x, out, Op::Sum(x))
    }

    /// Valid 1-D convolution over a `len × channels` sequence.
    ///
    /// `weight` is `(width·channels) × filters`; row `u·channels + m` holds the
    /// tap for offset `u` and input channel `m`. Output is
    /// `(len − width + 1) × filters`.
    pub fn conv1d(&mut self, input: Var, weight: Var, width: usize) -> Result<Var> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (len, ch) = ti.dims2("conv1d")?;
        let (wr, filters) = tw.dims2("conv1d")?;
        if width == 0 || wr != width * ch || len < width {
            return Err(mismatch("conv1d", ti, tw));
        }
        let steps = len - width + 1;
        // A window of `width` consecutive rows is contiguous in row-major
        // storage, so the unfolded input is a strided view of the data.
        let mut out = vec![0.0; steps * filters];
        for t in 0..steps {
            let window = &ti.data()[t * ch..(t + width) * ch];
            let orow = &mut out[t * filters..(t + 1) * filters];
            for (p, &x) in window.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let wrow = &tw.data()[p * filters..(p + 1) * filters];
                for (o, w) in orow.iter_mut().zip(wrow) {
                    *o += x * w;
                }
            }
        }
        let out = Tensor::matrix(steps, filters, out)?;
        Ok(self.push_binary(input, weight, out, Op::Conv1d(input, weight, width)))
    }

    /// Inverted dropout: at train time each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1−rate)`.
    /// Outside training (or at rate 0) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let keep: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = t.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_unary(x, out, Op::Dropout(x, keep)))
    }

    /// Cosine similarity of two same-length vectors as a `1 × 1` scalar.
    /// Defined as 0 (with zero gradient) when either operand is the zero
    /// vector.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(mismatch("cosine_similarity", ta, tb));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let na = ta.sum_squares().sqrt();
        let nb = tb.sum_squares().sqrt();
        let v = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        Ok(self.push_binary(a, b, Tensor::scalar(v), Op::Cosine(a, b)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_rows")?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push_unary(x, out, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("slice_cols")?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.push_unary(x, out, Op::SliceCols(x, start)))
    }

    /// Replicate a `1 × c` row `n` times into an `n × c` matrix.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("tile_rows")?;
        if r != 1 {
            return Err(TensorError::Invalid {
                op: "tile_rows",
                msg: format!("expected a single row, got {r}"),
            });
        }
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(n, c, data)?;
        Ok(self.push_unary(x, out, Op::TileRows(x)))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: r,
                });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::matrix(ids.len(), c, data)?;
        Ok(self.push_unary(table, out, Op::GatherRows(table, ids.to_vec())))
    }

    /// Select elements by `(row, col)` into a `1 × n` row.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("pick")?;
        let mut flat = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: i * c + j,
                    len: r * c,
                });
            }
            flat.push(i * c + j);
        }
        let out = Tensor::row(flat.iter().map(|&k| t.data()[k]).collect());
        Ok(self.push_unary(x, out, Op::Pick(x, flat)))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            self.propagate(node, &g, &mut grads);
            grads[k] = Some(g);
        }
        for (k, g) in grads.iter_mut().enumerate() {
            if !self.nodes[k].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &*node.value;
        let shape_like =
            |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape");
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if needs(*a) {
                    let da = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, shape_like(*a, da));
                }
                if needs(*b) {
                    let db = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, shape_like(*b, db));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    let t = self.value(*a);
                    self.accumulate(grads, *a, reduce_to(g, t.rows(), t.cols()));
                }
                if needs(*b) {
                    let t = self.value(*b);
                    let mut gb = reduce_to(g, t.rows(), t.cols());
                    if sign < 0.0 {
                        gb = gb.map(|v| -v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = (g.rows(), g.cols());
                if needs(*a) {
                    let full = broadcast_apply(g, tb, r, c, |gv, bv| gv * bv);
                    self.accumulate(grads, *a, reduce_to(&full, ta.rows(), ta.cols()));
                }
                if needs(*b) {
                    let full = broadcast_apply(g, ta, r, c, |gv, av| gv * av);
                    self.accumulate(grads, *b, reduce_to(&full, tb.rows(), tb.cols()));
                }
            }
            Op::Affine(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for &x in xs {
                    let t = self.value(x);
                    let (r, c) = (t.rows(), t.cols());
                    if needs(x) {
                        let mut part = Vec::with_capacity(r * c);
                        match axis {
                            Axis::Rows => {
                                part.extend_from_slice(&g.data()[offset * c..(offset + r) * c]);
                            }
                            Axis::Cols => {
                                for i in 0..r {
                                    part.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                                }
                            }
                        }
                        self.accumulate(grads, x, shape_like(x, part));
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y));
                self.accumulate(grads, *x, shape_like(*x, d.collect()));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y));
                self.accumulate(grads, *x, shape_like(*x, d.collect()));
            }
            Op::Relu(x) => {
                let t = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 });
                self.accumulate(grads, *x, shape_like(*x, d.collect()));
            }
            Op::Log(x) => {
                let t = self.value(*x);
                let d = g.data().iter().zip(t.data()).map(|(g, v)| g / v);
                self.accumulate(grads, *x, shape_like(*x, d.collect()));
            }
            Op::MaskedSoftmax(x) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::MaskedLogSoftmax(x, mask) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let gsum: f64 = (0..c).filter(|&j| mask[j]).map(|j| gr[j]).sum();
                    for j in 0..c {
                        if mask[j] {
                            d[i * c + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::MaxOverAxis(x, axis, arg) => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        for (j, &i) in arg.iter().enumerate() {
                            d[i * c + j] += g.data()[j];
                        }
                    }
                    Axis::Cols => {
                        for (i, &j) in arg.iter().enumerate() {
                            d[i * c + j] += g.data()[i];
                        }
                    }
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::MeanOverAxis(x, axis) => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = match axis {
                            Axis::Rows => g.data()[j] / r as f64,
                            Axis::Cols => g.data()[i] / c as f64,
                        };
                    }
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                let gv = g.item();
                self.accumulate(grads, *x, shape_like(*x, vec![gv; t.len()]));
            }
            Op::Conv1d(input, weight, width) => {
                let (ti, tw) = (self.value(*input), self.value(*weight));
                let ch = ti.cols();
                let filters = tw.cols();
                let steps = g.rows();
                let span = width * ch;
                if needs(*input) {
                    let mut d = vec![0.0; ti.len()];
                    for t in 0..steps {
                        let grow = g.row_slice(t);
                        let dwin = &mut d[t * ch..t * ch + span];
                        for (p, dv) in dwin.iter_mut().enumerate() {
                            let wrow = &tw.data()[p * filters..(p + 1) * filters];
                            *dv += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *input, shape_like(*input, d));
                }
                if needs(*weight) {
                    let mut d = vec![0.0; tw.len()];
                    for t in 0..steps {
                        let grow = g.row_slice(t);
                        let window = &ti.data()[t * ch..t * ch + span];
                        for (p, &x) in window.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut d[p * filters..(p + 1) * filters];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += x * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *weight, shape_like(*weight, d));
                }
            }
            Op::Dropout(x, keep) => {
                let d = g.data().iter().zip(keep).map(|(g, k)| g * k).collect();
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let na = ta.sum_squares().sqrt();
                let nb = tb.sum_squares().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let cos = y.item();
                let gv = g.item();
                if needs(*a) {
                    let d = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(x, z)| gv * (z / (na * nb) - cos * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, shape_like(*a, d));
                }
                if needs(*b) {
                    let d = tb
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(z, x)| gv * (x / (na * nb) - cos * z / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, shape_like(*b, d));
                }
            }
            Op::SliceRows(x, start) => {
                let t = self.value(*x);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::SliceCols(x, start) => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::TileRows(x) => {
                let c = g.cols();
                let mut d = vec![0.0; c];
                for i in 0..g.rows() {
                    for (dv, gv) in d.iter_mut().zip(g.row_slice(i)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for (dv, gv) in d[id * c..(id + 1) * c].iter_mut().zip(g.row_slice(i)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *table, shape_like(*table, d));
            }
            Op::Pick(x, flat) => {
                let t = self.value(*x);
                let mut d = vec![0.0; t.len()];
                for (k, &idx) in flat.iter().enumerate() {
                    d[idx] += g.data()[k];
                }
                self.accumulate(grads, *x, shape_like(*x, d));
            }
        }
    }
}

fn check_mask(op: &'static str, mask: &[bool], cols: usize) -> Result<()> {
    if mask.len() != cols {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![cols],
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::DegenerateRow { row: 0 });
    }
    Ok(())
}
