//! Summarization and the two gated ruminate layers, plus the ablation
//! variant switches.
//!
//! The hop-1 query-aware context `G` is summarized by a BiLSTM into one
//! `2d` vector `s`. The query ruminate layer gates `s` (tiled over the
//! question) into the question encoding; the context ruminate layer tiles
//! `s` over the context, runs it through its own BiLSTM so the tiled copies
//! pick up position information, and gates the result into the context
//! encoding. Each gate computes
//!
//! ```text
//! z = tanh(W1z·S + W2z·X + bz)
//! f = σ(W1f·S + W2f·X + bf)
//! X̃ = f∘X + (1−f)∘z
//! ```
//!
//! and every ablation is a switch on which of those terms are present.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamId, ParamStore, Var};
use crate::lstm::BiLstm;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Ablation 1..=12.
    Ablation(u8),
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Ablation(1),
        Variant::Ablation(2),
        Variant::Ablation(3),
        Variant::Ablation(4),
        Variant::Ablation(5),
        Variant::Ablation(6),
        Variant::Ablation(7),
        Variant::Ablation(8),
        Variant::Ablation(9),
        Variant::Ablation(10),
        Variant::Ablation(11),
        Variant::Ablation(12),
        Variant::Full,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::Ablation(1) => "single-hop baseline",
            Variant::Ablation(2) => "single-hop baseline + L2, similarity loss, windowed decoding",
            Variant::Ablation(3) => "no query ruminate layer",
            Variant::Ablation(4) => "no context ruminate layer",
            Variant::Ablation(5) => "BiLSTM over tiled summary in query ruminate layer",
            Variant::Ablation(6) => "no BiLSTM in context ruminate layer",
            Variant::Ablation(7) => "query gate without question-encoding input",
            Variant::Ablation(8) => "context gate without context-encoding input",
            Variant::Ablation(9) => "query ruminate output without question encoding",
            Variant::Ablation(10) => "context ruminate output without context encoding",
            Variant::Ablation(11) => "query gate without summary input",
            Variant::Ablation(12) => "context gate without summary input",
            Variant::Ablation(_) => "unknown",
        }
    }

    pub fn label(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::Ablation(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant {0:?}: expected 1..12 or \"full\"")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("full") {
            return Ok(Variant::Full);
        }
        match t.parse::<u8>() {
            Ok(n @ 1..=12) => Ok(Variant::Ablation(n)),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

/// Switches derived from a [`Variant`]. One forward code path reads these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Summarize, ruminate and run a second attention hop.
    pub second_hop: bool,
    pub query_ruminate: bool,
    pub context_ruminate: bool,
    pub qrl_bilstm: bool,
    pub crl_bilstm: bool,
    /// Question encoding feeds the query gate's `z` and `f`.
    pub query_input_in_gates: bool,
    /// Context encoding feeds the context gate's `z` and `f`.
    pub context_input_in_gates: bool,
    pub summary_in_query_gates: bool,
    pub summary_in_context_gates: bool,
    /// Keep the `f∘Q` term in the query ruminate output.
    pub query_encoding_in_output: bool,
    /// Keep the `f∘C` term in the context ruminate output.
    pub context_encoding_in_output: bool,
    /// L2 penalty and answer–question similarity loss are active.
    pub regularized: bool,
    /// Decode with the bounded span window.
    pub local_search: bool,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> std::result::Result<Self, UnknownVariant> {
        let mut c = Self {
            variant,
            second_hop: true,
            query_ruminate: true,
            context_ruminate: true,
            qrl_bilstm: false,
            crl_bilstm: true,
            query_input_in_gates: true,
            context_input_in_gates: true,
            summary_in_query_gates: true,
            summary_in_context_gates: true,
            query_encoding_in_output: true,
            context_encoding_in_output: true,
            regularized: true,
            local_search: true,
        };
        match variant {
            Variant::Full => {}
            Variant::Ablation(n @ (1 | 2)) => {
                c.second_hop = false;
                c.query_ruminate = false;
                c.context_ruminate = false;
                c.crl_bilstm = false;
                if n == 1 {
                    c.regularized = false;
                    c.local_search = false;
                }
            }
            Variant::Ablation(3) => c.query_ruminate = false,
            Variant::Ablation(4) => {
                c.context_ruminate = false;
                c.crl_bilstm = false;
            }
            Variant::Ablation(5) => c.qrl_bilstm = true,
            Variant::Ablation(6) => c.crl_bilstm = false,
            Variant::Ablation(7) => c.query_input_in_gates = false,
            Variant::Ablation(8) => c.context_input_in_gates = false,
            Variant::Ablation(9) => {
                c.query_input_in_gates = false;
                c.query_encoding_in_output = false;
            }
            Variant::Ablation(10) => {
                c.context_input_in_gates = false;
                c.context_encoding_in_output = false;
            }
            Variant::Ablation(11) => c.summary_in_query_gates = false,
            Variant::Ablation(12) => c.summary_in_context_gates = false,
            Variant::Ablation(n) => return Err(UnknownVariant(n.to_string())),
        }
        Ok(c)
    }

    pub fn full() -> Self {
        Self::new(Variant::Full).expect("full variant")
    }
}

/// Gate weights for one ruminate layer. The summary-side matrices are absent
/// when the variant drops the summary input, and the encoding-side ones when
/// it drops the encoding input.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub summary_z: Option<ParamId>,
    pub encoding_z: Option<ParamId>,
    pub bias_z: ParamId,
    pub summary_f: Option<ParamId>,
    pub encoding_f: Option<ParamId>,
    pub bias_f: ParamId,
}

impl GateParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        with_summary: bool,
        with_encoding: bool,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, on: bool| on.then(|| store.weight(format!("{prefix}/{name}"), width, width, rng));
        let summary_z = w("w1_z", with_summary);
        let encoding_z = w("w2_z", with_encoding);
        let summary_f = w("w1_f", with_summary);
        let encoding_f = w("w2_f", with_encoding);
        Self {
            summary_z,
            encoding_z,
            bias_z: store.bias(format!("{prefix}/b_z"), width),
            summary_f,
            encoding_f,
            bias_f: store.bias(format!("{prefix}/b_f"), width),
        }
    }
}

/// Summarizer BiLSTM over `G` (`8d` in, `d` per direction).
#[derive(Debug, Clone, Copy)]
pub struct SummarizerParams {
    pub bilstm: BiLstm,
}

impl SummarizerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            bilstm: BiLstm::new(store, "summarizer", 8 * d, d, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RuminateParams {
    pub summarizer: SummarizerParams,
    pub query_gate: Option<GateParams>,
    pub context_gate: Option<GateParams>,
    /// BiLSTM over the tiled summary for the query side (ablation 5 only).
    pub query_bilstm: Option<BiLstm>,
    pub context_bilstm: Option<BiLstm>,
}

impl RuminateParams {
    /// Parameters for the layers `variant` uses; `None` for single-hop
    /// variants.
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, variant: &VariantConfig, rng: &mut R) -> Option<Self> {
        if !variant.second_hop {
            return None;
        }
        let w = 2 * d;
        let summarizer = SummarizerParams::new(store, d, rng);
        let query_bilstm = (variant.query_ruminate && variant.qrl_bilstm)
            .then(|| BiLstm::new(store, "query_ruminate/bilstm", w, d, rng));
        let query_gate = variant.query_ruminate.then(|| {
            GateParams::new(
                store,
                "query_ruminate/gate",
                w,
                variant.summary_in_query_gates,
                variant.query_input_in_gates,
                rng,
            )
        });
        let context_bilstm = (variant.context_ruminate && variant.crl_bilstm)
            .then(|| BiLstm::new(store, "context_ruminate/bilstm", w, d, rng));
        let context_gate = variant.context_ruminate.then(|| {
            GateParams::new(
                store,
                "context_ruminate/gate",
                w,
                variant.summary_in_context_gates,
                variant.context_input_in_gates,
                rng,
            )
        });
        Some(Self {
            summarizer,
            query_gate,
            context_gate,
            query_bilstm,
            context_bilstm,
        })
    }
}

/// `s = [forward state at the last valid position; backward state at
/// position 0]`, a `1 × 2d` row.
pub fn summarize(g: &mut Graph, params: &SummarizerParams, fused: Var, mask: &[bool]) -> Result<Var> {
    let out = params.bilstm.run(g, fused, mask)?;
    g.tape.concat(&[out.fwd_last, out.bwd_first], Axis::Cols)
}

/// Output of one ruminate layer.
#[derive(Debug, Clone, Copy)]
pub struct Ruminated {
    /// `n × 2d` fused encoding.
    pub output: Var,
    /// `n × 2d` gate activations `f`.
    pub gate: Var,
    /// `n × 2d` candidate `z` mixed in with weight `1 − f`.
    pub candidate: Var,
}

#[derive(Debug, Clone, Copy)]
struct GateSwitches {
    use_summary: bool,
    use_encoding: bool,
    keep_encoding_term: bool,
}

/// `z`, `f` and the gated mix for one layer. `summary` is `n × 2d`.
fn gate(g: &mut Graph, params: &GateParams, summary: Var, encoding: Var, sw: GateSwitches) -> Result<Ruminated> {
    let pre = |g: &mut Graph, ws: Option<ParamId>, we: Option<ParamId>, b: ParamId| {
        let mut acc: Option<Var> = None;
        if sw.use_summary {
            let w = ws.ok_or_else(|| missing("summary"))?;
            acc = Some(g.linear(summary, w, None)?);
        }
        if sw.use_encoding {
            let w = we.ok_or_else(|| missing("encoding"))?;
            let term = g.linear(encoding, w, None)?;
            acc = Some(match acc {
                Some(a) => g.tape.add(a, term)?,
                None => term,
            });
        }
        let bv = g.param(b);
        match acc {
            Some(a) => g.tape.add(a, bv),
            None => Err(missing("summary and encoding")),
        }
    };
    let z_pre = pre(g, params.summary_z, params.encoding_z, params.bias_z)?;
    let f_pre = pre(g, params.summary_f, params.encoding_f, params.bias_f)?;
    let t = &mut g.tape;
    let z = t.tanh(z_pre);
    let f = t.sigmoid(f_pre);
    let open = t.one_minus(f);
    let moved = t.mul(open, z)?;
    let output = if sw.keep_encoding_term {
        let kept = t.mul(f, encoding)?;
        t.add(kept, moved)?
    } else {
        moved
    };
    Ok(Ruminated {
        output,
        gate: f,
        candidate: z,
    })
}

fn missing(what: &str) -> TensorError {
    TensorError::Invalid {
        op: "ruminate_gate",
        msg: format!("gate has no {what} weights for this variant"),
    }
}

/// Fuse the summary into the question encoding (`Q × 2d`).
pub fn query_ruminate(
    g: &mut Graph,
    params: &RuminateParams,
    qenc: Var,
    summary: Var,
    qmask: &[bool],
    variant: &VariantConfig,
) -> Result<Ruminated> {
    let gate_params = params.query_gate.as_ref().ok_or_else(|| missing("query"))?;
    let n = g.value(qenc).rows();
    let tiled = g.tape.tile_rows(summary, n)?;
    let s = match &params.query_bilstm {
        Some(bi) => bi.run(g, tiled, qmask)?.seq,
        None => tiled,
    };
    gate(
        g,
        gate_params,
        s,
        qenc,
        GateSwitches {
            use_summary: variant.summary_in_query_gates,
            use_encoding: variant.query_input_in_gates,
            keep_encoding_term: variant.query_encoding_in_output,
        },
    )
}

/// Fuse the summary into the context encoding (`C × 2d`).
pub fn context_ruminate(
    g: &mut Graph,
    params: &RuminateParams,
    cenc: Var,
    summary: Var,
    cmask: &[bool],
    variant: &VariantConfig,
) -> Result<Ruminated> {
    let gate_params = params.context_gate.as_ref().ok_or_else(|| missing("context"))?;
    let n = g.value(cenc).rows();
    let tiled = g.tape.tile_rows(summary, n)?;
    let s = match &params.context_bilstm {
        Some(bi) => bi.run(g, tiled, cmask)?.seq,
        None => tiled,
    };
    gate(
        g,
        gate_params,
        s,
        cenc,
        GateSwitches {
            use_summary: variant.summary_in_context_gates,
            use_encoding: variant.context_input_in_gates,
            keep_encoding_term: variant.context_encoding_in_output,
        },
    )
}

/// Per-position L2 norm of the gate activations.
pub fn gate_norms(gate: &Tensor) -> Vec<f64> {
    gate.to_rows()
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use crate::lstm::reference::{bilstm, Cell};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(variant: Variant, d: usize, seed: u64) -> (ParamStore, RuminateParams, VariantConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vc = VariantConfig::new(variant).unwrap();
        let p = RuminateParams::new(&mut store, d, &vc, &mut rng).unwrap();
        // Nonzero biases so the gates exercise every term.
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).kind == crate::autodiff::ParamKind::Bias {
                let n = store.value(id).len();
                let t = Tensor::row((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
                store.set_value(id, t);
            }
        }
        (store, p, vc)
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let z = store.value(id).map(|_| 0.0);
            store.set_value(id, z);
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::Full);
        assert_eq!("7".parse::<Variant>().unwrap(), Variant::Ablation(7));
        assert!("13".parse::<Variant>().is_err());
        assert!("0".parse::<Variant>().is_err());
        assert!(VariantConfig::new(Variant::Ablation(13)).is_err());
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn variant_switch_table() {
        let v = |n| VariantConfig::new(Variant::Ablation(n)).unwrap();
        assert!(!v(1).second_hop && !v(1).regularized && !v(1).local_search);
        assert!(!v(2).second_hop && v(2).regularized && v(2).local_search);
        assert!(!v(3).query_ruminate && v(3).context_ruminate);
        assert!(v(4).query_ruminate && !v(4).context_ruminate);
        assert!(v(5).qrl_bilstm);
        assert!(!v(6).crl_bilstm && v(6).context_ruminate);
        assert!(!v(7).query_input_in_gates && v(7).query_encoding_in_output);
        assert!(!v(8).context_input_in_gates && v(8).context_encoding_in_output);
        assert!(!v(9).query_input_in_gates && !v(9).query_encoding_in_output);
        assert!(!v(10).context_input_in_gates && !v(10).context_encoding_in_output);
        assert!(!v(11).summary_in_query_gates && v(11).summary_in_context_gates);
        assert!(!v(12).summary_in_context_gates && v(12).summary_in_query_gates);
    }

    #[test]
    fn summary_has_two_d_and_zero_params_give_zero() {
        let (mut store, p, _) = build(Variant::Full, 2, 0);
        zero_all(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::eval(&store);
        let fused = g.tape.constant(rand_matrix(&mut rng, 3, 16));
        let s = summarize(&mut g, &p.summarizer, fused, &[true; 3]).unwrap();
        assert_eq!(g.value(s).shape(), &[1, 4]);
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    fn summarizer_cells(store: &ParamStore, p: &RuminateParams) -> (Vec<Tensor>, Vec<Tensor>) {
        let b = p.summarizer.bilstm;
        (
            vec![
                store.value(b.fwd.wx).clone(),
                store.value(b.fwd.wh).clone(),
                store.value(b.fwd.b).clone(),
            ],
            vec![
                store.value(b.bwd.wx).clone(),
                store.value(b.bwd.wh).clone(),
                store.value(b.bwd.b).clone(),
            ],
        )
    }

    #[test]
    fn summary_matches_reference_final_states() {
        for len in [1usize, 3] {
            let (store, p, _) = build(Variant::Full, 2, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let xs = rand_matrix(&mut rng, len, 16);
            let (f, b) = summarizer_cells(&store, &p);
            let fc = Cell {
                wx: &f[0],
                wh: &f[1],
                b: &f[2],
            };
            let bc = Cell {
                wx: &b[0],
                wh: &b[1],
                b: &b[2],
            };
            let rows = bilstm(&fc, &bc, &xs.to_rows());
            let mut expected = rows[len - 1][..2].to_vec();
            expected.extend_from_slice(&rows[0][2..]);
            let mut g = Graph::eval(&store);
            let x = g.tape.constant(xs);
            let s = summarize(&mut g, &p.summarizer, x, &vec![true; len]).unwrap();
            for (a, e) in g.value(s).data().iter().zip(&expected) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_gate_halves_encoding() {
        let (mut store, p, vc) = build(Variant::Full, 2, 4);
        zero_all(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_matrix(&mut rng, 3, 4);
        let mut g = Graph::eval(&store);
        let qv = g.tape.constant(q.clone());
        let s = g.tape.constant(rand_matrix(&mut rng, 1, 4));
        let out = query_ruminate(&mut g, &p, qv, s, &[true; 3], &vc).unwrap();
        assert_eq!(g.value(out.output), &q.map(|v| 0.5 * v));
    }

    #[test]
    fn variant6_zero_gate_halves_context() {
        let (mut store, p, vc) = build(Variant::Ablation(6), 2, 6);
        assert!(p.context_bilstm.is_none());
        zero_all(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = rand_matrix(&mut rng, 4, 4);
        let mut g = Graph::eval(&store);
        let cv = g.tape.constant(c.clone());
        let s = g.tape.constant(rand_matrix(&mut rng, 1, 4));
        let out = context_ruminate(&mut g, &p, cv, s, &[true; 4], &vc).unwrap();
        assert_eq!(g.value(out.output), &c.map(|v| 0.5 * v));
    }

    #[test]
    fn saturated_gates_pass_encoding_through() {
        let (mut store, p, vc) = build(Variant::Full, 2, 8);
        let qb = p.query_gate.unwrap().bias_f;
        let cb = p.context_gate.unwrap().bias_f;
        store.set_value(qb, Tensor::filled(1, 4, 40.0));
        store.set_value(cb, Tensor::filled(1, 4, 40.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_matrix(&mut rng, 3, 4);
        let c = rand_matrix(&mut rng, 5, 4);
        let mut g = Graph::eval(&store);
        let qv = g.tape.constant(q.clone());
        let cv = g.tape.constant(c.clone());
        let s = g.tape.constant(rand_matrix(&mut rng, 1, 4));
        let qo = query_ruminate(&mut g, &p, qv, s, &[true; 3], &vc).unwrap();
        let co = context_ruminate(&mut g, &p, cv, s, &[true; 5], &vc).unwrap();
        assert!(g.value(qo.output).max_abs_diff(&q) <= 1e-12);
        assert!(g.value(co.output).max_abs_diff(&c) <= 1e-12);
    }

    #[test]
    fn variant9_drops_carry_term() {
        let (store, p, vc) = build(Variant::Ablation(9), 2, 10);
        let gp = p.query_gate.unwrap();
        assert!(gp.encoding_z.is_none() && gp.encoding_f.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = rand_matrix(&mut rng, 3, 4);
        let sv = rand_matrix(&mut rng, 1, 4);
        let mut g = Graph::eval(&store);
        let qv = g.tape.constant(q);
        let s = g.tape.constant(sv.clone());
        let out = query_ruminate(&mut g, &p, qv, s, &[true; 3], &vc).unwrap();
        // Hand evaluation of (1 − f)∘z with z, f from the summary alone.
        let w1z = store.value(gp.summary_z.unwrap());
        let w1f = store.value(gp.summary_f.unwrap());
        let bz = store.value(gp.bias_z);
        let bf = store.value(gp.bias_f);
        for k in 0..4 {
            let mut zp = bz.get(0, k);
            let mut fp = bf.get(0, k);
            for m in 0..4 {
                zp += sv.get(0, m) * w1z.get(m, k);
                fp += sv.get(0, m) * w1f.get(m, k);
            }
            let f = 1.0 / (1.0 + (-fp).exp());
            let expect = (1.0 - f) * zp.tanh();
            for r in 0..3 {
                assert!((g.value(out.output).get(r, k) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn crl_bilstm_makes_tiled_summary_position_dependent() {
        let (store, p, _) = build(Variant::Full, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::eval(&store);
        let s = g.tape.constant(rand_matrix(&mut rng, 1, 4));
        let tiled = g.tape.tile_rows(s, 5).unwrap();
        let out = p.context_bilstm.unwrap().run(&mut g, tiled, &[true; 5]).unwrap();
        let rows = g.value(out.seq).to_rows();
        assert!(rows.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn summary_free_gates_ignore_summary() {
        for (variant, query_side) in [(Variant::Ablation(11), true), (Variant::Ablation(12), false)] {
            let (store, p, vc) = build(variant, 2, 14);
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let enc = rand_matrix(&mut rng, 4, 4);
            let s1 = rand_matrix(&mut rng, 1, 4);
            let s2 = s1.map(|v| v * -3.0 + 0.7);
            let run = |s: &Tensor| {
                let mut g = Graph::eval(&store);
                let e = g.tape.constant(enc.clone());
                let sv = g.tape.constant(s.clone());
                let out = if query_side {
                    query_ruminate(&mut g, &p, e, sv, &[true; 4], &vc).unwrap()
                } else {
                    context_ruminate(&mut g, &p, e, sv, &[true; 4], &vc).unwrap()
                };
                g.value(out.output).clone()
            };
            let a = run(&s1);
            let b = run(&s2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn gate_output_is_convex_mix() {
        let (store, p, vc) = build(Variant::Full, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = rand_matrix(&mut rng, 3, 4);
        let mut g = Graph::eval(&store);
        let qv = g.tape.constant(q.clone());
        let s = g.tape.constant(rand_matrix(&mut rng, 1, 4));
        let out = query_ruminate(&mut g, &p, qv, s, &[true; 3], &vc).unwrap();
        let f = g.value(out.gate).clone();
        let y = g.value(out.output).clone();
        for i in 0..3 {
            for k in 0..4 {
                let fv = f.get(i, k);
                let qv = q.get(i, k);
                // y = f q + (1-f) z ⇒ z = (y - f q)/(1-f)
                let z = (y.get(i, k) - fv * qv) / (1.0 - fv);
                let (lo, hi) = (qv.min(z), qv.max(z));
                assert!(y.get(i, k) >= lo - 1e-12 && y.get(i, k) <= hi + 1e-12);
                assert!((-1.0..=1.0).contains(&z));
            }
        }
    }

    #[test]
    fn gate_norms_are_row_l2() {
        let t = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(gate_norms(&t), vec![5.0, 0.5]);
    }

    #[test]
    fn summarize_and_ruminate_gradients() {
        let (store, p, vc) = build(Variant::Full, 2, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let gt = rand_matrix(&mut rng, 4, 16);
        let ct = rand_matrix(&mut rng, 4, 4);
        let qt = rand_matrix(&mut rng, 3, 4);
        let err = grad_check_params(&store, 1e-5, |g| {
            let fused = g.tape.constant(gt.clone());
            let c = g.tape.constant(ct.clone());
            let q = g.tape.constant(qt.clone());
            let s = summarize(g, &p.summarizer, fused, &[true; 4])?;
            let qo = query_ruminate(g, &p, q, s, &[true; 3], &vc)?;
            let co = context_ruminate(g, &p, c, s, &[true; 4], &vc)?;
            let a = g.tape.mul(qo.output, qo.output)?;
            let b = g.tape.mul(co.output, co.output)?;
            let a = g.tape.sum(a);
            let b = g.tape.sum(b);
            g.tape.add(a, b)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
