//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! before asserting, so `cargo test -- --nocapture` doubles as a report.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rumen::attention::attention_flow;
use rumen::autodiff::{relative_error, Gradients};
use rumen::data::{self, TextEncoder};
use rumen::decode::{decode_span_counted, DEFAULT_WINDOW};
use rumen::harness::{ablation_table, cmd_ablate, prepare, RunConfig};
use rumen::metrics::{em_score, f1_score, score_question};
use rumen::model::FullMasks;
use rumen::output::{aqs_loss, masked_argmax, modeling, nll_loss, span_distributions, total_loss};
use rumen::ruminate::{context_ruminate, query_ruminate, summarize};
use rumen::train::{batch_gradients, fit, FitOptions, StepStats};
use rumen::{
    Axis, CharVocab, Graph, LossWeights, Model, ModelConfig, ModelInput, ParamStore, Tape, Tensor, TensorError,
    Trainer, Var, Variant, Vocab,
};

type Res<T> = Result<T, TensorError>;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const COMPOSITE_H: f64 = 1e-3;
const POINTS: u64 = 10;

/// Timed criteria share one core; run them one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u8, name: &str, ok: bool, detail: &str) {
    println!("criterion {n} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_squad.json")
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        let n = store.value(id).len();
        let t = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
        store.set_value(id, t);
    }
}

/// Weighted sum with fixed random weights, so every output element carries a
/// distinct gradient.
fn project(t: &mut Tape, y: Var, weights: &Tensor) -> Res<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Numeric derivative for composite checks. Composite losses are O(1) while
/// some of their gradients are O(1e-7), so the two-point rule at `H` sits on
/// the rounding floor; a fourth-order rule at a wider step does not. The wide
/// rule is only trusted when it agrees with the narrow one, since ReLU and
/// max kinks inside the wider interval break it.
fn stencil(mut f: impl FnMut(f64) -> Res<f64>, x: f64) -> Res<f64> {
    let h = COMPOSITE_H;
    let (p1, m1) = (f(x + h)?, f(x - h)?);
    let (p2, m2) = (f(x + 2.0 * h)?, f(x - 2.0 * h)?);
    let wide = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    let narrow = (f(x + H)? - f(x - H)?) / (2.0 * H);
    let agree = (wide - narrow).abs() <= 1e-9 + 1e-6 * wide.abs();
    Ok(if agree { wide } else { narrow })
}

/// Every trainable parameter and every input leaf against one backward pass.
fn check_graph<F>(store: &ParamStore, leaves: &[Tensor], f: F) -> Res<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Res<Var>,
{
    let eval = |s: &ParamStore, xs: &[Tensor]| -> Res<f64> {
        let mut g = Graph::eval(s);
        let vars: Vec<Var> = xs.iter().map(|x| g.tape.var(x.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::eval(store);
    let vars: Vec<Var> = leaves.iter().map(|x| g.tape.var(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads: Gradients = g.tape.backward(loss)?;
    let leaf_grads: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
    let param_grads: HashMap<_, _> = g.param_grads(&mut grads).into_iter().collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut work = store.clone();
    for id in store.trainable().collect::<Vec<_>>() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            let numeric = stencil(
                |x| {
                    work.get_mut(id).value_mut().data_mut()[k] = x;
                    eval(&work, leaves)
                },
                orig,
            )?;
            work.get_mut(id).value_mut().data_mut()[k] = orig;
            let a = param_grads.get(&id).map_or(0.0, |t| t.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    let mut xs = leaves.to_vec();
    for i in 0..leaves.len() {
        for k in 0..leaves[i].len() {
            let orig = leaves[i].data()[k];
            let numeric = stencil(
                |x| {
                    xs[i].data_mut()[k] = x;
                    eval(store, &xs)
                },
                orig,
            )?;
            xs[i].data_mut()[k] = orig;
            let a = leaf_grads[i].as_ref().map_or(0.0, |t| t.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Central differences over tape leaves only.
fn check_tape<F>(leaves: &[Tensor], f: F) -> Res<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Res<Var>,
{
    rumen::autodiff::grad_check(leaves, H, f)
}

// Tiny model shared by several criteria.

const D: usize = 2;
const C: usize = 4;
const Q: usize = 3;

fn tiny_vocab() -> (Vocab, CharVocab) {
    let words = [
        "the", "broncos", "won", "super", "bowl", "fifty", "who", "what", "a", "fumble", "team",
    ];
    (
        Vocab::build(words.iter().copied()),
        CharVocab::build(words.iter().copied()),
    )
}

fn tiny_config(variant: Variant, d: usize) -> ModelConfig {
    ModelConfig {
        d,
        word_dim: 3,
        char_dim: 2,
        filters: 2,
        filter_width: 2,
        max_word_len: 6,
        variant,
        window: DEFAULT_WINDOW,
    }
}

fn tiny_model(variant: Variant, d: usize, seed: u64) -> Model {
    let (vocab, chars) = tiny_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let table = rand_tensor(&mut rng, vocab.len(), 3, -1.0, 1.0);
    Model::new(tiny_config(variant, d), vocab, chars, table, seed).unwrap()
}

/// Random token ids for `valid` positions followed by padding up to `len`.
struct RandomText {
    words: Vec<usize>,
    chars: Vec<Vec<usize>>,
    mask: Vec<bool>,
}

impl RandomText {
    fn new(rng: &mut ChaCha8Rng, model: &Model, len: usize, valid: usize) -> Self {
        let width = model.config.filter_width;
        let mut words = Vec::with_capacity(len);
        let mut chars = Vec::with_capacity(len);
        for i in 0..len {
            if i < valid {
                words.push(rng.gen_range(0..model.vocab.len()));
                let n = rng.gen_range(1..=model.config.max_word_len).max(width);
                chars.push((0..n).map(|_| rng.gen_range(0..model.chars.len())).collect());
            } else {
                words.push(0);
                chars.push(vec![0; width]);
            }
        }
        Self {
            words,
            chars,
            mask: (0..len).map(|i| i < valid).collect(),
        }
    }
}

fn input<'a>(c: &'a RandomText, q: &'a RandomText) -> ModelInput<'a> {
    ModelInput {
        context_words: &c.words,
        context_chars: &c.chars,
        context_mask: &c.mask,
        question_words: &q.words,
        question_chars: &q.chars,
        question_mask: &q.mask,
    }
}

// Criterion 1

fn primitive_checks(rng: &mut ChaCha8Rng) -> Res<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let m = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, r, c, -1.5, 1.5);

    let (a, b, w) = (m(rng, C, 2 * D), m(rng, 2 * D, Q), m(rng, C, Q));
    out.push((
        "matmul",
        check_tape(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, &w)
        })?,
    ));

    let (a, b, w) = (m(rng, C, Q), m(rng, 1, Q), m(rng, C, Q));
    out.push((
        "add",
        check_tape(&[a, b], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &w)
        })?,
    ));

    let (a, b, w) = (m(rng, C, Q), m(rng, C, Q), m(rng, C, Q));
    out.push((
        "mul",
        check_tape(&[a, b], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &w)
        })?,
    ));

    let (a, b, w) = (m(rng, C, 2), m(rng, C, 3), m(rng, C, 5));
    out.push((
        "concat_cols",
        check_tape(&[a, b], |t, v| {
            let y = t.concat(&[v[0], v[1]], Axis::Cols)?;
            project(t, y, &w)
        })?,
    ));

    let (a, b, w) = (m(rng, 1, Q), m(rng, 2, Q), m(rng, 3, Q));
    out.push((
        "concat_rows",
        check_tape(&[a, b], |t, v| {
            let y = t.concat(&[v[0], v[1]], Axis::Rows)?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, C, Q));
    out.push((
        "tanh",
        check_tape(&[a], |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, C, Q));
    out.push((
        "sigmoid",
        check_tape(&[a], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, C, Q));
    let mask = [true, true, false];
    out.push((
        "masked_softmax",
        check_tape(&[a], |t, v| {
            let y = t.masked_softmax(v[0], &mask)?;
            project(t, y, &w)
        })?,
    ));

    // The masked column holds a constant sentinel; nothing downstream reads it.
    let (a, mut w) = (m(rng, 1, C), m(rng, 1, C));
    w.set(0, 1, 0.0);
    let mask = [true, false, true, true];
    out.push((
        "masked_log_softmax",
        check_tape(&[a], |t, v| {
            let y = t.masked_log_softmax(v[0], &mask)?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, C, 1));
    out.push((
        "max_over_cols",
        check_tape(&[a], |t, v| {
            let y = t.max_over_axis(v[0], Axis::Cols)?;
            let y = t.transpose(y)?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, 1, Q));
    out.push((
        "mean_over_rows",
        check_tape(&[a], |t, v| {
            let y = t.mean_over_axis(v[0], Axis::Rows)?;
            project(t, y, &w)
        })?,
    ));

    let (x, k, w) = (m(rng, 6, 2), m(rng, 3 * 2, 4), m(rng, 4, 4));
    out.push((
        "conv1d",
        check_tape(&[x, k], |t, v| {
            let y = t.conv1d(v[0], v[1], 3)?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, 1, Q));
    out.push((
        "max_pool_over_time",
        check_tape(&[a], |t, v| {
            let y = t.max_pool_over_time(v[0])?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, C, Q));
    let seed = rng.gen::<u64>();
    out.push((
        "dropout",
        check_tape(&[a], |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(v[0], 0.3, true, &mut r)?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, C, Q), m(rng, C, Q));
    let k = rng.gen_range(-2.0..2.0);
    out.push((
        "scale",
        check_tape(&[a], |t, v| {
            let y = t.scale(v[0], k);
            project(t, y, &w)
        })?,
    ));

    let (a, b) = (m(rng, 1, 2 * D), m(rng, 1, 2 * D));
    out.push((
        "cosine_similarity",
        check_tape(&[a, b], |t, v| t.cosine_similarity(v[0], v[1]))?,
    ));

    let (a, w) = (m(rng, C, 6), m(rng, C, 2));
    out.push((
        "slice_cols",
        check_tape(&[a], |t, v| {
            let y = t.slice_cols(v[0], 2, 2)?;
            project(t, y, &w)
        })?,
    ));

    let (a, w) = (m(rng, 1, 2 * D), m(rng, C, 2 * D));
    out.push((
        "tile_rows",
        check_tape(&[a], |t, v| {
            let y = t.tile_rows(v[0], C)?;
            project(t, y, &w)
        })?,
    ));

    Ok(out)
}

fn composite_checks(rng: &mut ChaCha8Rng, point: u64) -> Res<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let model = tiny_model(Variant::Full, D, 100 + point);
    let mut store = model.store.clone();
    randomize(&mut store, rng, 0.8);
    let ctext = RandomText::new(rng, &model, C, C);
    let qtext = RandomText::new(rng, &model, Q, Q);
    let (cmask, qmask) = (vec![true; C], vec![true; Q]);

    let w = rand_tensor(rng, C, D, -1.0, 1.0);
    out.push((
        "embed_sequence",
        check_graph(&store, &[], |g, _| {
            let y = model.embed.embed_sequence(g, &ctext.words, &ctext.chars)?;
            project(&mut g.tape, y, &w)
        })?,
    ));

    let leaves = [
        rand_tensor(rng, C, 2 * D, -1.0, 1.0),
        rand_tensor(rng, Q, 2 * D, -1.0, 1.0),
    ];
    let w = rand_tensor(rng, C, 8 * D, -1.0, 1.0);
    out.push((
        "attention_flow",
        check_graph(&store, &leaves, |g, v| {
            let (y, _) = attention_flow(g, &model.layers.hop1, v[0], v[1], &cmask, &qmask, 1)?;
            project(&mut g.tape, y, &w)
        })?,
    ));

    let rum = model.layers.ruminate.expect("full model has ruminate layers");
    let leaves = [
        rand_tensor(rng, C, 8 * D, -1.0, 1.0),
        rand_tensor(rng, C, 2 * D, -1.0, 1.0),
        rand_tensor(rng, Q, 2 * D, -1.0, 1.0),
    ];
    let (wq, wc) = (
        rand_tensor(rng, Q, 2 * D, -1.0, 1.0),
        rand_tensor(rng, C, 2 * D, -1.0, 1.0),
    );
    out.push((
        "summarize+ruminates",
        check_graph(&store, &leaves, |g, v| {
            let s = summarize(g, &rum.summarizer, v[0], &cmask)?;
            let qr = query_ruminate(g, &rum, v[2], s, &qmask, &model.variant)?;
            let cr = context_ruminate(g, &rum, v[1], s, &cmask, &model.variant)?;
            let a = project(&mut g.tape, qr.output, &wq)?;
            let b = project(&mut g.tape, cr.output, &wc)?;
            g.tape.add(a, b)
        })?,
    ));

    let leaves = [rand_tensor(rng, C, 8 * D, -1.0, 1.0)];
    let gold_a = rng.gen_range(0..C);
    let gold_b = rng.gen_range(gold_a..C);
    out.push((
        "span_distributions",
        check_graph(&store, &leaves, |g, v| {
            let m = modeling(g, &model.layers.output, v[0], &cmask)?;
            let s = span_distributions(g, &model.layers.output, v[0], m, &cmask)?;
            nll_loss(g, &s, (gold_a, gold_b))
        })?,
    ));

    let inp = input(&ctext, &qtext);
    let pinned = {
        let mut g = Graph::eval(&store);
        let f = model.forward(&mut g, &inp)?;
        let s = masked_argmax(g.value(f.scores.start_prob).data(), &cmask).unwrap();
        let e = masked_argmax(g.value(f.scores.end_prob).data(), &cmask).unwrap();
        (s, e)
    };
    let weights = LossWeights { l2: 1e-2, aqsl: 1.0 };
    out.push((
        "total_loss",
        check_graph(&store, &[], |g, _| {
            let f = model.forward(g, &inp)?;
            let nll = nll_loss(g, &f.scores, (gold_a, gold_b))?;
            let aqs = aqs_loss(
                g,
                &f.scores,
                f.context_enc,
                f.question_enc,
                &cmask,
                &qmask,
                Some(pinned),
            )?;
            total_loss(g, &[nll], &[aqs], &weights)
        })?,
    ));
    Ok(out)
}

#[test]
fn criterion_1_gradient_suite() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut worst: HashMap<&'static str, f64> = HashMap::new();
    let mut order: Vec<&'static str> = Vec::new();
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let mut results = primitive_checks(&mut rng).unwrap();
        results.extend(composite_checks(&mut rng, point).unwrap());
        for (name, err) in results {
            if !worst.contains_key(name) {
                order.push(name);
            }
            let e = worst.entry(name).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let elapsed = t0.elapsed();
    let failing: Vec<String> = order
        .iter()
        .filter(|n| worst[*n] > TOL)
        .map(|n| format!("{n}={:.2e}", worst[*n]))
        .collect();
    let max_err = worst.values().cloned().fold(0.0, f64::max);
    let ok = failing.is_empty() && elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient suite",
        ok,
        &format!(
            "{} checks x {POINTS} points, max rel err {max_err:.2e}, {:.1}s{}",
            order.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failing.join(" "))
            }
        ),
    );
    for n in &order {
        println!("  {n:<22} {:.2e}", worst[n]);
    }
    assert!(ok);
}

// Criterion 2

/// Brute force over all `(a, a′)` with `0 ≤ a′ − a ≤ window`, first maximum
/// in `(a, a′)` lexicographic order.
fn brute_force_span(ps: &[f64], pe: &[f64], window: usize) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for a in 0..ps.len() {
        for b in a..ps.len().min(a.saturating_add(window).saturating_add(1)) {
            let p = ps[a] * pe[b];
            if p > best.2 {
                best = (a, b, p);
            }
        }
    }
    best
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if coarse {
                rng.gen_range(1..4) as f64
            } else {
                -rng.gen_range(1e-12f64..1.0).ln()
            }
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

#[test]
fn criterion_2_decoder_oracle() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let windows = [0usize, 3, 15];
    let mut mismatches = Vec::new();
    for trial in 0..200 {
        let n = rng.gen_range(1..=60);
        let coarse = trial % 4 == 0;
        let ps = random_distribution(&mut rng, n, coarse);
        let pe = random_distribution(&mut rng, n, coarse);
        let w = windows[trial % 3];
        let (got, _) = decode_span_counted(&ps, &pe, w).unwrap();
        let want = brute_force_span(&ps, &pe, w);
        if (got.start, got.end) != (want.0, want.1) || got.prob.to_bits() != want.2.to_bits() {
            mismatches.push(format!("trial {trial}: got {got:?}, want {want:?}"));
        }
    }

    let sizes = [1_000usize, 10_000, 100_000];
    let mut per_token = Vec::new();
    for &n in &sizes {
        let ps = random_distribution(&mut rng, n, false);
        let pe = random_distribution(&mut rng, n, false);
        let mut worst = 0usize;
        for &w in &windows {
            worst = worst.max(decode_span_counted(&ps, &pe, w).unwrap().1);
        }
        let sorted: Vec<f64> = {
            let mut v = ps.clone();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        };
        worst = worst.max(decode_span_counted(&sorted, &pe, DEFAULT_WINDOW).unwrap().1);
        let rising: Vec<f64> = sorted.iter().rev().cloned().collect();
        worst = worst.max(decode_span_counted(&rising, &pe, DEFAULT_WINDOW).unwrap().1);
        per_token.push(worst as f64 / n as f64);
    }
    let spread = per_token.iter().cloned().fold(0.0, f64::max) / per_token.iter().cloned().fold(f64::MAX, f64::min);
    let linear = per_token.iter().all(|&r| r <= 8.0) && spread < 1.5;
    let ok = mismatches.is_empty() && linear;
    report(
        2,
        "decoder oracle",
        ok,
        &format!(
            "200 random cases, {} mismatches; ops per token {:?}",
            mismatches.len(),
            per_token.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ),
    );
    for m in mismatches.iter().take(5) {
        println!("  {m}");
    }
    assert!(ok);
}

// Criterion 3

/// Independent normalizer: character classes are handled in one pass over a
/// token stream rather than by string rewriting.
fn oracle_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut push = |cur: &mut String| {
        if !cur.is_empty() && cur != "a" && cur != "an" && cur != "the" {
            out.push(cur.clone());
        }
        cur.clear();
    };
    // Punctuation is deleted in place, so it joins its neighbours; any other
    // non-word character separates tokens.
    let kept: String = s.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let lowered = kept.to_lowercase();
    let mut chunk = String::new();
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            for part in split_word_runs(&chunk) {
                cur.push_str(&part);
                push(&mut cur);
            }
            chunk.clear();
        } else {
            chunk.push(ch);
        }
    }
    for part in split_word_runs(&chunk) {
        cur.push_str(&part);
        push(&mut cur);
    }
    out
}

/// Split a whitespace-free chunk so that articles bounded by non-word
/// characters become their own pieces; the pieces are rejoined unless they
/// are articles.
fn split_word_runs(chunk: &str) -> Vec<String> {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut runs: Vec<(bool, String)> = Vec::new();
    for ch in chunk.chars() {
        let w = is_word(ch);
        match runs.last_mut() {
            Some((kind, s)) if *kind == w => s.push(ch),
            _ => runs.push((w, ch.to_string())),
        }
    }
    // Articles inside a chunk turn into a separator; everything else glues.
    let mut pieces = Vec::new();
    let mut cur = String::new();
    for (w, s) in runs {
        if w && matches!(s.as_str(), "a" | "an" | "the") {
            if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push_str(&s);
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
}

fn oracle_f1(pred: &str, gold: &str) -> f64 {
    let p = oracle_tokens(pred);
    let g = oracle_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let mut bag: HashMap<&String, i64> = HashMap::new();
    for t in &g {
        *bag.entry(t).or_default() += 1;
    }
    let mut common = 0i64;
    for t in &p {
        let c = bag.entry(t).or_default();
        if *c > 0 {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn oracle_em(pred: &str, gold: &str) -> f64 {
    f64::from(oracle_tokens(pred) == oracle_tokens(gold))
}

fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "a",
        "an",
        "the",
        "The",
        "A",
        "super",
        "Bowl",
        "bowl",
        "50",
        "fumble",
        "Fumble",
        "three",
        "turnovers",
        "é",
        "Ünï",
        "naïve",
        "x_y",
        "",
        " ",
        "  ",
        "\t",
        ",",
        ".",
        "'",
        "\"",
        "-",
        "(",
        ")",
        "$",
        "!",
        "—",
        "’",
        "an.",
        "the-",
        "a,",
    ];
    let n = rng.gen_range(0..8);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(PIECES.choose(rng).unwrap());
        if rng.gen_bool(0.6) {
            s.push(' ');
        }
    }
    s
}

#[test]
fn criterion_3_metric_oracle() {
    let _serial = serial();
    let mut failures = Vec::new();
    let mut expect = |label: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{label}: got {got}, want {want}"));
        }
    };
    expect("f1 identical", f1_score("a fumble", "a fumble"), 1.0, 0.0);
    expect(
        "f1 table error example",
        f1_score("three turnovers", "a fumble"),
        0.0,
        0.0,
    );
    expect("f1 Super Bowl 50", f1_score("Super Bowl 50", "Super Bowl"), 0.8, 1e-12);
    expect("em Fumble vs a fumble", em_score("Fumble", "a fumble"), 1.0, 0.0);
    expect("em identical", em_score("Denver Broncos", "Denver Broncos"), 1.0, 0.0);
    expect("em disjoint", em_score("Carolina", "Denver"), 0.0, 0.0);
    let golds = ["a fumble", "a fumble", "Fumble"];
    let (f1, em) = score_question("a fumble", &golds).unwrap();
    expect("table golds f1", f1, 1.0, 0.0);
    expect("table golds em", em, 1.0, 0.0);
    let (f1, em) = score_question("three turnovers", &golds).unwrap();
    expect("table error f1", f1, 0.0, 0.0);
    expect("table error em", em, 0.0, 0.0);
    let (f1, em) = score_question("Levi's Stadium", &["Santa Clara", "the stadium", "Levi's Stadium"]).unwrap();
    expect("third gold f1", f1, 1.0, 0.0);
    expect("third gold em", em, 1.0, 0.0);
    if score_question::<&str>("x", &[]).is_ok() {
        failures.push("empty gold list accepted".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut disagreements = Vec::new();
    for _ in 0..1000 {
        let (p, g) = (fuzz_string(&mut rng), fuzz_string(&mut rng));
        let (f, e) = (f1_score(&p, &g), em_score(&p, &g));
        let (of, oe) = (oracle_f1(&p, &g), oracle_em(&p, &g));
        if (f - of).abs() > 1e-12 || e != oe {
            disagreements.push(format!("{p:?} vs {g:?}: ({f}, {e}) oracle ({of}, {oe})"));
        }
    }
    let ok = failures.is_empty() && disagreements.is_empty();
    report(
        3,
        "metric oracle",
        ok,
        &format!(
            "{} hand-case failures, {} / 1000 fuzz disagreements",
            failures.len(),
            disagreements.len()
        ),
    );
    for f in failures.iter().chain(disagreements.iter()).take(8) {
        println!("  {f}");
    }
    assert!(ok);
}

// Criterion 4

/// Single-hop reader assembled layer by layer from a model's parameters.
fn direct_single_hop(model: &Model, inp: &ModelInput) -> Res<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::eval(&model.store);
    let l = &model.layers;
    let xc = model
        .embed
        .embed_sequence(&mut g, inp.context_words, inp.context_chars)?;
    let xq = model
        .embed
        .embed_sequence(&mut g, inp.question_words, inp.question_chars)?;
    let c = l.encoder.encode(&mut g, xc, inp.context_mask)?;
    let q = l.encoder.encode(&mut g, xq, inp.question_mask)?;
    let (fused, _) = attention_flow(&mut g, &l.hop1, c, q, inp.context_mask, inp.question_mask, 1)?;
    let m = modeling(&mut g, &l.output, fused, inp.context_mask)?;
    let s = span_distributions(&mut g, &l.output, fused, m, inp.context_mask)?;
    let n = inp.context_mask.iter().filter(|&&b| b).count();
    Ok((
        g.value(s.start_prob).data()[..n].to_vec(),
        g.value(s.end_prob).data()[..n].to_vec(),
    ))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn criterion_4_structural_equivalence() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bidaf_mismatch = 0;
    let mut no_extra_params = true;
    for i in 0..20 {
        let model = tiny_model(Variant::Ablation(2), 3, 400 + i);
        no_extra_params &= model.layers.ruminate.is_none()
            && model.layers.hop2.is_none()
            && model
                .store
                .iter()
                .all(|(_, p)| !p.name.starts_with("hop2") && !p.name.contains("ruminate"));
        let (cl, ql) = (rng.gen_range(2..12), rng.gen_range(1..6));
        let ctext = RandomText::new(&mut rng, &model, cl + 2, cl);
        let qtext = RandomText::new(&mut rng, &model, ql + 1, ql);
        let inp = input(&ctext, &qtext);
        let (ps, pe) = model.distributions(&inp).unwrap();
        let (ds, de) = direct_single_hop(&model, &inp).unwrap();
        if bits(&ps) != bits(&ds) || bits(&pe) != bits(&de) {
            bidaf_mismatch += 1;
        }
    }

    // Perturbing the summarizer changes `s`; variants that keep the summary
    // out of a gate must not notice on that side.
    let mut invariance_failures = Vec::new();
    let mut s_moved = true;
    for variant in [Variant::Ablation(11), Variant::Ablation(12)] {
        for i in 0..10 {
            let model = tiny_model(variant, 2, 500 + i);
            let cl = rng.gen_range(2..8);
            let ql = rng.gen_range(1..5);
            let ctext = RandomText::new(&mut rng, &model, cl, cl);
            let qtext = RandomText::new(&mut rng, &model, ql, ql);
            let inp = input(&ctext, &qtext);
            let mut perturbed = model.clone();
            let summ = model.layers.ruminate.unwrap().summarizer.bilstm;
            let mut prng = ChaCha8Rng::seed_from_u64(900 + i);
            for id in [summ.fwd.wx, summ.fwd.b, summ.bwd.wx, summ.bwd.b] {
                let old = perturbed.store.value(id);
                let noise = (0..old.len()).map(|_| prng.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
                let t = Tensor::new(
                    old.shape().to_vec(),
                    old.data().iter().zip(&noise).map(|(a, b)| a + b).collect(),
                )
                .unwrap();
                perturbed.store.set_value(id, t);
            }
            let side = |m: &Model| {
                let mut g = Graph::eval(&m.store);
                let f = m.forward(&mut g, &inp).unwrap();
                let s = g.value(f.summary.unwrap()).data().to_vec();
                let r = if variant == Variant::Ablation(11) {
                    f.query_ruminated
                } else {
                    f.context_ruminated
                };
                (s, g.value(r.unwrap().output).data().to_vec())
            };
            let (s0, y0) = side(&model);
            let (s1, y1) = side(&perturbed);
            s_moved &= s0 != s1;
            if bits(&y0) != bits(&y1) {
                invariance_failures.push(format!("variant {variant}, instance {i}"));
            }
        }
    }
    let ok = bidaf_mismatch == 0 && no_extra_params && invariance_failures.is_empty() && s_moved;
    report(
        4,
        "structural equivalence",
        ok,
        &format!(
            "variant 2 vs direct single hop: {bidaf_mismatch}/20 differ; variants 11/12 s-sensitive outputs: {}",
            invariance_failures.len()
        ),
    );
    assert!(ok);
}

// Criterion 5

#[test]
fn criterion_5_overfit() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut cfg = RunConfig::desk();
    cfg.train_path = Some(fixture());
    cfg.dropout = 0.0;
    let p = prepare(&cfg).unwrap();
    let mut model = p.model;
    let enc = TextEncoder {
        vocab: &model.vocab,
        chars: &model.chars,
        max_word_len: cfg.max_word_len,
        min_word_len: cfg.filter_width,
        max_context: None,
    };
    let encoded = enc.encode_all(&p.train);
    assert_eq!(encoded.len(), 16);
    let train = p.train.clone();
    let mut reached = None;
    let mut stop = |m: &Model, s: &StepStats| {
        if s.step % 5 != 0 {
            return false;
        }
        let (r, _) = rumen::evaluate::evaluate(m, &train, None).unwrap();
        if r.em == 100.0 {
            reached = Some(s.step);
            return true;
        }
        false
    };
    let mut tc = cfg.train_config();
    tc.max_steps = 500;
    let opts = FitOptions {
        stop: Some(&mut stop),
        ..Default::default()
    };
    let summary = fit(&mut model, &encoded, tc, opts).unwrap();
    let elapsed = t0.elapsed();
    let losses: Vec<f64> = summary.history.iter().map(|s| s.total).collect();

    // Smoothed: the mean over each 50-step window is below the mean over the
    // 50 steps before it.
    let w = 50;
    let mean = |a: usize| losses[a..a + w].iter().sum::<f64>() / w as f64;
    let mut rises = Vec::new();
    for end in (2 * w)..=losses.len() {
        let (prev, cur) = (mean(end - 2 * w), mean(end - w));
        if cur >= prev {
            rises.push(end);
        }
    }
    let enough = losses.len() >= 2 * w;
    let ok = reached.is_some() && elapsed < Duration::from_secs(600) && rises.is_empty() && enough;
    report(
        5,
        "overfit",
        ok,
        &format!(
            "train EM 100% at step {}, {:.0}s, {} window rises over {} steps",
            reached.map_or("never".into(), |s| s.to_string()),
            elapsed.as_secs_f64(),
            rises.len(),
            losses.len()
        ),
    );
    assert!(ok);
}

// Criterion 6

fn sums_to_one(row: &[f64], mask: &[bool]) -> bool {
    let s: f64 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    let masked_zero = row.iter().zip(mask).all(|(v, &m)| m || *v == 0.0);
    (s - 1.0).abs() <= 1e-9 && masked_zero
}

#[test]
fn criterion_6_normalization_invariants() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    let (mut aqs_min, mut aqs_max) = (f64::MAX, f64::MIN);
    let variants = Variant::ALL;
    for i in 0..100u64 {
        let variant = variants[i as usize % variants.len()];
        let mut model = tiny_model(variant, 2 + (i as usize % 3), 600 + i);
        let scale = [0.5, 1.0, 3.0][i as usize % 3];
        randomize(&mut model.store, &mut rng, scale);
        let (cl, ql) = (rng.gen_range(1..14), rng.gen_range(1..7));
        let (cpad, qpad) = (rng.gen_range(0..4), rng.gen_range(0..3));
        let ctext = RandomText::new(&mut rng, &model, cl + cpad, cl);
        let qtext = RandomText::new(&mut rng, &model, ql + qpad, ql);
        let inp = input(&ctext, &qtext);
        let (cmask, qmask) = (&ctext.mask, &qtext.mask);

        let trace = model.trace(&inp).unwrap();
        for hop in std::iter::once(&trace.hop1).chain(trace.hop2.as_ref()) {
            for (r, row) in hop.c2q.to_rows().iter().enumerate() {
                if !sums_to_one(row, qmask) {
                    problems.push(format!("instance {i} hop {} c2q row {r}", hop.hop));
                }
            }
            if !sums_to_one(hop.q2c.data(), cmask) {
                problems.push(format!("instance {i} hop {} q2c", hop.hop));
            }
        }

        let mut g = Graph::eval(&model.store);
        let f = model.forward(&mut g, &inp).unwrap();
        for (name, v) in [("start", f.scores.start_prob), ("end", f.scores.end_prob)] {
            if !sums_to_one(g.value(v).data(), cmask) {
                problems.push(format!("instance {i} {name} distribution"));
            }
        }
        let aqs = aqs_loss(&mut g, &f.scores, f.context_enc, f.question_enc, cmask, qmask, None).unwrap();
        let a = g.value(aqs).item();
        aqs_min = aqs_min.min(a);
        aqs_max = aqs_max.max(a);
        if !(-2.0..=2.0).contains(&a) {
            problems.push(format!("instance {i} aqsl {a}"));
        }

        let sides = [
            (f.query_ruminated, model.variant.query_encoding_in_output),
            (f.context_ruminated, model.variant.context_encoding_in_output),
        ];
        // The encoding input is whatever the gate saw; recompute it from the
        // hop-1 encodings the forward pass exposes.
        let encs = [f.question_enc, f.context_enc];
        for ((r, keeps_encoding), enc) in sides.into_iter().zip(encs) {
            let Some(r) = r else { continue };
            let (y, z, x) = (g.value(r.output), g.value(r.candidate), g.value(enc));
            for k in 0..y.len() {
                let other = if keeps_encoding { x.data()[k] } else { 0.0 };
                let (lo, hi) = (other.min(z.data()[k]), other.max(z.data()[k]));
                let v = y.data()[k];
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    problems.push(format!("instance {i} variant {variant} gate element {k}"));
                    break;
                }
            }
        }
    }
    let ok = problems.is_empty();
    report(
        6,
        "normalization invariants",
        ok,
        &format!(
            "100 instances, {} violations, AQSL range [{aqs_min:.3}, {aqs_max:.3}]",
            problems.len()
        ),
    );
    for p in problems.iter().take(8) {
        println!("  {p}");
    }
    assert!(ok);
}

// Criterion 7

fn first_step_loss(cfg: &RunConfig) -> f64 {
    let p = prepare(cfg).unwrap();
    let mut model = p.model;
    let enc = TextEncoder {
        vocab: &model.vocab,
        chars: &model.chars,
        max_word_len: cfg.max_word_len,
        min_word_len: cfg.filter_width,
        max_context: None,
    };
    let encoded = enc.encode_all(&p.train);
    let batches = data::make_batches(&encoded, cfg.batch_size, Some(cfg.seed), cfg.filter_width);
    let mut trainer = Trainer::new(cfg.train_config());
    trainer.step(&mut model, &batches[0]).unwrap().total
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.train_path = Some(fixture());
    cfg.dev_path = Some(fixture());
    cfg.seed = 17;
    cfg.batch_size = 8;

    let (l1, l2) = (first_step_loss(&cfg), first_step_loss(&cfg));
    let same_loss = l1.to_bits() == l2.to_bits();

    let p = prepare(&cfg).unwrap();
    let mut model = p.model;
    let hash_before = model.frozen_table_hash();
    let enc = TextEncoder {
        vocab: &model.vocab,
        chars: &model.chars,
        max_word_len: cfg.max_word_len,
        min_word_len: cfg.filter_width,
        max_context: None,
    };
    let encoded = enc.encode_all(&p.train);
    let mut tc = cfg.train_config();
    tc.max_steps = 6;
    fit(&mut model, &encoded, tc, FitOptions::default()).unwrap();
    let hash_kept = model.frozen_table_hash() == hash_before;

    let dev = p.dev.clone().unwrap();
    let (before, preds_before) = rumen::evaluate::evaluate(&model, &dev, None).unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path, serde_json::json!({"step": 6})).unwrap();
    let (loaded, extra) = Model::load(&path).unwrap();
    let (after, preds_after) = rumen::evaluate::evaluate(&loaded, &dev, None).unwrap();
    let probs_equal = dev.iter().all(|ex| {
        let (c, q) = rumen::evaluate::encode_inputs(&model, ex, None);
        let masks = FullMasks::new(&c, &q);
        let a = model.distributions(&masks.input(&c, &q)).unwrap();
        let b = loaded.distributions(&masks.input(&c, &q)).unwrap();
        bits(&a.0) == bits(&b.0) && bits(&a.1) == bits(&b.1)
    });
    let round_trip = before.f1.to_bits() == after.f1.to_bits()
        && before.em.to_bits() == after.em.to_bits()
        && preds_before == preds_after
        && probs_equal
        && extra["step"] == 6
        && loaded.frozen_table_hash() == hash_before;

    let ok = same_loss && hash_kept && round_trip;
    report(
        7,
        "determinism and persistence",
        ok,
        &format!(
            "first-step loss {l1:.12} vs {l2:.12}; dev F1 {:.4} -> {:.4} after reload; frozen table hash {}",
            before.f1,
            after.f1,
            if hash_kept { "unchanged" } else { "changed" }
        ),
    );
    assert!(ok);
}

// Criterion 8

#[test]
fn criterion_8_all_variants() {
    let _serial = serial();
    let mut cfg = RunConfig::desk();
    cfg.train_path = Some(fixture());
    cfg.d = 4;
    cfg.word_dim = 4;
    cfg.filters = 4;
    cfg.batch_size = 4;
    let p = prepare(&cfg).unwrap();
    let enc = TextEncoder {
        vocab: &p.model.vocab,
        chars: &p.model.chars,
        max_word_len: cfg.max_word_len,
        min_word_len: cfg.filter_width,
        max_context: None,
    };
    let encoded = enc.encode_all(&p.train);
    let batch = data::make_batches(&encoded, 4, None, cfg.filter_width).remove(0);

    let mut errors = Vec::new();
    for &v in Variant::ALL.iter() {
        let mut c = cfg.clone();
        c.variant = v;
        let run = || -> Result<(), String> {
            let model = prepare(&c).map_err(|e| e.to_string())?.model;
            let tc = c.train_config();
            let grads = batch_gradients(&model, &batch, &tc, 0).map_err(|e| e.to_string())?;
            if !grads.stats.total.is_finite() {
                return Err("non-finite loss".into());
            }
            if grads.grads.iter().any(|(_, g)| g.data().iter().any(|x| !x.is_finite())) {
                return Err("non-finite gradient".into());
            }
            if grads.grads.iter().all(|(_, g)| g.data().iter().all(|&x| x == 0.0)) {
                return Err("all gradients zero".into());
            }
            Ok(())
        };
        if let Err(e) = run() {
            errors.push(format!("variant {v}: {e}"));
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let mut ab = cfg.clone();
    ab.max_steps = 2;
    ab.eval_every = 2;
    ab.checkpoint_dir = dir.path().to_path_buf();
    let rows = cmd_ablate(&ab, &Variant::ALL).unwrap();
    let table = ablation_table(&rows);
    let lines: Vec<&str> = table
        .lines()
        .filter(|l| {
            l.trim_start()
                .chars()
                .next()
                .map_or(false, |c| c.is_ascii_alphanumeric())
        })
        .collect();
    let body: Vec<&str> = lines.iter().skip(1).copied().collect();
    let expected: Vec<String> = (1..=12).map(|n| n.to_string()).chain(["full".to_string()]).collect();
    let labels: Vec<String> = body
        .iter()
        .map(|l| l.split_whitespace().next().unwrap_or("").to_string())
        .collect();
    let numeric_cols = body.iter().all(|l| {
        let cols: Vec<&str> = l.split_whitespace().collect();
        cols.len() >= 3 && cols[cols.len() - 2..].iter().all(|c| c.parse::<f64>().is_ok())
    });
    let shape_ok =
        rows.len() == 13 && labels == expected && numeric_cols && lines[0].contains("F1") && lines[0].contains("EM");

    let ok = errors.is_empty() && shape_ok;
    report(
        8,
        "all ablation variants",
        ok,
        &format!(
            "{} / 13 configurations ran forward+backward; ablation table has {} rows",
            13 - errors.len(),
            body.len()
        ),
    );
    for e in &errors {
        println!("  {e}");
    }
    println!("{table}");
    assert!(ok);
}
