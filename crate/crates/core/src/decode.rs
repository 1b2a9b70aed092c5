//! Windowed span decoding: argmax of `p^s[a] · p^e[a′]` over
//! `0 ≤ a′ − a ≤ window` in linear time.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

pub const DEFAULT_WINDOW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub prob: f64,
}

/// A decoded span with its answer text recovered from the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub joint_prob: f64,
    pub text: String,
}

/// Decode and count elementary operations (deque pushes, pops and
/// comparisons). Ties go to the smallest start, then the smallest end.
///
/// `window = usize::MAX` searches every `a ≤ a′`.
pub fn decode_span_counted(start: &[f64], end: &[f64], window: usize) -> Result<(Span, usize)> {
    if start.len() != end.len() {
        return Err(TensorError::ShapeMismatch {
            op: "decode_span",
            lhs: vec![start.len()],
            rhs: vec![end.len()],
        });
    }
    if start.is_empty() {
        return Err(TensorError::Invalid {
            op: "decode_span",
            msg: "empty distributions".into(),
        });
    }
    let mut ops = 0usize;
    // Candidate starts in the trailing window, values non-increasing; equal
    // values keep the older (smaller) index in front.
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut best = Span {
        start: 0,
        end: 0,
        prob: f64::NEG_INFINITY,
    };
    for (j, &pe) in end.iter().enumerate() {
        while let Some(&back) = dq.back() {
            ops += 1;
            if start[back] < start[j] {
                dq.pop_back();
                ops += 1;
            } else {
                break;
            }
        }
        dq.push_back(j);
        ops += 1;
        let lo = j.saturating_sub(window);
        while let Some(&front) = dq.front() {
            ops += 1;
            if front < lo {
                dq.pop_front();
                ops += 1;
            } else {
                break;
            }
        }
        let a = dq[0];
        let mut p = start[a] * pe;
        let mut a = a;
        if p == 0.0 {
            // Every start in the window ties at zero.
            a = lo;
            p = start[lo] * pe;
        }
        ops += 1;
        if p > best.prob || (p == best.prob && a < best.start) {
            best = Span {
                start: a,
                end: j,
                prob: p,
            };
        }
    }
    Ok((best, ops))
}

pub fn decode_span(start: &[f64], end: &[f64], window: usize) -> Result<Span> {
    decode_span_counted(start, end, window).map(|(s, _)| s)
}

/// Quadratic reference search with the same tie-breaking.
pub fn decode_span_exhaustive(start: &[f64], end: &[f64], window: usize) -> Span {
    let mut best = Span {
        start: 0,
        end: 0,
        prob: f64::NEG_INFINITY,
    };
    for a in 0..start.len() {
        let hi = a.saturating_add(window).min(end.len() - 1);
        for b in a..=hi {
            let p = start[a] * end[b];
            if p > best.prob {
                best = Span {
                    start: a,
                    end: b,
                    prob: p,
                };
            }
        }
    }
    best
}
