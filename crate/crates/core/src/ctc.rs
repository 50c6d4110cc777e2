//! Connectionist temporal classification: loss with exact gradient, greedy
//! decoding, and a path-enumeration reference.
//!
//! The blank symbol is always vocabulary index [`BLANK`].

use crate::nn::Layout;
use crate::tensor::{self, Tape, Tensor, Var};

pub const BLANK: usize = 0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CtcError {
    #[error("target needs at least {needed} frames, got {frames}")]
    Infeasible { frames: usize, needed: usize },
    #[error("blank token inside target at position {0}")]
    BlankInTarget(usize),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("enumeration of {0} paths exceeds the budget")]
    BudgetExceeded(f64),
    #[error("log-probability matrix: {0}")]
    BadMatrix(String),
}

/// `K x V` per-frame log-probabilities; each row log-sum-exps to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix {
    frames: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LogProbMatrix {
    pub fn new(frames: usize, vocab: usize, values: Vec<f64>) -> Result<Self, CtcError> {
        if frames == 0 || vocab < 2 || values.len() != frames * vocab {
            return Err(CtcError::BadMatrix(format!(
                "{frames} x {vocab} with {} values",
                values.len()
            )));
        }
        for (k, row) in values.chunks(vocab).enumerate() {
            let lse = log_sum_exp(row);
            if (lse).abs() > 1e-6 {
                return Err(CtcError::BadMatrix(format!("row {k} log-sum-exp is {lse}")));
            }
        }
        Ok(Self {
            frames,
            vocab,
            values,
        })
    }

    /// Normalizes each row of raw scores with a log-softmax.
    pub fn from_logits(frames: usize, vocab: usize, logits: &[f64]) -> Result<Self, CtcError> {
        let mut values = Vec::with_capacity(logits.len());
        for row in logits.chunks(vocab) {
            let lse = log_sum_exp(row);
            values.extend(row.iter().map(|x| x - lse));
        }
        Self::new(frames, vocab, values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.vocab..(k + 1) * self.vocab]
    }

    /// Per-frame argmax, ties resolved to the lowest index.
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.frames).map(|k| argmax(self.row(k))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Frames needed to emit `target`: one per token plus a blank between each
/// pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate_target(target: &[usize], vocab: usize, frames: usize) -> Result<(), CtcError> {
    for (i, &t) in target.iter().enumerate() {
        if t == BLANK {
            return Err(CtcError::BlankInTarget(i));
        }
        if t >= vocab {
            return Err(CtcError::TokenOutOfRange { token: t, vocab });
        }
    }
    let needed = min_frames(target);
    if frames < needed {
        return Err(CtcError::Infeasible { frames, needed });
    }
    Ok(())
}

/// Negative log-likelihood of `target` and its derivative w.r.t. every entry
/// of `log_probs`. Entries are treated as independent inputs, so the matrix
/// does not need to be normalized.
pub fn ctc_loss_raw(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>), CtcError> {
    validate_target(target, vocab, frames)?;
    let lp = |k: usize, v: usize| log_probs[k * vocab + v];
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&t| [t, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for k in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(k - 1) * s_len..k * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[k * s_len + s] = if acc == ninf {
                ninf
            } else {
                acc + lp(k, ext[s])
            };
        }
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for k in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (k + 1) * s_len;
            let term = |s2: usize| beta[next + s2] + lp(k + 1, ext[s2]);
            let mut acc = term(s);
            if s + 1 < s_len {
                acc = log_add(acc, term(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, term(s + 2));
            }
            beta[k * s_len + s] = acc;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(CtcError::Infeasible {
            frames,
            needed: min_frames(target),
        });
    }
    let mut grad = vec![0.0; frames * vocab];
    for k in 0..frames {
        for s in 0..s_len {
            let occ = alpha[k * s_len + s] + beta[k * s_len + s] - log_p;
            if occ > ninf {
                grad[k * vocab + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `-ln p(target | frames)` and its gradient w.r.t. the log-probabilities.
pub fn ctc_loss(log_probs: &LogProbMatrix, target: &[usize]) -> Result<(f64, Vec<f64>), CtcError> {
    ctc_loss_raw(&log_probs.values, log_probs.frames, log_probs.vocab, target)
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Best-path decoding.
pub fn ctc_greedy_decode(log_probs: &LogProbMatrix) -> Vec<usize> {
    collapse(&log_probs.argmax_path())
}

/// Sums the probability of every length-`K` path collapsing to `target`.
/// `probs` holds plain (not log) probabilities, `K x V` row-major.
pub fn ctc_brute_force(
    probs: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
) -> Result<f64, CtcError> {
    let paths = (vocab as f64).powi(frames as i32);
    if paths > 1e7 {
        return Err(CtcError::BudgetExceeded(paths));
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(k, &v)| probs[k * vocab + v])
                .product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Mean CTC loss over the items of a time-major batch of log-probabilities
/// `[steps * batch, V]`. Items whose target is `None` or infeasible are
/// skipped; the returned flags mark which items contributed.
pub fn tape_ctc_loss(
    tape: &mut Tape,
    log_probs: Var,
    layout: &Layout,
    targets: &[Option<&[usize]>],
) -> tensor::Result<(Option<Var>, Vec<Option<f64>>)> {
    let value = tape.value(log_probs);
    let vocab = value.cols();
    let batch = layout.batch();
    assert_eq!(targets.len(), batch, "one target per batch item");
    let mut grad = vec![0.0; value.numel()];
    let mut per_item = Vec::with_capacity(batch);
    let mut total = 0.0;
    let mut used = 0usize;
    let mut buf = Vec::new();
    for (b, target) in targets.iter().enumerate() {
        let Some(target) = target else {
            per_item.push(None);
            continue;
        };
        let k_len = layout.lengths[b];
        buf.clear();
        for t in 0..k_len {
            buf.extend_from_slice(value.row(t * batch + b));
        }
        match ctc_loss_raw(&buf, k_len, vocab, target) {
            Ok((loss, g)) => {
                for t in 0..k_len {
                    let dst = (t * batch + b) * vocab;
                    grad[dst..dst + vocab].copy_from_slice(&g[t * vocab..(t + 1) * vocab]);
                }
                total += loss;
                used += 1;
                per_item.push(Some(loss));
            }
            Err(_) => per_item.push(None),
        }
    }
    if used == 0 {
        return Ok((None, per_item));
    }
    let inv = 1.0 / used as f64;
    for g in &mut grad {
        *g *= inv;
    }
    let local = Tensor::new(value.shape().to_vec(), grad)?;
    let loss = tape.custom_scalar(total * inv, vec![(log_probs, local)])?;
    Ok((Some(loss), per_item))
}
