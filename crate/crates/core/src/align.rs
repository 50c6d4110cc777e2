//! Expansion of text by durations and duration extraction from attention.

use std::fmt::Write as _;

use crate::vocab::{TextSeq, Vocabulary};

const COLUMN_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("text has {text} tokens but {durations} durations were given")]
    LengthMismatch { text: usize, durations: usize },
    #[error("duration of token {index} is zero")]
    ZeroDuration { index: usize },
    #[error("empty sequence")]
    Empty,
    #[error("alignment column {column}: {detail}")]
    BadColumn { column: usize, detail: String },
    #[error("bad duration line: {0}")]
    Parse(String),
}

/// Frames per token.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DurationSeq(pub Vec<usize>);

impl DurationSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    /// Errors on the first zero count.
    pub fn check_positive(&self) -> Result<(), AlignError> {
        match self.0.iter().position(|&d| d == 0) {
            Some(index) => Err(AlignError::ZeroDuration { index }),
            None => Ok(()),
        }
    }
}

/// Attention weights over `tokens` rows and `frames` columns, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    tokens: usize,
    frames: usize,
    weights: Vec<f64>,
}

impl AlignmentMatrix {
    /// Validates that every column is a probability distribution.
    pub fn new(tokens: usize, frames: usize, weights: Vec<f64>) -> Result<Self, AlignError> {
        if tokens == 0 || frames == 0 {
            return Err(AlignError::Empty);
        }
        assert_eq!(weights.len(), tokens * frames, "alignment data length");
        for k in 0..frames {
            let mut s = 0.0;
            for t in 0..tokens {
                let w = weights[t * frames + k];
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(AlignError::BadColumn {
                        column: k,
                        detail: format!("weight {w} at row {t}"),
                    });
                }
                s += w;
            }
            if (s - 1.0).abs() > COLUMN_TOL {
                return Err(AlignError::BadColumn {
                    column: k,
                    detail: format!("sums to {s}"),
                });
            }
        }
        Ok(Self {
            tokens,
            frames,
            weights,
        })
    }

    /// Builds from per-frame distributions over tokens (one `Vec` per frame).
    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self, AlignError> {
        let k = frames.len();
        let t = frames.first().map_or(0, Vec::len);
        if k == 0 || t == 0 {
            return Err(AlignError::Empty);
        }
        let mut weights = vec![0.0; t * k];
        for (c, col) in frames.iter().enumerate() {
            assert_eq!(col.len(), t, "ragged alignment columns");
            for (r, &w) in col.iter().enumerate() {
                weights[r * k + c] = w;
            }
        }
        Self::new(t, k, weights)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, token: usize, frame: usize) -> f64 {
        self.weights[token * self.frames + frame]
    }

    /// Row of the largest weight in each column, lowest row on ties.
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|k| {
                let mut best = 0;
                for t in 1..self.tokens {
                    if self.get(t, k) > self.get(best, k) {
                        best = t;
                    }
                }
                best
            })
            .collect()
    }
}

/// Repeats token `i` `durations[i]` times.
pub fn expand(text: &TextSeq, durations: &DurationSeq) -> Result<TextSeq, AlignError> {
    if text.len() != durations.len() {
        return Err(AlignError::LengthMismatch {
            text: text.len(),
            durations: durations.len(),
        });
    }
    if text.is_empty() {
        return Err(AlignError::Empty);
    }
    durations.check_positive()?;
    let mut out = Vec::with_capacity(durations.total());
    for (&tok, &d) in text.0.iter().zip(&durations.0) {
        out.extend(std::iter::repeat(tok).take(d));
    }
    Ok(TextSeq(out))
}

/// `d_i` = number of frames whose argmax token is `i`. May contain zeros.
pub fn extract_durations(alignment: &AlignmentMatrix) -> DurationSeq {
    let mut d = vec![0; alignment.tokens()];
    for i in alignment.argmax_path() {
        d[i] += 1;
    }
    DurationSeq(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Monotonicity {
    pub is_monotone: bool,
    pub violations: usize,
}

pub fn path_monotonicity(path: &[usize]) -> Monotonicity {
    let violations = path.windows(2).filter(|w| w[1] < w[0]).count();
    Monotonicity {
        is_monotone: violations == 0,
        violations,
    }
}

/// Counts descents in the column argmax path.
pub fn monotonicity(alignment: &AlignmentMatrix) -> Monotonicity {
    path_monotonicity(&alignment.argmax_path())
}

/// Hard alignment that puts all weight of frame `k` on the token active there.
pub fn one_hot_alignment(durations: &DurationSeq) -> Result<AlignmentMatrix, AlignError> {
    if durations.is_empty() {
        return Err(AlignError::Empty);
    }
    durations.check_positive()?;
    let t = durations.len();
    let k = durations.total();
    let mut weights = vec![0.0; t * k];
    let mut frame = 0;
    for (row, &d) in durations.0.iter().enumerate() {
        for _ in 0..d {
            weights[row * k + frame] = 1.0;
            frame += 1;
        }
    }
    AlignmentMatrix::new(t, k, weights)
}

/// Collapses a framewise label sequence into runs: `(label, count)` in order.
pub fn run_lengths(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((prev, n)) if *prev == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs
}

/// One export line: `symbol:count` pairs separated by single spaces.
pub fn format_durations(vocab: &Vocabulary, text: &TextSeq, durations: &DurationSeq) -> String {
    let mut line = String::new();
    for (i, (&tok, &d)) in text.0.iter().zip(&durations.0).enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{}:{}", vocab.symbol(tok), d);
    }
    line
}

/// Inverse of [`format_durations`].
pub fn parse_durations(
    vocab: &Vocabulary,
    line: &str,
) -> Result<(TextSeq, DurationSeq), AlignError> {
    let mut text = Vec::new();
    let mut durs = Vec::new();
    for pair in line.split_whitespace() {
        let (sym, count) = pair
            .rsplit_once(':')
            .ok_or_else(|| AlignError::Parse(pair.to_string()))?;
        let id = vocab
            .id(sym)
            .ok_or_else(|| AlignError::Parse(format!("unknown symbol {sym:?}")))?;
        let n = count
            .parse()
            .map_err(|_| AlignError::Parse(format!("bad count {count:?}")))?;
        text.push(id);
        durs.push(n);
    }
    Ok((TextSeq(text), DurationSeq(durs)))
}
