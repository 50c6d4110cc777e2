//! Error rates and reconstruction scores.

use std::fmt;

use crate::trace::Trace;
use crate::vocab::{is_silence, TextSeq, TokenMode, Vocabulary, SPACE};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("trace shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

fn rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

fn strip_markers(s: &str) -> String {
    s.replace("<#>", "").replace("<$>", "")
}

/// Character error rate on plain strings; silence markers are removed and
/// surrounding whitespace trimmed, inner spaces count as characters.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64, MetricError> {
    let r: Vec<char> = strip_markers(reference).trim().chars().collect();
    let h: Vec<char> = strip_markers(hypothesis).trim().chars().collect();
    rate(&r, &h)
}

/// Word error rate on whitespace-separated words.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, MetricError> {
    let r = strip_markers(reference);
    let h = strip_markers(hypothesis);
    let r: Vec<&str> = r.split_whitespace().collect();
    let h: Vec<&str> = h.split_whitespace().collect();
    rate(&r, &h)
}

/// Token sequence used for unit-level scoring: silence removed, and in
/// phoneme mode word separators removed as well.
pub fn scoring_units(vocab: &Vocabulary, text: &TextSeq) -> Vec<usize> {
    let units: Vec<usize> = text
        .0
        .iter()
        .copied()
        .filter(|&t| !is_silence(t) && !(vocab.mode() == TokenMode::Phoneme && t == SPACE))
        .collect();
    // separators at the edges are not scored
    let start = units
        .iter()
        .position(|&t| t != SPACE)
        .unwrap_or(units.len());
    let end = units
        .iter()
        .rposition(|&t| t != SPACE)
        .map_or(start, |e| e + 1);
    units[start..end].to_vec()
}

/// CER in character mode, PER in phoneme mode.
pub fn unit_error_rate(
    vocab: &Vocabulary,
    reference: &TextSeq,
    hypothesis: &TextSeq,
) -> Result<f64, MetricError> {
    rate(
        &scoring_units(vocab, reference),
        &scoring_units(vocab, hypothesis),
    )
}

/// WER over token words split at separators.
pub fn word_error_rate(
    vocab: &Vocabulary,
    reference: &TextSeq,
    hypothesis: &TextSeq,
) -> Result<f64, MetricError> {
    rate(&vocab.words(reference), &vocab.words(hypothesis))
}

pub fn mean_squared_error(reference: &Trace, hypothesis: &Trace) -> Result<f64, MetricError> {
    check_shapes(reference, hypothesis)?;
    let n = reference.data().len() as f64;
    Ok(reference
        .data()
        .iter()
        .zip(hypothesis.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean absolute difference per value.
pub fn mean_l1(reference: &Trace, hypothesis: &Trace) -> Result<f64, MetricError> {
    check_shapes(reference, hypothesis)?;
    let n = reference.data().len() as f64;
    Ok(reference
        .data()
        .iter()
        .zip(hypothesis.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` with peak 1, capped at 99 dB for near-identical traces.
pub fn psnr_trace(reference: &Trace, hypothesis: &Trace) -> Result<f64, MetricError> {
    let mse = mean_squared_error(reference, hypothesis)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn check_shapes(a: &Trace, b: &Trace) -> Result<(), MetricError> {
    if a.frames() != b.frames() || a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch(
            a.frames(),
            a.dim(),
            b.frames(),
            b.dim(),
        ));
    }
    Ok(())
}

/// Averages over an evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    /// CER, or PER in phoneme mode.
    pub unit_error: f64,
    pub wer: f64,
    pub mean_l1: f64,
    pub mean_psnr: f64,
    pub n_utterances: usize,
    pub mode: TokenMode,
}

impl EvalReport {
    pub fn unit_name(&self) -> &'static str {
        match self.mode {
            TokenMode::Character => "cer",
            TokenMode::Phoneme => "per",
        }
    }

    pub fn csv_header(&self) -> String {
        format!(
            "label,{},wer,mean_l1,mean_psnr,n_utterances",
            self.unit_name()
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4},{}",
            self.label, self.unit_error, self.wer, self.mean_l1, self.mean_psnr, self.n_utterances
        )
    }

    /// Header plus one row per report; all reports must share a mode.
    pub fn csv(reports: &[EvalReport]) -> String {
        let mut s = String::new();
        if let Some(first) = reports.first() {
            s.push_str(&first.csv_header());
            s.push('\n');
        }
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Aligned text table for the terminal.
    pub fn table(reports: &[EvalReport]) -> String {
        let unit = reports
            .first()
            .map_or("cer", |r| r.unit_name())
            .to_uppercase();
        let width = reports
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>9}  {:>5}\n",
            "run",
            unit + " %",
            "WER %",
            "L1",
            "PSNR dB",
            "n"
        );
        for r in reports {
            s.push_str(&format!(
                "{:<width$}  {:>8.2}  {:>8.2}  {:>8.4}  {:>9.2}  {:>5}\n",
                r.label,
                100.0 * r.unit_error,
                100.0 * r.wer,
                r.mean_l1,
                r.mean_psnr,
                r.n_utterances
            ));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&EvalReport::table(std::slice::from_ref(self)))
    }
}
