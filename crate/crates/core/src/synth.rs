//! Synthetic GRID-style corpus: grammar sentences rendered into viseme traces.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::DurationSeq;
use crate::config::{set_parsed, ConfigError, KeyValueConfig};
use crate::trace::{to_storage_precision, Trace, TraceError};
use crate::vocab::{is_silence, TextSeq, TokenMode, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_CONFIG_FILE: &str = "corpus.cfg";
pub const TRACE_DIR: &str = "traces";

pub const NEUTRAL: f64 = 0.5;
const MIN_SEPARATION: f64 = 0.05;

const COMMANDS: [&str; 4] = ["bin", "lay", "place", "set"];
const COLORS: [&str; 4] = ["blue", "green", "red", "white"];
const PREPOSITIONS: [&str; 4] = ["at", "by", "in", "with"];
const DIGITS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];
const ADVERBS: [&str; 4] = ["again", "now", "please", "soon"];

pub const PHONEMES: &[&str] = &[
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "eh", "ey", "f", "g", "ih", "iy", "jh",
    "k", "l", "m", "n", "ow", "p", "r", "s", "t", "th", "uw", "v", "w", "y", "z",
];

/// Phoneme-like spelling of every grammar word.
pub fn pronounce(word: &str) -> Option<&'static [&'static str]> {
    Some(match word {
        "bin" => &["b", "ih", "n"],
        "lay" => &["l", "ey"],
        "place" => &["p", "l", "ey", "s"],
        "set" => &["s", "eh", "t"],
        "blue" => &["b", "l", "uw"],
        "green" => &["g", "r", "iy", "n"],
        "red" => &["r", "eh", "d"],
        "white" => &["w", "ay", "t"],
        "at" => &["ae", "t"],
        "by" => &["b", "ay"],
        "in" => &["ih", "n"],
        "with" => &["w", "ih", "th"],
        "a" => &["ey"],
        "b" => &["b", "iy"],
        "c" => &["s", "iy"],
        "d" => &["d", "iy"],
        "e" => &["iy"],
        "f" => &["eh", "f"],
        "g" => &["jh", "iy"],
        "h" => &["ey", "ch"],
        "i" => &["ay"],
        "j" => &["jh", "ey"],
        "k" => &["k", "ey"],
        "l" => &["eh", "l"],
        "m" => &["eh", "m"],
        "n" => &["eh", "n"],
        "o" => &["ow"],
        "p" => &["p", "iy"],
        "q" => &["k", "y", "uw"],
        "r" => &["aa", "r"],
        "s" => &["eh", "s"],
        "t" => &["t", "iy"],
        "u" => &["y", "uw"],
        "v" => &["v", "iy"],
        "x" => &["eh", "k", "s"],
        "y" => &["w", "ay"],
        "z" => &["z", "iy"],
        "zero" => &["z", "ih", "r", "ow"],
        "one" => &["w", "ah", "n"],
        "two" => &["t", "uw"],
        "three" => &["th", "r", "iy"],
        "four" => &["f", "ao", "r"],
        "five" => &["f", "ay", "v"],
        "six" => &["s", "ih", "k", "s"],
        "seven" => &["s", "eh", "v", "ah", "n"],
        "eight" => &["ey", "t"],
        "nine" => &["n", "ay", "n"],
        "again" => &["ah", "g", "eh", "n"],
        "now" => &["n", "aw"],
        "please" => &["p", "l", "iy", "z"],
        "soon" => &["s", "uw", "n"],
        _ => return None,
    })
}

/// Mixes a base seed with a path of integers into a sub-seed (splitmix64).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn seeded_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Sub-seed domains.
const DOMAIN_TABLE: u64 = 1;
const DOMAIN_SPEAKER: u64 = 2;
const DOMAIN_SENTENCES: u64 = 3;
const DOMAIN_UTTERANCE: u64 = 4;
const DOMAIN_SPLIT: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
}

/// Ordered word slots; a sentence takes one word from each.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    slots: Vec<Vec<String>>,
}

impl Grammar {
    pub fn new(slots: Vec<Vec<String>>) -> Result<Self, SynthError> {
        if slots.is_empty() || slots.iter().any(Vec::is_empty) {
            return Err(SynthError::Config("grammar slots must be non-empty".into()));
        }
        Ok(Self { slots })
    }

    /// command, color, preposition, letter (no w), digit, adverb.
    pub fn grid() -> Self {
        let own = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let letters: Vec<String> = ('a'..='z')
            .filter(|&c| c != 'w')
            .map(|c| c.to_string())
            .collect();
        Self {
            slots: vec![
                own(&COMMANDS),
                own(&COLORS),
                own(&PREPOSITIONS),
                letters,
                own(&DIGITS),
                own(&ADVERBS),
            ],
        }
    }

    pub fn slots(&self) -> &[Vec<String>] {
        &self.slots
    }

    /// Number of distinct sentences.
    pub fn sentence_count(&self) -> usize {
        self.slots.iter().map(Vec::len).product()
    }

    /// Sentence number `index` in mixed-radix order (last slot fastest).
    pub fn sentence(&self, mut index: usize) -> Vec<&str> {
        let mut words = vec![""; self.slots.len()];
        for (i, slot) in self.slots.iter().enumerate().rev() {
            words[i] = slot[index % slot.len()].as_str();
            index /= slot.len();
        }
        words
    }

    pub fn sample_words<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<&str> {
        self.slots
            .iter()
            .map(|slot| slot[rng.gen_range(0..slot.len())].as_str())
            .collect()
    }
}

/// Draws one word per slot and encodes it with silence at both ends.
pub fn sample_sentence<R: Rng + ?Sized>(
    grammar: &Grammar,
    vocab: &Vocabulary,
    rng: &mut R,
) -> TextSeq {
    vocab
        .encode_words(&grammar.sample_words(rng))
        .expect("grammar words are covered by the vocabulary")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationConfig {
    pub min: usize,
    pub max: usize,
    pub silence_min: usize,
    pub silence_max: usize,
    /// Upper bound on the total frame count; 0 disables it.
    pub max_total: usize,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            min: 2,
            max: 5,
            silence_min: 3,
            silence_max: 8,
            max_total: 75,
        }
    }
}

/// Per-token frame counts drawn uniformly from the configured ranges.
///
/// When the total exceeds `max_total`, silence counts shrink first (down to
/// one frame each), then the longest spoken tokens lose frames one at a time,
/// never below `min`.
pub fn sample_durations<R: Rng + ?Sized>(
    text: &TextSeq,
    rng: &mut R,
    cfg: &DurationConfig,
) -> Result<DurationSeq, SynthError> {
    if text.is_empty() {
        return Err(SynthError::Config(
            "cannot sample durations for empty text".into(),
        ));
    }
    let mut d: Vec<usize> = text
        .0
        .iter()
        .map(|&t| {
            if is_silence(t) {
                rng.gen_range(cfg.silence_min..=cfg.silence_max)
            } else {
                rng.gen_range(cfg.min..=cfg.max)
            }
        })
        .collect();
    if cfg.max_total > 0 {
        let mut total: usize = d.iter().sum();
        while total > cfg.max_total {
            // longest silence first
            let sil = (0..d.len())
                .filter(|&i| is_silence(text.0[i]) && d[i] > 1)
                .max_by_key(|&i| (d[i], std::cmp::Reverse(i)));
            let pick = sil.or_else(|| {
                (0..d.len())
                    .filter(|&i| !is_silence(text.0[i]) && d[i] > cfg.min.max(1))
                    .max_by_key(|&i| (d[i], std::cmp::Reverse(i)))
            });
            match pick {
                Some(i) => {
                    d[i] -= 1;
                    total -= 1;
                }
                None => {
                    return Err(SynthError::Config(format!(
                        "{} tokens cannot fit in {} frames",
                        text.len(),
                        cfg.max_total
                    )))
                }
            }
        }
    }
    Ok(DurationSeq(d))
}

/// Canonical frame vector for each token id.
#[derive(Clone, Debug, PartialEq)]
pub struct VisemeTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl VisemeTable {
    /// Random vectors in `[0.1, 0.9]^dim`, silence and blank at the neutral
    /// point; vectors closer than 0.05 (max-norm) to an earlier one are redrawn.
    pub fn random<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Self {
        let neutral = vec![NEUTRAL; dim];
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(vocab.len());
        let mut distinct: Vec<Vec<f64>> = vec![neutral.clone()];
        for id in 0..vocab.len() {
            if id == crate::ctc::BLANK || is_silence(id) {
                vectors.push(neutral.clone());
                continue;
            }
            let v = loop {
                let cand: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.1..=0.9)).collect();
                if distinct.iter().all(|u| linf(u, &cand) >= MIN_SEPARATION) {
                    break cand;
                }
            };
            distinct.push(v.clone());
            vectors.push(v);
        }
        Self { dim, vectors }
    }

    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        let dim = vectors.first().map_or(0, Vec::len);
        Self { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, token: usize) -> &[f64] {
        &self.vectors[token]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Smallest max-norm distance between vectors of different visemes.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.vectors.len() {
            for j in 0..i {
                let d = linf(&self.vectors[i], &self.vectors[j]);
                if d > 0.0 {
                    best = best.min(d);
                }
            }
        }
        best
    }

    /// Token whose vector is closest (squared distance) to `frame`.
    pub fn nearest(&self, frame: &[f64], candidates: impl Iterator<Item = usize>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for id in candidates {
            let d: f64 = self.vectors[id]
                .iter()
                .zip(frame)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, id);
            }
        }
        best.1
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Rendering knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub noise_sigma: f64,
    /// Half-width of the box filter mixing neighbouring frames.
    pub coarticulation: usize,
}

/// Frame `k` = clamp01(mean of the viseme sequence over `[k-w, k+w]` (edges
/// clamped) + speaker offset + gaussian noise), rounded to storage precision.
pub fn render_trace<R: Rng + ?Sized>(
    text: &TextSeq,
    durations: &DurationSeq,
    speaker_offset: &[f64],
    table: &VisemeTable,
    render: &RenderConfig,
    rng: &mut R,
) -> Result<Trace, SynthError> {
    let frames =
        crate::align::expand(text, durations).map_err(|e| SynthError::Config(e.to_string()))?;
    let dim = table.dim();
    if speaker_offset.len() != dim {
        return Err(SynthError::Config(format!(
            "speaker offset has {} channels, table has {dim}",
            speaker_offset.len()
        )));
    }
    let k = frames.len();
    let w = render.coarticulation;
    let noise = if render.noise_sigma > 0.0 {
        Some(Normal::new(0.0, render.noise_sigma).map_err(|e| SynthError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut data = Vec::with_capacity(k * dim);
    for f in 0..k {
        let lo = f.saturating_sub(w);
        let hi = (f + w).min(k - 1);
        for c in 0..dim {
            let mut s = 0.0;
            for j in f as isize - w as isize..=(f + w) as isize {
                let j = (j.max(lo as isize) as usize).min(hi);
                s += table.vector(frames.0[j])[c];
            }
            let mut v = s / (2 * w + 1) as f64 + speaker_offset[c];
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            data.push(to_storage_precision(v.clamp(0.0, 1.0)));
        }
    }
    Ok(Trace::new(k, dim, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Paired,
    TextOnly,
    LipOnly,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Paired => "paired",
            Split::TextOnly => "text_only",
            Split::LipOnly => "lip_only",
            Split::Eval => "eval",
        })
    }
}

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub utterances: usize,
    pub speakers: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub coarticulation: usize,
    pub eval_fraction: f64,
    pub paired_fraction: f64,
    pub token_mode: TokenMode,
    pub durations: DurationConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            utterances: 2000,
            speakers: 4,
            dim: 8,
            noise_sigma: 0.02,
            coarticulation: 1,
            eval_fraction: 0.1,
            paired_fraction: 0.1,
            token_mode: TokenMode::Character,
            durations: DurationConfig::default(),
        }
    }
}

impl KeyValueConfig for CorpusConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "seed" => set_parsed(&mut self.seed, value),
            "utterances" => set_parsed(&mut self.utterances, value),
            "speakers" => set_parsed(&mut self.speakers, value),
            "dim" => set_parsed(&mut self.dim, value),
            "noise_sigma" => set_parsed(&mut self.noise_sigma, value),
            "coarticulation" => set_parsed(&mut self.coarticulation, value),
            "eval_fraction" => set_parsed(&mut self.eval_fraction, value),
            "paired_fraction" => set_parsed(&mut self.paired_fraction, value),
            "token_mode" => set_parsed(&mut self.token_mode, value),
            "duration_min" => set_parsed(&mut self.durations.min, value),
            "duration_max" => set_parsed(&mut self.durations.max, value),
            "silence_min" => set_parsed(&mut self.durations.silence_min, value),
            "silence_max" => set_parsed(&mut self.durations.silence_max, value),
            "max_frames" => set_parsed(&mut self.durations.max_total, value),
            _ => Ok(false),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.paired_fraction > 0.0 && self.paired_fraction <= 1.0) {
            return Err(format!(
                "paired_fraction {} not in (0,1]",
                self.paired_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(format!("eval_fraction {} not in [0,1)", self.eval_fraction));
        }
        if self.speakers == 0 || self.utterances == 0 || self.dim == 0 {
            return Err("speakers, utterances and dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return Err("noise_sigma must be non-negative".into());
        }
        let d = &self.durations;
        if d.min == 0 || d.min > d.max || d.silence_min == 0 || d.silence_min > d.silence_max {
            return Err("duration ranges must be positive and ordered".into());
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("utterances", self.utterances.to_string()),
            ("speakers", self.speakers.to_string()),
            ("dim", self.dim.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("coarticulation", self.coarticulation.to_string()),
            ("eval_fraction", self.eval_fraction.to_string()),
            ("paired_fraction", self.paired_fraction.to_string()),
            ("token_mode", self.token_mode.to_string()),
            ("duration_min", self.durations.min.to_string()),
            ("duration_max", self.durations.max.to_string()),
            ("silence_min", self.durations.silence_min.to_string()),
            ("silence_max", self.durations.silence_max.to_string()),
            ("max_frames", self.durations.max_total.to_string()),
        ]
    }
}

impl CorpusConfig {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            noise_sigma: self.noise_sigma,
            coarticulation: self.coarticulation,
        }
    }
}

/// One utterance with whatever modalities its split exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub text: Option<TextSeq>,
    pub durations: Option<DurationSeq>,
    pub trace: Option<Trace>,
    pub split: Split,
}

/// A manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: usize,
    pub text: Option<String>,
    pub durations: Option<Vec<usize>>,
    pub trace: Option<String>,
    pub split: Split,
}

/// Generated corpus with full ground truth for every utterance.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub table: VisemeTable,
    pub speaker_offsets: Vec<Vec<f64>>,
    /// Every utterance with text, durations and trace present.
    pub utterances: Vec<Utterance>,
}

fn trace_path(id: &str) -> String {
    format!("{TRACE_DIR}/{id}.dltr")
}

/// Renders `config.utterances` distinct sentences and assigns splits.
pub fn make_corpus(config: &CorpusConfig) -> Result<Corpus, SynthError> {
    config.validate().map_err(SynthError::Config)?;
    let vocab = Vocabulary::for_mode(config.token_mode);
    let grammar = Grammar::grid();
    if config.utterances > grammar.sentence_count() {
        return Err(SynthError::Config(format!(
            "{} utterances requested but only {} distinct sentences exist",
            config.utterances,
            grammar.sentence_count()
        )));
    }
    let table = VisemeTable::random(
        &vocab,
        config.dim,
        &mut seeded_rng(config.seed, &[DOMAIN_TABLE]),
    );
    let speaker_offsets: Vec<Vec<f64>> = (0..config.speakers)
        .map(|s| {
            let mut rng = seeded_rng(config.seed, &[DOMAIN_SPEAKER, s as u64]);
            (0..config.dim)
                .map(|_| rng.gen_range(-0.05..=0.05))
                .collect()
        })
        .collect();

    // distinct sentences, in draw order
    let mut sent_rng = seeded_rng(config.seed, &[DOMAIN_SENTENCES]);
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(config.utterances);
    while sentences.len() < config.utterances {
        let idx = sent_rng.gen_range(0..grammar.sentence_count());
        if seen.insert(idx) {
            sentences.push(idx);
        }
    }

    let render = config.render_config();
    let mut utterances = Vec::with_capacity(config.utterances);
    for (i, &sentence) in sentences.iter().enumerate() {
        let mut rng = seeded_rng(config.seed, &[DOMAIN_UTTERANCE, i as u64]);
        let speaker = i % config.speakers;
        let text = vocab
            .encode_words(&grammar.sentence(sentence))
            .expect("grammar words are covered by the vocabulary");
        let durations = sample_durations(&text, &mut rng, &config.durations)?;
        let trace = render_trace(
            &text,
            &durations,
            &speaker_offsets[speaker],
            &table,
            &render,
            &mut rng,
        )?;
        utterances.push(Utterance {
            id: format!("u{i:05}"),
            speaker,
            text: Some(text),
            durations: Some(durations),
            trace: Some(trace),
            split: Split::Paired,
        });
    }
    assign_splits(&mut utterances, config);
    Ok(Corpus {
        config: config.clone(),
        vocab,
        table,
        speaker_offsets,
        utterances,
    })
}

fn round_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

fn assign_splits(utts: &mut [Utterance], config: &CorpusConfig) {
    let mut rng = seeded_rng(config.seed, &[DOMAIN_SPLIT]);
    let mut rest = Vec::new();
    for s in 0..config.speakers {
        let mut mine: Vec<usize> = (0..utts.len()).filter(|&i| utts[i].speaker == s).collect();
        mine.shuffle(&mut rng);
        let n_eval = round_count(mine.len(), config.eval_fraction);
        for &i in &mine[..n_eval] {
            utts[i].split = Split::Eval;
        }
        rest.extend_from_slice(&mine[n_eval..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let n_paired = round_count(rest.len(), config.paired_fraction);
    let n_text = (rest.len() - n_paired) / 2;
    for (pos, &i) in rest.iter().enumerate() {
        utts[i].split = if pos < n_paired {
            Split::Paired
        } else if pos < n_paired + n_text {
            Split::TextOnly
        } else {
            Split::LipOnly
        };
    }
}

impl Corpus {
    /// What each split is allowed to see: no trace for text-only utterances,
    /// no text or durations for lip-only ones.
    pub fn dataset(&self) -> Dataset {
        let utterances = self
            .utterances
            .iter()
            .map(|u| {
                let mut u = u.clone();
                match u.split {
                    Split::TextOnly => u.trace = None,
                    Split::LipOnly => {
                        u.text = None;
                        u.durations = None;
                    }
                    Split::Paired | Split::Eval => {}
                }
                u
            })
            .collect();
        Dataset {
            vocab: self.vocab.clone(),
            dim: self.config.dim,
            utterances,
        }
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.dataset()
            .utterances
            .iter()
            .map(|u| ManifestEntry {
                id: u.id.clone(),
                speaker: u.speaker,
                text: u.text.as_ref().map(|t| self.vocab.render(t)),
                durations: u.durations.as_ref().map(|d| d.0.clone()),
                trace: u.trace.as_ref().map(|_| trace_path(&u.id)),
                split: u.split,
            })
            .collect()
    }

    /// Writes `corpus.cfg`, `manifest.jsonl` and `traces/*.dltr` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir.join(TRACE_DIR))?;
        std::fs::write(
            dir.join(CORPUS_CONFIG_FILE),
            KeyValueConfig::render(&self.config),
        )?;
        let mut lines = String::new();
        for (entry, u) in self.manifest().iter().zip(&self.utterances) {
            lines.push_str(&serde_json::to_string(entry).expect("manifest entry serializes"));
            lines.push('\n');
            if let Some(p) = &entry.trace {
                u.trace.as_ref().expect("full corpus").save(&dir.join(p))?;
            }
        }
        std::fs::write(dir.join(MANIFEST_FILE), lines)?;
        Ok(())
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts::of(self.utterances.iter().map(|u| u.split))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub paired: usize,
    pub text_only: usize,
    pub lip_only: usize,
    pub eval: usize,
}

impl SplitCounts {
    pub fn of(splits: impl Iterator<Item = Split>) -> Self {
        let mut c = Self::default();
        for s in splits {
            match s {
                Split::Paired => c.paired += 1,
                Split::TextOnly => c.text_only += 1,
                Split::LipOnly => c.lip_only += 1,
                Split::Eval => c.eval += 1,
            }
        }
        c
    }
}

impl fmt::Display for SplitCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let train = self.paired + self.text_only + self.lip_only;
        let pct = |n: usize| {
            if train == 0 {
                0.0
            } else {
                100.0 * n as f64 / train as f64
            }
        };
        writeln!(f, "split       utterances  share")?;
        writeln!(
            f,
            "paired      {:>10}  {:>5.1}%",
            self.paired,
            pct(self.paired)
        )?;
        writeln!(
            f,
            "text_only   {:>10}  {:>5.1}%",
            self.text_only,
            pct(self.text_only)
        )?;
        writeln!(
            f,
            "lip_only    {:>10}  {:>5.1}%",
            self.lip_only,
            pct(self.lip_only)
        )?;
        write!(f, "eval        {:>10}", self.eval)
    }
}

/// Utterances as seen by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .collect()
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts::of(self.utterances.iter().map(|u| u.split))
    }

    /// Reads a corpus directory written by [`Corpus::write`].
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let cfg_text = std::fs::read_to_string(dir.join(CORPUS_CONFIG_FILE))?;
        let config = CorpusConfig::parse(&cfg_text)?;
        let vocab = Vocabulary::for_mode(config.token_mode);
        let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut utterances = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| SynthError::Manifest {
                line: i + 1,
                detail,
            };
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let text = e
                .text
                .as_deref()
                .map(|s| vocab.parse(s))
                .transpose()
                .map_err(|e| bad(e.to_string()))?;
            let durations = e.durations.map(DurationSeq);
            if let (Some(t), Some(d)) = (&text, &durations) {
                if t.len() != d.len() {
                    return Err(bad("text and durations differ in length".into()));
                }
            }
            let trace = match &e.trace {
                Some(p) => {
                    let t = Trace::load(&dir.join(p))?;
                    if t.dim() != config.dim {
                        return Err(bad(format!("trace has {} channels", t.dim())));
                    }
                    Some(t)
                }
                None => None,
            };
            let consistent = match e.split {
                Split::Paired | Split::Eval => text.is_some() && trace.is_some(),
                Split::TextOnly => text.is_some() && trace.is_none(),
                Split::LipOnly => text.is_none() && trace.is_some(),
            };
            if !consistent {
                return Err(bad(format!("fields do not match split {}", e.split)));
            }
            utterances.push(Utterance {
                id: e.id,
                speaker: e.speaker,
                text,
                durations,
                trace,
                split: e.split,
            });
        }
        Ok(Self {
            vocab,
            dim: config.dim,
            utterances,
        })
    }

    /// Keeps the leading `fraction` of each unpaired split (by manifest order).
    pub fn with_unpaired_fraction(&self, fraction: f64) -> Dataset {
        let keep = |split: Split| round_count(self.split(split).len(), fraction.clamp(0.0, 1.0));
        let (kt, kl) = (keep(Split::TextOnly), keep(Split::LipOnly));
        let (mut nt, mut nl) = (0, 0);
        let utterances = self
            .utterances
            .iter()
            .filter(|u| match u.split {
                Split::TextOnly => {
                    nt += 1;
                    nt <= kt
                }
                Split::LipOnly => {
                    nl += 1;
                    nl <= kl
                }
                _ => true,
            })
            .cloned()
            .collect();
        Dataset {
            vocab: self.vocab.clone(),
            dim: self.dim,
            utterances,
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paired" => Ok(Split::Paired),
            "text_only" => Ok(Split::TextOnly),
            "lip_only" => Ok(Split::LipOnly),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Path of a corpus's manifest.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Whether `token` is rendered with its own viseme (not silence).
pub fn is_spoken(token: usize) -> bool {
    !is_silence(token) && token != crate::ctc::BLANK
}
