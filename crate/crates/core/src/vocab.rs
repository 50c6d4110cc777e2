//! Token inventory shared by the reader, the generators and the corpus.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::ctc::BLANK;

pub const START_SILENCE: usize = 1;
pub const END_SILENCE: usize = 2;
pub const SPACE: usize = 3;

const SPECIALS: [&str; 4] = ["<blank>", "<#>", "<$>", "_"];

/// Character tokens (GRID style) or phoneme-like tokens per word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Character,
    Phoneme,
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::Character => "character",
            TokenMode::Phoneme => "phoneme",
        })
    }
}

impl FromStr for TokenMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "character" | "char" | "grid" => Ok(Self::Character),
            "phoneme" => Ok(Self::Phoneme),
            other => Err(format!("unknown token mode {other:?}")),
        }
    }
}

/// A sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TextSeq(pub Vec<usize>);

impl TextSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Drops the silence tokens.
    pub fn without_silence(&self) -> TextSeq {
        TextSeq(self.0.iter().copied().filter(|&t| !is_silence(t)).collect())
    }
}

pub fn is_silence(token: usize) -> bool {
    token == START_SILENCE || token == END_SILENCE
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VocabError {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {0} out of range")]
    BadId(usize),
}

/// Ordered symbols; index 0 is the CTC blank, then `<#>`, `<$>`, the word
/// separator and finally the spoken units.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    mode: TokenMode,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(mode: TokenMode, units: &[&str]) -> Self {
        let symbols: Vec<String> = SPECIALS
            .iter()
            .chain(units.iter())
            .map(|s| s.to_string())
            .collect();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            mode,
            symbols,
            index,
        }
    }

    /// Lower-case letters.
    pub fn characters() -> Self {
        let letters: Vec<String> = ('a'..='z').map(|c| c.to_string()).collect();
        let refs: Vec<&str> = letters.iter().map(String::as_str).collect();
        Self::new(TokenMode::Character, &refs)
    }

    pub fn phonemes() -> Self {
        Self::new(TokenMode::Phoneme, crate::synth::PHONEMES)
    }

    pub fn for_mode(mode: TokenMode) -> Self {
        match mode {
            TokenMode::Character => Self::characters(),
            TokenMode::Phoneme => Self::phonemes(),
        }
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    /// Every id that can appear in a target (everything but the blank).
    pub fn spoken_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| i != BLANK)
    }

    /// Tokens of one word.
    pub fn word_tokens(&self, word: &str) -> Result<Vec<usize>, VocabError> {
        match self.mode {
            TokenMode::Character => word
                .chars()
                .map(|c| {
                    self.id(&c.to_string())
                        .ok_or_else(|| VocabError::UnknownSymbol(c.to_string()))
                })
                .collect(),
            TokenMode::Phoneme => {
                let phones = crate::synth::pronounce(word)
                    .ok_or_else(|| VocabError::UnknownWord(word.to_string()))?;
                phones
                    .iter()
                    .map(|p| {
                        self.id(p)
                            .ok_or_else(|| VocabError::UnknownSymbol(p.to_string()))
                    })
                    .collect()
            }
        }
    }

    /// `<#> w1 _ w2 _ ... wn <$>`.
    pub fn encode_words(&self, words: &[&str]) -> Result<TextSeq, VocabError> {
        let mut out = vec![START_SILENCE];
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.push(SPACE);
            }
            out.extend(self.word_tokens(w)?);
        }
        out.push(END_SILENCE);
        Ok(TextSeq(out))
    }

    /// Serialized form: in character mode the plain string with `<#>`/`<$>`
    /// markers and spaces; in phoneme mode symbols separated by spaces with
    /// `_` between words.
    pub fn render(&self, text: &TextSeq) -> String {
        match self.mode {
            TokenMode::Character => text
                .0
                .iter()
                .map(|&t| if t == SPACE { " " } else { self.symbol(t) })
                .collect(),
            TokenMode::Phoneme => text
                .0
                .iter()
                .map(|&t| self.symbol(t))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    pub fn parse(&self, s: &str) -> Result<TextSeq, VocabError> {
        match self.mode {
            TokenMode::Character => {
                let mut out = Vec::new();
                let mut rest = s;
                while !rest.is_empty() {
                    if let Some(r) = rest.strip_prefix("<#>") {
                        out.push(START_SILENCE);
                        rest = r;
                    } else if let Some(r) = rest.strip_prefix("<$>") {
                        out.push(END_SILENCE);
                        rest = r;
                    } else {
                        let c = rest.chars().next().expect("non-empty");
                        let id = if c == ' ' {
                            SPACE
                        } else {
                            self.id(&c.to_string())
                                .ok_or_else(|| VocabError::UnknownSymbol(c.to_string()))?
                        };
                        out.push(id);
                        rest = &rest[c.len_utf8()..];
                    }
                }
                Ok(TextSeq(out))
            }
            TokenMode::Phoneme => s
                .split_whitespace()
                .map(|p| {
                    self.id(p)
                        .ok_or_else(|| VocabError::UnknownSymbol(p.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(TextSeq),
        }
    }

    /// Symbol used in token:count export lines; never contains whitespace.
    pub fn export_symbol(&self, id: usize) -> &str {
        self.symbol(id)
    }

    /// Splits a token sequence into words at separators, ignoring silence.
    pub fn words(&self, text: &TextSeq) -> Vec<Vec<usize>> {
        let mut words = Vec::new();
        let mut cur = Vec::new();
        for &t in &text.0 {
            if is_silence(t) {
                continue;
            }
            if t == SPACE {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(t);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }
}
