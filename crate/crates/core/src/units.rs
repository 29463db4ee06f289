//! Length calculation over clean text.
//!
//! Every length the controller reports back to the model, and every length
//! the metrics compare against a target, goes through [`Counter::count`].
//! Token counts are always recomputed over the full text: subword merges
//! across chunk boundaries make per-chunk sums unsound.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::{self, AbbreviationSet};

#[derive(Debug, Error)]
pub enum UnitsError {
    #[error("invalid tokenizer: {0}")]
    InvalidTokenizer(String),
    #[error("unknown length unit `{0}`")]
    UnknownUnit(String),
}

/// Granularity of a length constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    Token,
    Word,
    Sentence,
    Character,
}

impl LengthUnit {
    pub const ALL: [LengthUnit; 4] = [
        LengthUnit::Token,
        LengthUnit::Word,
        LengthUnit::Sentence,
        LengthUnit::Character,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LengthUnit::Token => "token",
            LengthUnit::Word => "word",
            LengthUnit::Sentence => "sentence",
            LengthUnit::Character => "character",
        }
    }

    /// Plural form used in markers and prompts (`tokens`, `words`, ...).
    pub fn plural(self) -> &'static str {
        match self {
            LengthUnit::Token => "tokens",
            LengthUnit::Word => "words",
            LengthUnit::Sentence => "sentences",
            LengthUnit::Character => "characters",
        }
    }

    pub fn from_plural(s: &str) -> Option<LengthUnit> {
        LengthUnit::ALL.into_iter().find(|u| u.plural() == s)
    }
}

impl fmt::Display for LengthUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthUnit {
    type Err = UnitsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        LengthUnit::ALL
            .into_iter()
            .find(|u| u.as_str() == lower || u.plural() == lower)
            .ok_or_else(|| UnitsError::UnknownUnit(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    WhitespaceFallback,
    BpeVocabFile,
}

impl FromStr for TokenizerMode {
    type Err = UnitsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "whitespace_fallback" | "whitespace" => Ok(TokenizerMode::WhitespaceFallback),
            "bpe_vocab_file" | "bpe" => Ok(TokenizerMode::BpeVocabFile),
            other => Err(UnitsError::InvalidTokenizer(format!("unknown mode `{other}`"))),
        }
    }
}

/// Declarative tokenizer configuration; [`Tokenizer::load`] turns it into a
/// usable tokenizer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub vocab_path: Option<PathBuf>,
    #[serde(default)]
    pub special_tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub unit: LengthUnit,
    pub value: usize,
    pub text_bytes: usize,
}

/// Rank-ordered vocabulary: a piece's rank is its line number in the vocab
/// file, lower rank merges first.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    ranks: HashMap<String, usize>,
}

impl BpeVocab {
    /// Parses a vocab file body: one token per `\n`-terminated line, UTF-8.
    /// Empty lines consume a rank but define no token.
    pub fn parse(body: &str) -> Result<BpeVocab, UnitsError> {
        let mut ranks = HashMap::new();
        for (rank, line) in body.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            ranks.entry(line.to_string()).or_insert(rank);
        }
        if ranks.is_empty() {
            return Err(UnitsError::InvalidTokenizer("vocab file has no tokens".into()));
        }
        Ok(BpeVocab { ranks })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BpeVocab, UnitsError> {
        let body = std::str::from_utf8(bytes)
            .map_err(|e| UnitsError::InvalidTokenizer(format!("vocab is not UTF-8: {e}")))?;
        BpeVocab::parse(body)
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    fn rank(&self, piece: &str) -> Option<usize> {
        self.ranks.get(piece).copied()
    }

    /// Greedy lowest-rank pair merging over the characters of one
    /// pre-tokenized piece. Characters absent from the vocab stay single.
    fn encode_piece<'a>(&self, piece: &'a str, out: &mut Vec<&'a str>) {
        if self.rank(piece).is_some() {
            out.push(piece);
            return;
        }
        // Byte offsets of part starts; parts[i]..parts[i+1] is one part.
        let mut bounds: Vec<usize> = piece.char_indices().map(|(i, _)| i).collect();
        bounds.push(piece.len());
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..bounds.len().saturating_sub(2) {
                let merged = &piece[bounds[i]..bounds[i + 2]];
                if let Some(rank) = self.rank(merged) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    bounds.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(bounds.windows(2).map(|w| &piece[w[0]..w[1]]));
    }
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r" ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").expect("static regex")
    })
}

#[derive(Debug, Clone)]
enum TokenizerImpl {
    Whitespace,
    Bpe(BpeVocab),
}

/// A loaded tokenizer. Cheap to share behind an `Arc`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    inner: TokenizerImpl,
    special_tokens: Vec<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::whitespace()
    }
}

impl Tokenizer {
    pub fn whitespace() -> Tokenizer {
        Tokenizer {
            inner: TokenizerImpl::Whitespace,
            special_tokens: Vec::new(),
        }
    }

    pub fn bpe(vocab: BpeVocab) -> Tokenizer {
        Tokenizer {
            inner: TokenizerImpl::Bpe(vocab),
            special_tokens: Vec::new(),
        }
    }

    pub fn with_special_tokens(mut self, specials: Vec<String>) -> Tokenizer {
        self.special_tokens = specials.into_iter().filter(|s| !s.is_empty()).collect();
        // Longest literal wins when two specials start at the same offset.
        self.special_tokens.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        self
    }

    pub fn load(spec: &TokenizerSpec) -> Result<Tokenizer, UnitsError> {
        let tokenizer = match spec.mode {
            TokenizerMode::WhitespaceFallback => Tokenizer::whitespace(),
            TokenizerMode::BpeVocabFile => {
                let path = spec.vocab_path.as_deref().ok_or_else(|| {
                    UnitsError::InvalidTokenizer("bpe_vocab_file mode requires vocab_path".into())
                })?;
                Tokenizer::bpe(load_vocab(path)?)
            }
        };
        Ok(tokenizer.with_special_tokens(spec.special_tokens.clone()))
    }

    pub fn is_whitespace(&self) -> bool {
        matches!(self.inner, TokenizerImpl::Whitespace)
    }

    /// Splits `text` into segments, tagging the special-token literals.
    fn split_specials<'a>(&self, text: &'a str) -> Vec<(&'a str, bool)> {
        if self.special_tokens.is_empty() {
            return vec![(text, false)];
        }
        let mut out = Vec::new();
        let mut plain_start = 0;
        let mut i = 0;
        while i < text.len() {
            let hit = self
                .special_tokens
                .iter()
                .find(|s| text[i..].starts_with(s.as_str()));
            match hit {
                Some(special) => {
                    if plain_start < i {
                        out.push((&text[plain_start..i], false));
                    }
                    out.push((&text[i..i + special.len()], true));
                    i += special.len();
                    plain_start = i;
                }
                None => {
                    i += text[i..].chars().next().map_or(1, char::len_utf8);
                }
            }
        }
        if plain_start < text.len() {
            out.push((&text[plain_start..], false));
        }
        out
    }

    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        for (segment, special) in self.split_specials(text) {
            if special {
                out.push(segment);
                continue;
            }
            match &self.inner {
                TokenizerImpl::Whitespace => out.extend(segment.split_whitespace()),
                TokenizerImpl::Bpe(vocab) => {
                    for m in pretokenizer().find_iter(segment) {
                        vocab.encode_piece(m.as_str(), &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        if self.special_tokens.is_empty() && self.is_whitespace() {
            return text.split_whitespace().count();
        }
        self.tokenize(text).len()
    }
}

pub fn load_vocab(path: &Path) -> Result<BpeVocab, UnitsError> {
    let bytes = std::fs::read(path).map_err(|e| {
        UnitsError::InvalidTokenizer(format!("cannot read vocab {}: {e}", path.display()))
    })?;
    BpeVocab::from_bytes(&bytes)
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Maximal runs of letters/digits; an apostrophe between two such
/// characters keeps the run going (`don't` is one word).
pub fn count_words(text: &str) -> usize {
    let mut words = 0;
    let mut in_word = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_alphanumeric() {
            if !in_word {
                words += 1;
                in_word = true;
            }
        } else if in_word && is_apostrophe(c) && chars.peek().is_some_and(|n| n.is_alphanumeric()) {
            // internal apostrophe
        } else {
            in_word = false;
        }
    }
    words
}

pub fn count_characters(text: &str) -> usize {
    text.chars().count()
}

/// The length function `f(text)` for every unit, bundling the tokenizer
/// and the abbreviation list used for sentence counting.
#[derive(Debug, Clone)]
pub struct Counter {
    tokenizer: Arc<Tokenizer>,
    abbreviations: Arc<AbbreviationSet>,
}

impl Default for Counter {
    fn default() -> Self {
        Counter::new(Arc::new(Tokenizer::whitespace()), AbbreviationSet::shared_default())
    }
}

impl Counter {
    pub fn new(tokenizer: Arc<Tokenizer>, abbreviations: Arc<AbbreviationSet>) -> Counter {
        Counter {
            tokenizer,
            abbreviations,
        }
    }

    pub fn with_tokenizer(tokenizer: Tokenizer) -> Counter {
        Counter::new(Arc::new(tokenizer), AbbreviationSet::shared_default())
    }

    pub fn tokenizer(&self) -> &Arc<Tokenizer> {
        &self.tokenizer
    }

    pub fn abbreviations(&self) -> &Arc<AbbreviationSet> {
        &self.abbreviations
    }

    pub fn count_value(&self, text: &str, unit: LengthUnit) -> usize {
        match unit {
            LengthUnit::Token => self.tokenizer.count_tokens(text),
            LengthUnit::Word => count_words(text),
            LengthUnit::Sentence => {
                segmenter::segment_batch_with(text, self.abbreviations.clone()).len()
            }
            LengthUnit::Character => count_characters(text),
        }
    }

    pub fn count(&self, text: &str, unit: LengthUnit) -> CountReport {
        CountReport {
            unit,
            value: self.count_value(text, unit),
            text_bytes: text.len(),
        }
    }
}

/// Counts with the default abbreviation list.
pub fn count(text: &str, unit: LengthUnit, tokenizer: &Tokenizer) -> CountReport {
    Counter::new(Arc::new(tokenizer.clone()), AbbreviationSet::shared_default()).count(text, unit)
}

pub fn tokenize(text: &str, tokenizer: &Tokenizer) -> Vec<String> {
    tokenizer.tokenize(text).into_iter().map(str::to_string).collect()
}
