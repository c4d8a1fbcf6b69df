//! Grapheme tokenization, blank interleaving and duration-driven expansion.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rendering of the blank symbol. Always id 0.
pub const BLANK: &str = "~";
pub const BLANK_ID: u32 = 0;

/// Ordered grapheme inventory with the blank symbol at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit symbol list; `symbols[0]` must be the blank.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(BLANK) {
            return Err(Error::InvalidVocab(format!("symbol 0 must be {BLANK:?}")));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, sym) in symbols.iter().enumerate() {
            if sym.is_empty() {
                return Err(Error::InvalidVocab(format!("empty symbol at id {id}")));
            }
            if index.insert(sym.clone(), id as u32).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate symbol {sym:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Collects every lowercased character appearing in `texts`, sorted, after the blank.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars = BTreeSet::new();
        for text in texts {
            for ch in text.trim().chars().flat_map(char::to_lowercase) {
                if ch.to_string() != BLANK && !ch.is_control() {
                    chars.insert(ch);
                }
            }
        }
        let mut symbols = vec![BLANK.to_string()];
        symbols.extend(chars.into_iter().map(String::from));
        Self::new(symbols)
    }

    /// Parses the one-symbol-per-line vocabulary file format.
    pub fn parse(contents: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for line in contents.split('\n') {
            let line = line.strip_suffix('\r').unwrap_or(line);
            symbols.push(line.to_string());
        }
        // A single trailing newline terminates the last line rather than adding an empty symbol.
        if symbols.last().is_some_and(String::is_empty) {
            symbols.pop();
        }
        Self::new(symbols)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for sym in &self.symbols {
            out.push_str(sym);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
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

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Hex SHA-256 over the serialized symbol list; used to pair checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        hex::encode(digest)
    }

    /// Renders ids back to text, blanks included.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let _ = write!(out, "{}", self.symbol(id).unwrap_or("\u{fffd}"));
        }
        out
    }
}

/// Grapheme id sequence, optionally in blank-interleaved form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub has_blanks: bool,
}

impl TokenSeq {
    pub fn plain(ids: Vec<u32>) -> Self {
        Self { ids, has_blanks: false }
    }

    /// Wraps an already interleaved sequence, checking the blank layout.
    pub fn blanked(ids: Vec<u32>) -> Result<Self> {
        let seq = Self { ids, has_blanks: true };
        seq.check_layout()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-blank tokens.
    pub fn num_graphemes(&self) -> usize {
        self.ids.iter().filter(|&&id| id != BLANK_ID).count()
    }

    pub fn is_blank_position(&self, i: usize) -> bool {
        self.ids[i] == BLANK_ID
    }

    fn check_layout(&self) -> Result<()> {
        if !self.has_blanks {
            return Ok(());
        }
        if self.ids.len() % 2 == 0 {
            return Err(Error::NotBlanked);
        }
        for (i, &id) in self.ids.iter().enumerate() {
            if (i % 2 == 0) != (id == BLANK_ID) {
                return Err(Error::NotBlanked);
            }
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab.len()) {
            Some(&id) => Err(Error::InvalidVocab(format!(
                "id {id} out of range for vocabulary of {}",
                vocab.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Per-token durations in mel frames, aligned with a blank-interleaved [`TokenSeq`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DurationSeq(pub Vec<u32>);

impl DurationSeq {
    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Checks the full invariant set against `seq`: equal length and every
    /// non-blank token lasting at least one frame.
    pub fn validate_for(&self, seq: &TokenSeq) -> Result<()> {
        if self.0.len() != seq.len() {
            return Err(Error::LengthMismatch {
                expected: seq.len(),
                actual: self.0.len(),
            });
        }
        for (i, (&d, &id)) in self.0.iter().zip(&seq.ids).enumerate() {
            if id != BLANK_ID && d == 0 {
                return Err(Error::InvalidDurations(format!(
                    "non-blank token at position {i} has zero duration"
                )));
            }
        }
        Ok(())
    }

    /// Multiplies every duration by `scale`, rounding to the nearest frame and
    /// keeping non-blank tokens at one frame or more.
    pub fn scaled(&self, seq: &TokenSeq, scale: f64) -> Self {
        Self(
            self.0
                .iter()
                .zip(&seq.ids)
                .map(|(&d, &id)| {
                    let v = (d as f64 * scale).round().max(0.0) as u32;
                    if id != BLANK_ID { v.max(1) } else { v }
                })
                .collect(),
        )
    }
}

/// Lowercases `text` and maps each character to its vocabulary id.
///
/// Leading and trailing whitespace is dropped; positions in errors are
/// character offsets into the original string.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSeq> {
    let lead = text.chars().take_while(|c| c.is_whitespace()).count();
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ids = Vec::with_capacity(trimmed.len());
    let mut buf = [0u8; 4];
    for (offset, ch) in trimmed.chars().enumerate() {
        for lower in ch.to_lowercase() {
            let sym: &str = lower.encode_utf8(&mut buf);
            match vocab.id(sym) {
                Some(id) if id != BLANK_ID => ids.push(id),
                _ => {
                    return Err(Error::UnknownSymbol {
                        symbol: ch,
                        position: lead + offset,
                    })
                }
            }
        }
    }
    Ok(TokenSeq::plain(ids))
}

/// Produces `[~, t1, ~, t2, ..., tn, ~]`.
pub fn insert_blanks(seq: &TokenSeq) -> Result<TokenSeq> {
    if seq.has_blanks {
        return Err(Error::AlreadyBlanked);
    }
    let mut ids = Vec::with_capacity(2 * seq.len() + 1);
    ids.push(BLANK_ID);
    for &id in &seq.ids {
        ids.push(id);
        ids.push(BLANK_ID);
    }
    Ok(TokenSeq { ids, has_blanks: true })
}

/// Inverse of [`insert_blanks`].
pub fn strip_blanks(seq: &TokenSeq) -> Result<TokenSeq> {
    if !seq.has_blanks {
        return Err(Error::NotBlanked);
    }
    seq.check_layout()?;
    Ok(TokenSeq::plain(seq.ids.iter().skip(1).step_by(2).copied().collect()))
}

/// Repeats token `i` exactly `durs[i]` times, in order.
///
/// The result is a frame-level id sequence; blanks with zero duration vanish.
pub fn expand_by_durations(seq: &TokenSeq, durs: &DurationSeq) -> Result<TokenSeq> {
    if !seq.has_blanks {
        return Err(Error::NotBlanked);
    }
    if seq.len() != durs.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            actual: durs.len(),
        });
    }
    let total = durs.total();
    if total == 0 {
        return Err(Error::EmptyExpansion);
    }
    let mut ids = Vec::with_capacity(total);
    for (&id, &d) in seq.ids.iter().zip(durs.as_slice()) {
        ids.extend(std::iter::repeat_n(id, d as usize));
    }
    Ok(TokenSeq::plain(ids))
}
