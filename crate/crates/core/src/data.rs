//! Character vocabularies, corpora, batch sampling and the data-sufficiency
//! indicator.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Id reserved for characters outside the vocabulary.
pub const UNK_ID: u32 = 0;
/// What the unknown id decodes to.
pub const UNK_CHAR: char = '\u{FFFD}';
/// Largest accepted upload, in bytes.
pub const MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

/// A character vocabulary. Id 0 is the unknown symbol; ids `1..size` map to
/// the stored symbols in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocabulary {
    /// Distinct characters of `text`, sorted by code point.
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from empty text".into()));
        }
        let mut symbols: Vec<char> = text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self::from_symbols(symbols)
    }

    /// Rebuilds a vocabulary from its stored symbols, e.g. from a checkpoint.
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i as u32 + 1).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Number of ids, including the unknown symbol.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Stored symbols in id order, excluding the unknown symbol.
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id_of(c).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter().map(|&id| self.symbol(id)).collect()
    }

    pub fn symbol(&self, id: u32) -> Result<char> {
        match id {
            UNK_ID => Ok(UNK_CHAR),
            _ => self.symbols.get(id as usize - 1).copied().ok_or_else(|| {
                Error::Data(format!("token id {id} outside vocabulary of size {}", self.size()))
            }),
        }
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let text: String = self.symbols.iter().collect();
        text.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Self::from_symbols(text.chars().collect()).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Builtin,
    Uploaded,
}

/// Builtin corpora: `(id, display name, text)`.
pub const BUILTIN_CORPORA: [(&str, &str, &str); 2] = [
    (
        "shakespeare",
        "Shakespeare (nine plays)",
        include_str!("../assets/shakespeare.txt"),
    ),
    (
        "stories",
        "Children's short stories",
        include_str!("../assets/stories.txt"),
    ),
];

pub fn builtin_text(id: &str) -> Option<&'static str> {
    BUILTIN_CORPORA
        .iter()
        .find(|(cid, _, _)| *cid == id)
        .map(|(_, _, text)| *text)
}

/// A tokenized corpus. The holdout slice is the contiguous tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    name: String,
    text: Arc<str>,
    tokens: Arc<[u32]>,
    holdout_fraction: f64,
    source: CorpusSource,
}

impl Corpus {
    /// Encodes `text` against `vocab`. Characters outside it become UNK.
    pub fn new(
        name: impl Into<String>,
        text: impl Into<Arc<str>>,
        vocab: &Vocabulary,
        holdout_fraction: f64,
        source: CorpusSource,
    ) -> Result<Self> {
        if !(0.0..=0.5).contains(&holdout_fraction) {
            return Err(Error::Data(format!(
                "holdout fraction {holdout_fraction} outside [0, 0.5]"
            )));
        }
        let text = text.into();
        let tokens = vocab.encode(&text).into();
        Ok(Self {
            name: name.into(),
            text,
            tokens,
            holdout_fraction,
            source,
        })
    }

    pub fn builtin(id: &str, vocab: &Vocabulary) -> Result<Self> {
        let (_, name, text) = BUILTIN_CORPORA
            .iter()
            .find(|(cid, _, _)| *cid == id)
            .ok_or_else(|| Error::Data(format!("no builtin corpus named {id:?}")))?;
        Self::new(*name, *text, vocab, DEFAULT_HOLDOUT_FRACTION, CorpusSource::Builtin)
    }

    /// Validates an uploaded file and encodes it.
    pub fn upload(name: impl Into<String>, bytes: &[u8], vocab: &Vocabulary) -> Result<Self> {
        let text = upload_text(bytes)?;
        Self::new(name, text, vocab, DEFAULT_HOLDOUT_FRACTION, CorpusSource::Uploaded)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> CorpusSource {
        self.source
    }

    pub fn holdout_fraction(&self) -> f64 {
        self.holdout_fraction
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Index where the holdout tail begins.
    pub fn split_point(&self) -> usize {
        let holdout = (self.tokens.len() as f64 * self.holdout_fraction).floor() as usize;
        self.tokens.len() - holdout
    }

    pub fn train_tokens(&self) -> &[u32] {
        &self.tokens[..self.split_point()]
    }

    pub fn holdout_tokens(&self) -> &[u32] {
        &self.tokens[self.split_point()..]
    }

    /// Shared handle to the training slice for a worker thread.
    pub fn train_arc(&self) -> Arc<[u32]> {
        self.train_tokens().into()
    }

    pub fn sufficiency(&self, param_count: usize) -> Sufficiency {
        sufficiency(self.train_tokens().len(), param_count, SufficiencyThresholds::default())
    }
}

/// Checks size and encoding of an uploaded corpus.
pub fn upload_text(bytes: &[u8]) -> Result<String> {
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(Error::Data(format!(
            "upload of {} bytes exceeds the {MAX_UPLOAD_BYTES}-byte limit",
            bytes.len()
        )));
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Data(format!("upload is not valid UTF-8: {e}")))?;
    if text.is_empty() {
        return Err(Error::Data("upload is empty".into()));
    }
    Ok(text.to_owned())
}

/// One training batch, row-major `[batch, context]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub context_len: usize,
}

/// Draws `batch_size` windows with uniformly distributed start offsets.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &[u32],
    context_len: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if context_len == 0 || train.len() < context_len + 1 {
        return Err(Error::Data(format!(
            "training slice of {} tokens is too short for one window of {context_len}+1",
            train.len()
        )));
    }
    let max_start = train.len() - context_len - 1;
    let mut inputs = Vec::with_capacity(batch_size * context_len);
    let mut targets = Vec::with_capacity(batch_size * context_len);
    for _ in 0..batch_size {
        let start = rng.random_range(0..=max_start);
        inputs.extend_from_slice(&train[start..start + context_len]);
        targets.extend_from_slice(&train[start + 1..start + context_len + 1]);
    }
    Ok(Batch {
        inputs,
        targets,
        batch_size,
        context_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Insufficient,
    Marginal,
    Sufficient,
}

/// Tokens-per-parameter cut points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyThresholds {
    pub marginal: f64,
    pub sufficient: f64,
}

impl Default for SufficiencyThresholds {
    fn default() -> Self {
        Self {
            marginal: 0.05,
            sufficient: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sufficiency {
    pub tokens_per_parameter: f64,
    pub verdict: Verdict,
}

pub fn sufficiency(
    train_tokens: usize,
    param_count: usize,
    thresholds: SufficiencyThresholds,
) -> Sufficiency {
    let ratio = train_tokens as f64 / param_count.max(1) as f64;
    let verdict = if ratio < thresholds.marginal {
        Verdict::Insufficient
    } else if ratio < thresholds.sufficient {
        Verdict::Marginal
    } else {
        Verdict::Sufficient
    };
    Sufficiency {
        tokens_per_parameter: ratio,
        verdict,
    }
}
