//! Word-level vocabulary, fixed-length token sequences with a leading `[CLS_T]`,
//! and BERT-style masked-token corruption.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const CLS_T: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS_T]", "[MASK]", "[UNK]"];

/// Number of positions masked out of `n` at `ratio`, rounded down.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    // Tolerance keeps products such as 0.15 × 20 from landing just under an integer.
    (ratio * n as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

fn words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Lowercased whitespace tokens; non-reserved ids follow lexicographic order.
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Usage("cannot build a vocabulary from an empty corpus".into()));
        }
        let distinct: BTreeSet<String> = captions.iter().flat_map(|c| words(c.as_ref())).collect();
        Self::from_tokens(distinct.into_iter())
    }

    fn from_tokens(words: impl Iterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            if index.contains_key(&w) {
                return Err(Error::Data(format!("duplicate vocabulary token {w:?}")));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Self { index, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Words for non-reserved ids, in order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{t}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {}: missing tab", line_no + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {}: bad id", line_no + 1)))?;
            if id != line_no {
                return Err(Error::Data(format!(
                    "vocabulary line {} carries id {id}",
                    line_no + 1
                )));
            }
            rows.push(tok.to_string());
        }
        if rows.len() < RESERVED.len() || rows[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        Self::from_tokens(rows.into_iter().skip(RESERVED.len()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

pub fn build_vocab<S: AsRef<str>>(captions: &[S]) -> Result<Vocabulary> {
    Vocabulary::build(captions)
}

/// Fixed-length ids with `[CLS_T]` at position 0 and padding only at the tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens other than `[CLS_T]` and padding.
    pub fn real_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.ids.len()).filter(|&i| self.attention[i])
    }
}

pub fn encode(caption: &str, vocab: &Vocabulary, len: usize) -> Result<TokenSequence> {
    if len < 2 {
        return Err(Error::Config(format!("sequence length {len} is below 2")));
    }
    let mut ids = vec![CLS_T];
    ids.extend(words(caption).take(len - 1).map(|w| vocab.id(&w)));
    let real = ids.len();
    ids.resize(len, PAD);
    let attention = (0..len).map(|i| i < real).collect();
    Ok(TokenSequence { ids, attention })
}

/// `[CLS_T]` followed by padding: the text input when no caption exists.
pub fn empty_sequence(len: usize) -> Result<TokenSequence> {
    if len < 2 {
        return Err(Error::Config(format!("sequence length {len} is below 2")));
    }
    let mut ids = vec![PAD; len];
    ids[0] = CLS_T;
    Ok(TokenSequence {
        ids,
        attention: (0..len).map(|i| i == 0).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMaskPlan {
    /// Ascending positions into the sequence.
    pub positions: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub corruption: Vec<Corruption>,
}

impl TextMaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Selects `floor(ratio · real tokens)` positions uniformly without replacement
/// and corrupts them 80% `[MASK]`, 10% random word, 10% unchanged.
pub fn mask_tokens(
    seq: &TokenSequence,
    ratio: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<(TokenSequence, TextMaskPlan)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("masking ratio {ratio} outside (0, 1)")));
    }
    let real: Vec<usize> = seq.real_positions().collect();
    let count = mask_count(ratio, real.len());
    let mut positions: Vec<usize> = sample(rng, real.len(), count)
        .into_iter()
        .map(|i| real[i])
        .collect();
    positions.sort_unstable();

    let mut corrupted = seq.clone();
    let mut plan = TextMaskPlan {
        positions: Vec::with_capacity(count),
        original_ids: Vec::with_capacity(count),
        corruption: Vec::with_capacity(count),
    };
    for pos in positions {
        let roll: f64 = rng.gen();
        let action = if roll < 0.8 {
            Corruption::Mask
        } else if roll < 0.9 {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        match action {
            Corruption::Mask => corrupted.ids[pos] = MASK,
            Corruption::Random if vocab_size > RESERVED.len() => {
                corrupted.ids[pos] = rng.gen_range(RESERVED.len()..vocab_size)
            }
            Corruption::Random | Corruption::Keep => {}
        }
        plan.positions.push(pos);
        plan.original_ids.push(seq.ids[pos]);
        plan.corruption.push(action);
    }
    Ok((corrupted, plan))
}
