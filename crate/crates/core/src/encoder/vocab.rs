use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError};
use crate::types::{ControlCode, Document};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
/// Number of reserved ids preceding the hashed word buckets.
pub const RESERVED: usize = 8;

pub fn code_token(code: ControlCode) -> usize {
    4 + code.index()
}

/// Token placed at position 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lead {
    Cls,
    Code(ControlCode),
}

impl Lead {
    pub fn token(self) -> usize {
        match self {
            Lead::Cls => CLS,
            Lead::Code(c) => code_token(c),
        }
    }
}

/// Hashed word vocabulary: `RESERVED + fnv1a64(seed ‖ word) mod size`.
///
/// Words are produced by whitespace splitting and ASCII lowercasing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub seed: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, word: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(word.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl Vocab {
    pub fn new(size: usize, seed: u64) -> Self {
        Self { size, seed }
    }

    /// Total rows in the token embedding table.
    pub fn rows(&self) -> usize {
        self.size + RESERVED
    }

    pub fn word_id(&self, word: &str) -> usize {
        let lower = word.to_ascii_lowercase();
        RESERVED + (fnv1a(self.seed, &lower) % self.size as u64) as usize
    }

    pub fn words<'a>(&'a self, text: &'a str) -> impl Iterator<Item = usize> + 'a {
        text.split_whitespace().map(move |w| self.word_id(w))
    }
}

/// Token ids for one input, padded to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    /// Number of non-padding positions; padding only ever trails the content.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&t| t == PAD).unwrap_or(self.ids.len())
    }

    pub fn trimmed(&self) -> &[usize] {
        &self.ids[..self.content_len()]
    }
}

/// Builds `[lead] title [SEP] abstract`, truncated to `max_len` and padded with `[PAD]`.
///
/// With `with_metadata`, venue and year words follow the abstract after a second `[SEP]`.
pub fn tokenize(doc: &Document, lead: Lead, cfg: &EncoderConfig, with_metadata: bool) -> Result<TokenSeq, EncoderError> {
    if doc.title.split_whitespace().next().is_none() {
        return Err(EncoderError::EmptyTitle(doc.id.clone()));
    }
    let vocab = cfg.vocab();
    let mut ids = Vec::with_capacity(cfg.max_len);
    ids.push(lead.token());
    ids.extend(vocab.words(&doc.title));
    ids.push(SEP);
    ids.extend(vocab.words(&doc.abstract_text));
    if with_metadata && (doc.venue.is_some() || doc.year.is_some()) {
        ids.push(SEP);
        if let Some(v) = &doc.venue {
            ids.extend(vocab.words(v));
        }
        if let Some(y) = doc.year {
            ids.push(vocab.word_id(&y.to_string()));
        }
    }
    ids.truncate(cfg.max_len);
    ids.resize(cfg.max_len, PAD);
    Ok(TokenSeq { ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig { max_len: 16, ..EncoderConfig::default() }
    }

    #[test]
    fn minimal_document() {
        let c = cfg();
        let doc = Document::new("d", "a", "");
        let seq = tokenize(&doc, Lead::Code(ControlCode::Clf), &c, false).unwrap();
        assert_eq!(seq.ids[0], 4);
        assert_eq!(seq.ids[1], c.vocab().word_id("a"));
        assert_eq!(seq.ids[2], SEP);
        assert!(seq.ids[3..].iter().all(|&t| t == PAD));
        assert_eq!(seq.ids.len(), 16);
        assert_eq!(seq.content_len(), 3);
    }

    #[test]
    fn codes_differ_only_at_position_zero() {
        let c = cfg();
        let doc = Document::new("d", "graph neural nets", "we study message passing");
        let a = tokenize(&doc, Lead::Code(ControlCode::Prx), &c, false).unwrap();
        let b = tokenize(&doc, Lead::Code(ControlCode::Clf), &c, false).unwrap();
        assert_ne!(a.ids[0], b.ids[0]);
        assert_eq!(a.ids[1..], b.ids[1..]);
    }

    #[test]
    fn long_documents_truncate_to_max_len() {
        let c = cfg();
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let doc = Document::new("d", "title words here", words.join(" "));
        let seq = tokenize(&doc, Lead::Code(ControlCode::Rgn), &c, false).unwrap();
        assert_eq!(seq.ids.len(), c.max_len);
        assert_eq!(seq.ids[0], code_token(ControlCode::Rgn));
        assert!(seq.ids.iter().all(|&t| t != PAD));
    }

    #[test]
    fn empty_title_is_rejected() {
        let doc = Document::new("d7", "   ", "abstract only");
        let err = tokenize(&doc, Lead::Cls, &cfg(), false).unwrap_err();
        assert!(matches!(err, EncoderError::EmptyTitle(ref id) if id == "d7"));
    }

    #[test]
    fn metadata_follows_second_separator() {
        let c = cfg();
        let mut doc = Document::new("d", "t", "x");
        doc.venue = Some("venue".into());
        doc.year = Some(2011);
        let seq = tokenize(&doc, Lead::Cls, &c, true).unwrap();
        let v = c.vocab();
        assert_eq!(seq.trimmed(), &[CLS, v.word_id("t"), SEP, v.word_id("x"), SEP, v.word_id("venue"), v.word_id("2011")]);
        let plain = tokenize(&doc, Lead::Cls, &c, false).unwrap();
        assert_eq!(plain.content_len(), 4);
    }

    #[test]
    fn hashing_is_deterministic_and_avoids_reserved_ids() {
        let v = Vocab::new(4096, 17);
        for w in ["alpha", "beta", "", "x", "Graph"] {
            let id = v.word_id(w);
            assert!(id >= RESERVED && id < v.rows());
            assert_eq!(id, v.word_id(w));
        }
        assert_eq!(v.word_id("Graph"), v.word_id("graph"));
        assert_ne!(Vocab::new(4096, 18).word_id("alpha"), v.word_id("alpha"));
    }
}
