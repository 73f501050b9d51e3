use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

const WORDS: &[&str] = &[
    "one", "two", "three", "four",
    "red", "green", "blue", "yellow", "crimson", "emerald", "azure", "golden",
    "circle", "circles", "square", "squares", "triangle", "triangles", "disk", "disks", "box", "boxes",
    "left", "right", "of", "above", "below", "over", "under",
    "top", "bottom", "upper", "lower", "row", "column",
    "in", "the", "there", "are", "is", "has", "shows",
];

/// Word-level vocabulary: four specials followed by the caption words, ids dense from 0.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words: Vec<&'static str> = SPECIALS.iter().chain(WORDS).copied().collect();
        let ids = words.iter().enumerate().map(|(i, w)| (*w, i as u32)).collect();
        Self { words, ids }
    }
}

impl Vocab {
    /// The process-wide default vocabulary.
    pub fn shared() -> &'static Vocab {
        static SHARED: std::sync::OnceLock<Vocab> = std::sync::OnceLock::new();
        SHARED.get_or_init(Vocab::default)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        self.words.get(id as usize).copied()
    }

    pub fn encode(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Splits on whitespace and encodes.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Words for ids up to the first end or pad token.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<&'static str>> {
        ids.iter()
            .take_while(|&&i| i != END && i != PAD)
            .filter(|&&i| i != START)
            .map(|&i| self.word(i).ok_or_else(|| Error::Scene(format!("token id {i} out of vocabulary"))))
            .collect()
    }

    pub fn to_text(&self, ids: &[u32]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    /// Encoder input: the words, an end token, then padding, truncated to `context`.
    pub fn encoder_input(&self, ids: &[u32], context: usize) -> Vec<u32> {
        let mut out: Vec<u32> = ids.iter().copied().chain([END]).take(context).collect();
        out.resize(context, PAD);
        out
    }
}
