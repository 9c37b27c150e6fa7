//! Toy WordPiece tokenizer with word-boundary tracking.
//!
//! Continuation pieces carry a `##` prefix. Every sub-token records the index
//! of the whitespace/punctuation word it came from, which is what whole-word
//! masking groups on.

use std::collections::HashMap;
use std::path::Path;

use crate::emotion::EmotionClass;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
const CONTINUATION: &str = "##";
const PUNCTUATION: [char; 4] = ['.', ',', '!', '?'];

static BUILTIN_VOCAB: &str = include_str!("../data/vocab.txt");

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl Vocab {
    /// Parses one token per line; the line number is the id.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (line, raw) in text.lines().enumerate() {
            let tok = raw.trim_end_matches('\r');
            if tok.is_empty() {
                return Err(Error::Parse {
                    record: line,
                    msg: "empty vocabulary entry".into(),
                });
            }
            if ids.insert(tok.to_string(), tokens.len() as TokenId).is_some() {
                return Err(Error::Parse {
                    record: line,
                    msg: format!("duplicate token `{tok}`"),
                });
            }
            tokens.push(tok.to_string());
        }
        let special = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token {name}")))
        };
        Ok(Self {
            pad: special(PAD)?,
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            mask: special(MASK)?,
            tokens,
            ids,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// The bundled ~190-token vocabulary.
    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_VOCAB).expect("bundled vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.token(id).is_some_and(|t| SPECIALS.contains(&t))
    }

    pub fn is_continuation(&self, id: TokenId) -> bool {
        self.token(id).is_some_and(|t| t.starts_with(CONTINUATION))
    }

    /// Ids eligible as random replacements during masking.
    pub fn ordinary_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&i| !self.is_special(i)).collect()
    }

    fn require(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::Config(format!("vocabulary lacks `{token}`")))
    }

    /// Greedy longest-match WordPiece split of lowercase ASCII text.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for (word_index, word) in split_words(text).into_iter().enumerate() {
            let wid = Some(word_index as u32);
            match self.split_word(word) {
                Some(pieces) => {
                    for id in pieces {
                        seq.push(id, wid);
                    }
                }
                None => seq.push(self.unk, wid),
            }
        }
        seq
    }

    fn split_word(&self, word: &str) -> Option<Vec<TokenId>> {
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                let piece = if start == 0 {
                    word[start..end].to_string()
                } else {
                    format!("{CONTINUATION}{}", &word[start..end])
                };
                if let Some(id) = self.id(&piece).filter(|&id| !self.is_special(id)) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }

    /// Joins sub-tokens back into space-separated words.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        for (i, &id) in seq.ids.iter().enumerate() {
            let tok = self.token(id).unwrap_or(UNK);
            let joins = i > 0 && seq.word_ids[i].is_some() && seq.word_ids[i] == seq.word_ids[i - 1];
            if joins {
                out.push_str(tok.strip_prefix(CONTINUATION).unwrap_or(tok));
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// The prompt template suffix `i am [MASK] .`.
    pub fn prompt_suffix(&self) -> Result<PromptSuffix> {
        let ids = [self.require("i")?, self.require("am")?, self.mask, self.require(".")?];
        let mut tokens = TokenSequence::default();
        for (w, &id) in ids.iter().enumerate() {
            let wid = (id != self.mask).then_some(w as u32);
            tokens.push(id, wid);
        }
        Ok(PromptSuffix { tokens, mask_index: 2 })
    }
}

fn split_words(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if PUNCTUATION.contains(&c) {
                if start < i {
                    words.push(&chunk[start..i]);
                }
                words.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            words.push(&chunk[start..]);
        }
    }
    words
}

/// Sub-token ids paired with source-word indices (`None` for special tokens).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub word_ids: Vec<Option<u32>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, word_ids: Vec<Option<u32>>) -> Result<Self> {
        if ids.len() != word_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} token ids but {} word ids",
                ids.len(),
                word_ids.len()
            )));
        }
        Ok(Self { ids, word_ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: TokenId, word: Option<u32>) {
        self.ids.push(id);
        self.word_ids.push(word);
    }

    pub fn word_count(&self) -> u32 {
        self.word_ids.iter().flatten().max().map_or(0, |&w| w + 1)
    }

    /// Appends `other`, renumbering its words after this sequence's words.
    pub fn append(&mut self, other: &TokenSequence) {
        let base = self.word_count();
        for (&id, &w) in other.ids.iter().zip(&other.word_ids) {
            self.push(id, w.map(|w| w + base));
        }
    }

    /// Contiguous position runs sharing one word id, in order.
    pub fn word_spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut spans: Vec<std::ops::Range<usize>> = Vec::new();
        for (i, w) in self.word_ids.iter().enumerate() {
            let Some(w) = w else { continue };
            match spans.last_mut() {
                Some(last) if last.end == i && self.word_ids[last.start] == Some(*w) => last.end = i + 1,
                _ => spans.push(i..i + 1),
            }
        }
        spans
    }
}

#[derive(Clone, Debug)]
pub struct PromptSuffix {
    pub tokens: TokenSequence,
    /// Position of `[MASK]` within `tokens`.
    pub mask_index: usize,
}

/// Maps each emotion class to a single vocabulary word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    ids: [TokenId; EmotionClass::COUNT],
}

impl Verbalizer {
    pub const DEFAULT_WORDS: [&'static str; EmotionClass::COUNT] = ["happy", "angry", "sad", "neutral"];

    pub fn new(vocab: &Vocab, words: [&str; EmotionClass::COUNT]) -> Result<Self> {
        let mut ids = [0; EmotionClass::COUNT];
        for (slot, word) in ids.iter_mut().zip(words) {
            let id = vocab.require(word)?;
            if vocab.is_special(id) || vocab.is_continuation(id) {
                return Err(Error::Config(format!("verbalizer word `{word}` is not a plain token")));
            }
            let seq = vocab.tokenize(word);
            if seq.ids != [id] {
                return Err(Error::Config(format!(
                    "verbalizer word `{word}` splits into sub-tokens"
                )));
            }
            *slot = id;
        }
        let mut sorted = ids;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("verbalizer words must be distinct".into()));
        }
        Ok(Self { ids })
    }

    pub fn default_for(vocab: &Vocab) -> Result<Self> {
        Self::new(vocab, Self::DEFAULT_WORDS)
    }

    pub fn id(&self, label: EmotionClass) -> TokenId {
        self.ids[label.index()]
    }

    pub fn ids(&self) -> &[TokenId; EmotionClass::COUNT] {
        &self.ids
    }

    pub fn label_of(&self, id: TokenId) -> Option<EmotionClass> {
        self.ids
            .iter()
            .position(|&v| v == id)
            .and_then(EmotionClass::from_index)
    }
}
