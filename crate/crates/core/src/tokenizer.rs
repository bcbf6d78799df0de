//! Whitespace/punctuation tokenization, a suffix-stripping token normalizer
//! and the model vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// A piece of text split into tokens, with character offsets back into the
/// original string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub raw: String,
    pub tokens: Vec<String>,
    /// Per-token `(start, end)` character (not byte) offsets into `raw`.
    pub offsets: Vec<(usize, usize)>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Text covered by token `i`, recovered through its offsets.
    pub fn span(&self, i: usize) -> String {
        let (s, e) = self.offsets[i];
        self.raw.chars().skip(s).take(e - s).collect()
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
        )
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits on whitespace; every punctuation character becomes its own token,
/// except an apostrophe with alphanumerics on both sides ("Dracula's",
/// "don't"), which stays inside the word.
pub fn tokenize(text: &str) -> TokenizedText {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let mut start: Option<usize> = None;

    let mut flush = |start: &mut Option<usize>, end: usize, tokens: &mut Vec<String>| {
        if let Some(s) = start.take() {
            tokens.push(chars[s..end].iter().collect());
            offsets.push((s, end));
        }
    };

    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut start, i, &mut tokens);
        } else if is_punct(c) {
            let inner_apostrophe = is_apostrophe(c)
                && start.is_some()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if inner_apostrophe {
                continue;
            }
            flush(&mut start, i, &mut tokens);
            start = Some(i);
            flush(&mut start, i + 1, &mut tokens);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    flush(&mut start, chars.len(), &mut tokens);

    TokenizedText {
        raw: text.to_string(),
        tokens,
        offsets,
    }
}

/// Maps a surface token to the form used for "same lemma" comparisons.
pub trait TokenNormalizer {
    fn normalize(&self, token: &str) -> String;
}

/// Suffixes tried in order; the first applicable one wins.
const SUFFIXES: [&str; 5] = ["'s", "ing", "es", "ed", "s"];
const MIN_STEM: usize = 3;

/// Lowercases and strips at most one inflectional suffix.
#[derive(Debug, Clone, Copy, Default)]
pub struct SuffixNormalizer;

fn strippable(word: &str) -> Option<&str> {
    SUFFIXES.iter().find_map(|suf| {
        word.strip_suffix(suf)
            .filter(|stem| stem.chars().count() >= MIN_STEM)
    })
}

impl TokenNormalizer for SuffixNormalizer {
    fn normalize(&self, token: &str) -> String {
        let lower = token.to_lowercase();
        // A stem is only accepted if it would not be stripped again, which
        // makes the normalizer idempotent.
        for suf in SUFFIXES {
            if let Some(stem) = lower.strip_suffix(suf) {
                if stem.chars().count() >= MIN_STEM && strippable(stem).is_none() {
                    return stem.to_string();
                }
            }
        }
        lower
    }
}

pub fn normalize_token(token: &str) -> String {
    SuffixNormalizer.normalize(token)
}

pub fn is_punctuation_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct)
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token/id mapping. Ids 0 and 1 are reserved for padding and unknown tokens.
/// Tokens are matched case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds from token counts: tokens seen at least `min_count` times get
    /// ids in order of decreasing frequency, then lexicographically.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a TokenizedText>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for tok in &text.tokens {
                *counts.entry(tok.to_lowercase()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Rebuilds from the non-reserved tokens in id order (ids 2, 3, ...).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let ids = all
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { ids, tokens: all }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn encode(&self, text: &TokenizedText) -> Vec<usize> {
        text.tokens.iter().map(|t| self.id(t)).collect()
    }
}
