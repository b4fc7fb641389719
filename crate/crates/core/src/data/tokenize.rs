use std::collections::BTreeMap;

use super::Example;
use crate::error::{DpmnError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];
const USER_TOKEN: &str = "<user>";
const URL_TOKEN: &str = "<url>";

/// Lowercases and splits on whitespace and punctuation. Mentions become
/// `<user>` and links (or the literal `URL` placeholder) become `<url>`.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 8)].iter().collect();
        if rest.starts_with("http://") || rest.starts_with("https://") || rest.starts_with("www.") {
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            tokens.push(URL_TOKEN.to_string());
        } else if c == '@' && chars.get(i + 1).is_some_and(|&n| is_word(n)) {
            i += 1;
            while i < chars.len() && is_word(chars[i]) {
                i += 1;
            }
            tokens.push(USER_TOKEN.to_string());
        } else if is_word(c) {
            let start = i;
            while i < chars.len() && is_word(chars[i]) {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            tokens.push(if word == "url" { URL_TOKEN.to_string() } else { word });
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

/// Token to id map. Ids 0..3 are PAD, UNK and CLS; corpus tokens follow in
/// descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build(examples: &[Example], min_freq: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(DpmnError::contract("cannot build a vocabulary from an empty corpus"));
        }
        if min_freq == 0 {
            return Err(DpmnError::config("min_freq must be at least 1"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for ex in examples {
            for tok in split_tokens(&ex.text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        kept.sort_by(|(ta, na), (tb, nb)| nb.cmp(na).then_with(|| ta.cmp(tb)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Rebuilds a vocabulary from corpus tokens in id order (ids from 3).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = BTreeMap::new();
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DpmnError::config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Corpus tokens (everything after the reserved ids) in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

/// `[CLS]` followed by the ids of the text's tokens.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    std::iter::once(CLS_ID)
        .chain(split_tokens(text).iter().map(|t| vocab.id(t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelA;

    fn ex(text: &str) -> Example {
        Example::new("x", text, LabelA::Not, None, None).unwrap()
    }

    #[test]
    fn normalises_mentions_and_links() {
        assert_eq!(split_tokens("@USER You FOOL"), ["<user>", "you", "fool"]);
        assert_eq!(
            split_tokens("see https://t.co/abc, URL!"),
            ["see", "<url>", "<url>", "!"]
        );
        assert_eq!(split_tokens("don't"), ["don", "'", "t"]);
        assert_eq!(split_tokens("a @ b"), ["a", "@", "b"]);
    }

    #[test]
    fn empty_text_is_just_cls() {
        let vocab = Vocab::build(&[ex("hello")], 1).unwrap();
        assert_eq!(tokenize("", &vocab), vec![CLS_ID]);
    }

    #[test]
    fn known_and_unknown_ids() {
        let vocab = Vocab::build(&[ex("@USER you you"), ex("you")], 2).unwrap();
        // "you" appears 3 times and is kept; "<user>" once and is not.
        assert_eq!(vocab.corpus_tokens(), ["you"]);
        assert_eq!(tokenize("@USER You FOOL", &vocab), vec![CLS_ID, UNK_ID, 3, UNK_ID]);
        assert_eq!(tokenize("you fool", &vocab), tokenize("you fool", &vocab));
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let vocab = Vocab::build(&[ex("b a c c"), ex("b a")], 1).unwrap();
        assert_eq!(vocab.corpus_tokens(), ["a", "b", "c"]);
        let vocab = Vocab::build(&[ex("b c c c"), ex("b")], 1).unwrap();
        assert_eq!(vocab.corpus_tokens(), ["c", "b"]);
    }

    #[test]
    fn high_min_freq_leaves_reserved_only() {
        let vocab = Vocab::build(&[ex("one two"), ex("two")], 100).unwrap();
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.token(CLS_ID), Some("[CLS]"));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocab::build(&[], 1), Err(DpmnError::Contract(_))));
    }
}
