//! Shared character vocabulary with reserved control tokens.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
/// Language tag that starts (or introduces) the transcription segment.
pub const TO_SRC: TokenId = 2;
/// Language tag that starts (or introduces) the translation segment.
pub const TO_TGT: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "</s>", "<2src>", "<2tgt>", "<unk>"];

/// Stand-in for the space character, so every token is printable on its own line.
pub const SPACE: &str = "\u{2581}";

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIALS.len()
}

pub fn is_tag(id: TokenId) -> bool {
    id == TO_SRC || id == TO_TGT
}

/// Token list whose line order is the id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary must start with <pad> </s> <2src> <2tgt> <unk>")]
    Specials,
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("empty token")]
    EmptyToken,
}

fn char_token(c: char) -> String {
    if c == ' ' {
        SPACE.into()
    } else {
        c.to_string()
    }
}

impl Vocabulary {
    /// Specials followed by every character of `texts`, sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<String> = texts.into_iter().flat_map(|t| t.chars()).map(char_token).collect();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(chars).collect();
        Self::from_tokens(tokens).expect("specials first, content deduplicated")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(VocabError::Specials);
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(VocabError::EmptyToken);
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per character.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id(&char_token(c))).collect()
    }

    /// Inverse of [`encode`](Self::encode) over content tokens; specials are
    /// skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !is_special(id))
            .filter_map(|&id| self.token(id))
            .map(|t| if t == SPACE { " " } else { t })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_round_trip() {
        let v = Vocabulary::from_texts(["ba c", "DE"]);
        assert_eq!(&v.tokens()[..5], &SPECIALS);
        assert_eq!(&v.tokens()[5..], &["D", "E", "a", "b", "c", SPACE]);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert_eq!(v.decode(&v.encode("ba c")), "ba c");
        assert_eq!(v.encode("z"), [UNK]);
    }

    #[test]
    fn rebuild_is_stable() {
        let a = Vocabulary::from_texts(["xy", "yz"]);
        let b = Vocabulary::from_texts(["yz", "xy"]);
        assert_eq!(a, b);
        assert_eq!(Vocabulary::from_tokens(a.tokens().to_vec()).unwrap(), a);
    }

    #[test]
    fn malformed_lists_rejected() {
        assert_eq!(Vocabulary::from_tokens(vec!["a".into()]), Err(VocabError::Specials));
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.push("a".into());
        t.push("a".into());
        assert_eq!(Vocabulary::from_tokens(t), Err(VocabError::Duplicate("a".into())));
    }
}
