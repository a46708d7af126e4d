//! Token inventory and keyword tokenization.
//!
//! The extended vocabulary `V*` is laid out as `[base symbols..., blank, padding]`,
//! so base tokens occupy `0..n`, blank is `n` and padding is `n + 1`.

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Index into the extended vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u16);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("keyword is empty after normalization")]
    EmptyKeyword,
    #[error("unsupported symbol {symbol:?} at position {position}")]
    UnsupportedSymbol { symbol: char, position: usize },
    #[error("vocabulary must contain at least one base symbol")]
    EmptyInventory,
    #[error("duplicate symbol {0:?} in vocabulary")]
    DuplicateSymbol(char),
    #[error("vocabulary too large: {0} symbols")]
    TooLarge(usize),
    #[error("token id {0} is not a base token")]
    NotBaseToken(u16),
}

/// Character inventory plus the two CTC specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    lookup: Vec<(char, u16)>,
}

/// The 28-symbol English inventory: `a`..`z`, space, apostrophe.
pub const ENGLISH_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz '";

impl Vocabulary {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, VocabError> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(VocabError::EmptyInventory);
        }
        // two ids are reserved for blank and padding
        if symbols.len() + 2 > u16::MAX as usize {
            return Err(VocabError::TooLarge(symbols.len()));
        }
        let mut lookup: Vec<(char, u16)> = symbols.iter().enumerate().map(|(i, &c)| (c, i as u16)).collect();
        lookup.sort_unstable();
        if let Some(w) = lookup.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(VocabError::DuplicateSymbol(w[0].0));
        }
        Ok(Self { symbols, lookup })
    }

    pub fn english() -> Self {
        Self::new(ENGLISH_SYMBOLS.chars()).expect("built-in inventory is valid")
    }

    /// Number of base symbols (`|V|`).
    pub fn base_len(&self) -> usize {
        self.symbols.len()
    }

    /// Size of the extended vocabulary `V*` (base + blank + padding).
    pub fn total_len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn blank_id(&self) -> TokenId {
        TokenId(self.symbols.len() as u16)
    }

    pub fn padding_id(&self) -> TokenId {
        TokenId(self.symbols.len() as u16 + 1)
    }

    pub fn is_base(&self, id: TokenId) -> bool {
        id.index() < self.symbols.len()
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.lookup
            .binary_search_by_key(&c, |&(s, _)| s)
            .ok()
            .map(|i| TokenId(self.lookup[i].1))
    }

    pub fn symbol(&self, id: TokenId) -> Option<char> {
        self.symbols.get(id.index()).copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Token id of the word delimiter, if the inventory has one.
    pub fn space_id(&self) -> Option<TokenId> {
        self.id_of(' ')
    }

    /// Stable fingerprint of the inventory and special-token layout.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"ctcat-vocab-v1\0");
        for c in &self.symbols {
            let mut buf = [0u8; 4];
            h.update(c.encode_utf8(&mut buf).as_bytes());
            h.update([0u8]);
        }
        h.update(self.blank_id().0.to_le_bytes());
        h.update(self.padding_id().0.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn tokenize(&self, text: &str) -> Result<KeywordTokens, VocabError> {
        let normalized = normalize(text);
        if normalized.is_empty() {
            return Err(VocabError::EmptyKeyword);
        }
        let tokens = normalized
            .chars()
            .enumerate()
            .map(|(position, symbol)| self.id_of(symbol).ok_or(VocabError::UnsupportedSymbol { symbol, position }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KeywordTokens { text: normalized, tokens })
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String, VocabError> {
        tokens
            .iter()
            .map(|&t| self.symbol(t).ok_or(VocabError::NotBaseToken(t.0)))
            .collect()
    }
}

/// Lowercase, trim, and collapse internal whitespace runs to a single space.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// A tokenized keyword `y_1..y_U` (base tokens only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordTokens {
    text: String,
    tokens: Vec<TokenId>,
}

impl KeywordTokens {
    /// Builds a keyword directly from token ids, bypassing text normalization.
    pub fn from_ids(vocab: &Vocabulary, tokens: Vec<TokenId>) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::EmptyKeyword);
        }
        let text = vocab.detokenize(&tokens)?;
        Ok(Self { text, tokens })
    }

    /// Normalized keyword text.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// `U`, the number of non-blank tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
