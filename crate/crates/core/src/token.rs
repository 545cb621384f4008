//! Unified token space over text tokens and catalog items.
//!
//! Text tokens occupy ordinals `0..n_text`, items follow at `n_text..n_text + n_items`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum TokenId {
    Text(usize),
    Item(usize),
}

impl TokenId {
    pub fn is_item(self) -> bool {
        matches!(self, TokenId::Item(_))
    }

    pub fn index(self) -> usize {
        match self {
            TokenId::Text(i) | TokenId::Item(i) => i,
        }
    }

    pub fn kind_str(self) -> &'static str {
        match self {
            TokenId::Text(_) => "text",
            TokenId::Item(_) => "item",
        }
    }
}

/// Sizes of the text vocabulary and item catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub n_text: usize,
    pub n_items: usize,
}

impl TokenSpace {
    pub fn new(n_text: usize, n_items: usize) -> Self {
        Self { n_text, n_items }
    }

    pub fn len(&self) -> usize {
        self.n_text + self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, token: TokenId) -> bool {
        match token {
            TokenId::Text(v) => v < self.n_text,
            TokenId::Item(i) => i < self.n_items,
        }
    }

    pub fn ordinal(&self, token: TokenId) -> usize {
        debug_assert!(self.contains(token), "{token:?} outside {self:?}");
        match token {
            TokenId::Text(v) => v,
            TokenId::Item(i) => self.n_text + i,
        }
    }

    pub fn token(&self, ordinal: usize) -> Option<TokenId> {
        if ordinal < self.n_text {
            Some(TokenId::Text(ordinal))
        } else if ordinal < self.len() {
            Some(TokenId::Item(ordinal - self.n_text))
        } else {
            None
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len()).map(|o| self.token(o).expect("ordinal in range"))
    }
}
