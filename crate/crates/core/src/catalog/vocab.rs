use std::collections::HashMap;

use super::{Catalog, Field};
use crate::error::{Error, Result};

pub const OOV: &str = "[oov]";
pub const PROMPT_PREFIX: &str = "the user has interacted with following items in chronological order";
pub const PROMPT_SUFFIX: &str = "which item will the user interact with next? id:";
pub const FIELD_MARKERS: [&str; 5] = ["id:", "title:", "brand:", "price:", "category:"];
pub const PRICE_BUCKETS: usize = 10;

/// Lowercased whitespace tokenization used for all metadata text.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    /// Upper bound on |V|, reserved tokens included.
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { max_size: 8192 }
    }
}

/// Quantile buckets over catalog prices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriceBuckets {
    edges: Vec<f64>,
}

impl PriceBuckets {
    pub fn fit(prices: impl IntoIterator<Item = f64>) -> Self {
        let mut sorted: Vec<f64> = prices.into_iter().filter(|p| p.is_finite()).collect();
        if sorted.is_empty() {
            return Self::default();
        }
        sorted.sort_by(f64::total_cmp);
        let edges = (1..PRICE_BUCKETS)
            .map(|q| sorted[(q * sorted.len() / PRICE_BUCKETS).min(sorted.len() - 1)])
            .collect();
        Self { edges }
    }

    pub fn bucket(&self, price: f64) -> usize {
        self.edges.partition_point(|&e| e <= price)
    }
}

/// Text vocabulary: reserved prompt tokens followed by metadata words, most frequent first.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    prices: PriceBuckets,
}

impl Vocab {
    pub fn build(catalog: &Catalog, config: VocabConfig) -> Result<Self> {
        let mut vocab = Self {
            words: Vec::new(),
            index: HashMap::new(),
            prices: PriceBuckets::fit(catalog.items().iter().filter_map(|r| r.price)),
        };
        vocab.push(OOV.to_string());
        for w in tokenize(PROMPT_PREFIX).chain(tokenize(PROMPT_SUFFIX)) {
            vocab.push(w);
        }
        for m in FIELD_MARKERS {
            vocab.push(m.to_string());
        }
        for b in 0..PRICE_BUCKETS {
            vocab.push(price_token(b));
        }
        if vocab.len() > config.max_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary cap {} is below the {} reserved tokens",
                config.max_size,
                vocab.len()
            )));
        }

        let mut counts: HashMap<String, u64> = HashMap::new();
        for rec in catalog.items() {
            for field in [Field::Title, Field::Brand, Field::Category] {
                if let Some(text) = rec.text_field(field) {
                    for w in tokenize(text) {
                        *counts.entry(w).or_default() += 1;
                    }
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(w, _)| !vocab.index.contains_key(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = config.max_size - vocab.len();
        for (w, _) in ranked.into_iter().take(room) {
            vocab.push(w);
        }
        Ok(vocab)
    }

    fn push(&mut self, word: String) {
        if !self.index.contains_key(&word) {
            self.index.insert(word.clone(), self.words.len());
            self.words.push(word);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn oov(&self) -> usize {
        0
    }

    /// Token index of a word, or the OOV token.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).map(|w| self.id(&w)).collect()
    }

    pub fn price_token(&self, price: f64) -> usize {
        self.id(&price_token(self.prices.bucket(price)))
    }

    /// Token ids of the prompt prefix.
    pub fn prefix(&self) -> Vec<usize> {
        self.encode(PROMPT_PREFIX)
    }

    /// Token ids of the question preceding the predicted item.
    pub fn suffix(&self) -> Vec<usize> {
        self.encode(PROMPT_SUFFIX)
    }

    pub fn marker(&self, marker: &str) -> usize {
        self.id(marker)
    }
}

fn price_token(bucket: usize) -> String {
    format!("[price_{bucket}]")
}
