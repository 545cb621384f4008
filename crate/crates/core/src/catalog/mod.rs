//! Item catalog, interaction ingestion, vocabulary and persisted tables.

mod ingest;
mod projection;
mod snapshot;
mod split;
mod vocab;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_jsonl, ingest_reader, Corpus, RawEvent};
pub use projection::{project_items, ProjectionHead};
pub use snapshot::{
    load_snapshot, read_snapshot, save_snapshot, write_snapshot, ClusteringKind, Snapshot,
    read_snapshot_header, SnapshotHeader, StorageReport, SNAPSHOT_MAGIC, SNAPSHOT_VERSION,
};
pub use split::{split_leave_one_out, LeaveOneOut, UserSplit};
pub use vocab::{tokenize, PriceBuckets, Vocab, VocabConfig, FIELD_MARKERS, PROMPT_PREFIX, PROMPT_SUFFIX};

use crate::token::TokenId;

/// Metadata fields an item may carry, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Title,
    Brand,
    Price,
    Category,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Title, Field::Brand, Field::Price, Field::Category];

    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn marker(self) -> &'static str {
        match self {
            Field::Title => "title:",
            Field::Brand => "brand:",
            Field::Price => "price:",
            Field::Category => "category:",
        }
    }
}

/// Bit set of present metadata fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldMask(pub u8);

impl FieldMask {
    pub const EMPTY: FieldMask = FieldMask(0);

    pub fn contains(self, field: Field) -> bool {
        self.0 & field.bit() != 0
    }

    pub fn insert(&mut self, field: Field) {
        self.0 |= field.bit();
    }

    pub fn fields(self) -> impl Iterator<Item = Field> {
        Field::ALL.into_iter().filter(move |f| self.contains(*f))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: Option<String>,
    pub brand: Option<String>,
    pub price: Option<f64>,
    pub category: Option<String>,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            ..Default::default()
        }
    }

    pub fn field_mask(&self) -> FieldMask {
        let mut mask = FieldMask::EMPTY;
        if self.title.is_some() {
            mask.insert(Field::Title);
        }
        if self.brand.is_some() {
            mask.insert(Field::Brand);
        }
        if self.price.is_some() {
            mask.insert(Field::Price);
        }
        if self.category.is_some() {
            mask.insert(Field::Category);
        }
        mask
    }

    pub fn text_field(&self, field: Field) -> Option<&str> {
        match field {
            Field::Title => self.title.as_deref(),
            Field::Brand => self.brand.as_deref(),
            Field::Category => self.category.as_deref(),
            Field::Price => None,
        }
    }

    /// Fills fields that are still missing from another record of the same item.
    fn merge_missing(&mut self, other: ItemRecord) {
        if self.title.is_none() {
            self.title = other.title;
        }
        if self.brand.is_none() {
            self.brand = other.brand;
        }
        if self.price.is_none() {
            self.price = other.price;
        }
        if self.category.is_none() {
            self.category = other.category;
        }
    }
}

/// Items indexed by dense position; external keys are unique.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or merges by external key, returning the dense index.
    pub fn upsert(&mut self, record: ItemRecord) -> usize {
        if let Some(&idx) = self.index.get(&record.item_id) {
            self.items[idx].merge_missing(record);
            idx
        } else {
            let idx = self.items.len();
            self.index.insert(record.item_id.clone(), idx);
            self.items.push(record);
            idx
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn lookup(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }
}

/// One history position: the item and which of its metadata fields exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryEntry {
    pub item: usize,
    pub fields: FieldMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub user: String,
    pub history: Vec<HistoryEntry>,
    pub target: usize,
}

impl SequenceExample {
    pub fn new(user: impl Into<String>, history: &[usize], target: usize, catalog: &Catalog) -> Self {
        Self {
            user: user.into(),
            history: history
                .iter()
                .map(|&item| HistoryEntry {
                    item,
                    fields: catalog.get(item).field_mask(),
                })
                .collect(),
            target,
        }
    }

    pub fn target_token(&self) -> TokenId {
        TokenId::Item(self.target)
    }

    pub fn history_items(&self) -> impl Iterator<Item = usize> + '_ {
        self.history.iter().map(|h| h.item)
    }
}

/// Dataset summary in the layout of the usual Amazon-review statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub items_per_user: f64,
    pub purchases_per_item: f64,
}

impl CatalogStats {
    pub fn compute(n_users: usize, n_items: usize, n_interactions: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self {
            n_users,
            n_items,
            n_interactions,
            items_per_user: ratio(n_interactions, n_users),
            purchases_per_item: ratio(n_interactions, n_items),
        }
    }
}
