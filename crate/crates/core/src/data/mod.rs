//! Dataset records, ingestion, synthesis, stage-2 example construction and batching.

mod batch;
mod examples;
mod ingest;
pub mod io;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use batch::{BatchIterator, PairBatch};
pub use examples::{build_stage2_examples, pretraining_pairs, split_last_click, ExampleSplit};
pub use ingest::{ingest_amazon, parse_records, IngestOptions, IngestStats, RawRecord};
pub use synthetic::{generate_synthetic, review_records, PlantedAssignment, SyntheticConfig};

/// Vocabulary index reserved for padding; never assigned to a real item.
pub const PADDING_INDEX: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One raw click/review event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub timestamp: i64,
    pub rating: Option<u8>,
    pub category: Option<String>,
}

impl Interaction {
    pub fn validate(&self) -> Result<()> {
        if self.timestamp < 0 {
            return Err(Error::Parse(format!("negative timestamp {}", self.timestamp)));
        }
        if let Some(r) = self.rating {
            if !(1..=5).contains(&r) {
                return Err(Error::Parse(format!("rating {r} outside [1, 5]")));
            }
        }
        if self.user_id.is_empty() || self.item_id.is_empty() {
            return Err(Error::Parse("empty user or item id".into()));
        }
        Ok(())
    }
}

/// A user's clicks in one domain, oldest first, left-aligned and padded to
/// exactly `max_len` positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSequence {
    pub user_id: String,
    pub domain: Domain,
    pub item_indices: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ClickSequence {
    /// Keeps the `max_len` most recent of `items` (given oldest first) and pads.
    pub fn new(user_id: impl Into<String>, domain: Domain, items: &[usize], max_len: usize) -> Self {
        assert!(max_len > 0, "max_len must be positive");
        let kept = &items[items.len().saturating_sub(max_len)..];
        let mut item_indices = kept.to_vec();
        let mut mask = vec![true; kept.len()];
        item_indices.resize(max_len, PADDING_INDEX);
        mask.resize(max_len, false);
        Self {
            user_id: user_id.into(),
            domain,
            item_indices,
            mask,
        }
    }

    pub fn max_len(&self) -> usize {
        self.item_indices.len()
    }

    /// Number of valid (non-padding) positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn items(&self) -> &[usize] {
        &self.item_indices[..self.len()]
    }

    pub fn check_invariants(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.item_indices.len() != max_len || self.mask.len() != max_len {
            return Err(Error::config(format!(
                "sequence for {} has length {} (mask {}), expected {max_len}",
                self.user_id,
                self.item_indices.len(),
                self.mask.len()
            )));
        }
        let valid = self.len();
        for (t, (&idx, &m)) in self.item_indices.iter().zip(&self.mask).enumerate() {
            if m != (t < valid) {
                return Err(Error::config(format!(
                    "sequence for {} is not left-aligned",
                    self.user_id
                )));
            }
            if m && (idx == PADDING_INDEX || idx > vocab_size) {
                return Err(Error::config(format!(
                    "item index {idx} invalid for vocabulary of {vocab_size}"
                )));
            }
            if !m && idx != PADDING_INDEX {
                return Err(Error::config(format!(
                    "padded position of {} holds item {idx}",
                    self.user_id
                )));
            }
        }
        Ok(())
    }
}

/// Dense item indexing for one domain. Index 0 is padding; category index 0
/// means "no category".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub domain: Domain,
    items: Vec<String>,
    item_category: Vec<usize>,
    categories: Vec<String>,
    index: HashMap<String, usize>,
    category_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(domain: Domain) -> Self {
        Self {
            domain,
            items: Vec::new(),
            item_category: vec![0],
            categories: Vec::new(),
            index: HashMap::new(),
            category_index: HashMap::new(),
        }
    }

    /// Adds an item (or returns its existing index).
    pub fn insert(&mut self, item_id: &str, category: Option<&str>) -> usize {
        if let Some(&idx) = self.index.get(item_id) {
            return idx;
        }
        let cat = category.map_or(0, |c| self.category(c));
        self.items.push(item_id.to_string());
        self.item_category.push(cat);
        let idx = self.items.len();
        self.index.insert(item_id.to_string(), idx);
        idx
    }

    fn category(&mut self, name: &str) -> usize {
        if let Some(&c) = self.category_index.get(name) {
            return c;
        }
        self.categories.push(name.to_string());
        let c = self.categories.len();
        self.category_index.insert(name.to_string(), c);
        c
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.items.get(i))
            .map(String::as_str)
    }

    /// Number of real items.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn category_name(&self, c: usize) -> Option<&str> {
        c.checked_sub(1)
            .and_then(|i| self.categories.get(i))
            .map(String::as_str)
    }

    /// Category index per item index (entry 0 belongs to padding).
    pub fn item_categories(&self) -> &[usize] {
        &self.item_category
    }

    pub fn from_parts(
        domain: Domain,
        items: Vec<String>,
        item_category: Vec<usize>,
        categories: Vec<String>,
    ) -> Result<Self> {
        if item_category.len() != items.len() + 1 || item_category[0] != 0 {
            return Err(Error::config("item_category must have one entry per item plus padding"));
        }
        if item_category.iter().any(|&c| c > categories.len()) {
            return Err(Error::config("category index out of range"));
        }
        let mut v = Self {
            domain,
            items,
            item_category,
            categories,
            index: HashMap::new(),
            category_index: HashMap::new(),
        };
        v.rebuild_index();
        if v.index.len() != v.items.len() {
            return Err(Error::config("duplicate item id in vocabulary"));
        }
        Ok(v)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + 1))
            .collect();
        self.category_index = self
            .categories
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + 1))
            .collect();
    }
}

/// Aligned source/target sequences of one user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencePair {
    pub user_id: String,
    pub source: ClickSequence,
    pub target: ClickSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub pairs: Vec<SequencePair>,
    pub max_len: usize,
}

impl Dataset {
    pub fn vocab(&self, domain: Domain) -> &Vocabulary {
        match domain {
            Domain::Source => &self.source_vocab,
            Domain::Target => &self.target_vocab,
        }
    }

    /// Checks every sequence invariant.
    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            p.source.check_invariants(self.source_vocab.len(), self.max_len)?;
            p.target.check_invariants(self.target_vocab.len(), self.max_len)?;
            if p.source.user_id != p.user_id || p.target.user_id != p.user_id {
                return Err(Error::config(format!("misaligned pair for {}", p.user_id)));
            }
        }
        Ok(())
    }

    /// Content hash over vocabularies and sequences (hex, 16 chars).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.max_len.to_le_bytes());
        for vocab in [&self.source_vocab, &self.target_vocab] {
            for (i, item) in vocab.items.iter().enumerate() {
                h.update(item.as_bytes());
                h.update(vocab.item_category[i + 1].to_le_bytes());
            }
            h.update(b"|");
        }
        for p in &self.pairs {
            h.update(p.user_id.as_bytes());
            for &i in p.source.items() {
                h.update(i.to_le_bytes());
            }
            h.update(b"/");
            for &i in p.target.items() {
                h.update(i.to_le_bytes());
            }
        }
        short_hex(&h.finalize())
    }
}

/// Stage-2 training record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdrExample {
    pub user_id: String,
    pub source_seq: ClickSequence,
    pub target_seq: ClickSequence,
    pub candidate_item: usize,
    pub label: u8,
}

pub fn short_hex(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}
