//! Synthetic dual-domain click data with planted, corresponding interest groups.
//!
//! Interest group `g` owns a disjoint pool of items in each domain. A user
//! draws `interests_per_user` groups and fills both sequences from those
//! pools, except that each click is, with probability `noise`, replaced by an
//! item from a group the user does not own.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClickSequence, Dataset, Domain, RawRecord, SequencePair, Vocabulary};
use crate::error::{Error, Result};

/// Upper bound on items per domain for generated data.
pub const MAX_SYNTHETIC_ITEMS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_groups: usize,
    pub items_per_group_source: usize,
    pub items_per_group_target: usize,
    pub interests_per_user: usize,
    /// Inclusive `[min, max]` click counts.
    pub source_len: [usize; 2],
    pub target_len: [usize; 2],
    pub noise: f64,
    /// Item categories are drawn uniformly and carry no group information.
    pub num_categories: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_groups: 8,
            items_per_group_source: 40,
            items_per_group_target: 40,
            interests_per_user: 2,
            source_len: [10, 20],
            target_len: [3, 8],
            noise: 0.1,
            num_categories: 4,
            max_len: 20,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_users", self.num_users),
            ("num_groups", self.num_groups),
            ("items_per_group_source", self.items_per_group_source),
            ("items_per_group_target", self.items_per_group_target),
            ("interests_per_user", self.interests_per_user),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("synthetic.{name} must be positive")));
            }
        }
        if self.interests_per_user > self.num_groups {
            return Err(Error::config(
                "synthetic.interests_per_user exceeds synthetic.num_groups",
            ));
        }
        for (name, [lo, hi]) in [("source_len", self.source_len), ("target_len", self.target_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("synthetic.{name} must satisfy 1 <= min <= max")));
            }
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::config("synthetic.noise must be in [0, 0.5)"));
        }
        for (name, per) in [
            ("items_per_group_source", self.items_per_group_source),
            ("items_per_group_target", self.items_per_group_target),
        ] {
            if per.saturating_mul(self.num_groups) > MAX_SYNTHETIC_ITEMS {
                return Err(Error::config(format!(
                    "synthetic.{name} x num_groups exceeds {MAX_SYNTHETIC_ITEMS} items"
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth for a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedAssignment {
    pub num_groups: usize,
    /// Indexed by vocabulary index; entry 0 (padding) is `None`.
    pub source_item_group: Vec<Option<usize>>,
    pub target_item_group: Vec<Option<usize>>,
    /// Aligned with `Dataset::pairs`.
    pub user_groups: Vec<Vec<usize>>,
}

impl PlantedAssignment {
    pub fn item_group(&self, domain: Domain, index: usize) -> Option<usize> {
        match domain {
            Domain::Source => self.source_item_group.get(index).copied().flatten(),
            Domain::Target => self.target_item_group.get(index).copied().flatten(),
        }
    }

    /// Fraction of clicks that fall in one of the clicking user's own groups.
    pub fn in_group_fraction(&self, ds: &Dataset) -> f64 {
        let (mut inside, mut total) = (0usize, 0usize);
        for (pair, groups) in ds.pairs.iter().zip(&self.user_groups) {
            for (seq, domain) in [(&pair.source, Domain::Source), (&pair.target, Domain::Target)] {
                for &i in seq.items() {
                    total += 1;
                    if self.item_group(domain, i).is_some_and(|g| groups.contains(&g)) {
                        inside += 1;
                    }
                }
            }
        }
        inside as f64 / total.max(1) as f64
    }
}

fn draw_sequence(
    rng: &mut ChaCha8Rng,
    len: usize,
    owned: &[usize],
    others: &[usize],
    per_group: usize,
    noise: f64,
) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let group = if !others.is_empty() && rng.random::<f64>() < noise {
                others[rng.random_range(0..others.len())]
            } else {
                owned[rng.random_range(0..owned.len())]
            };
            group * per_group + rng.random_range(0..per_group) + 1
        })
        .collect()
}

/// Generates a dataset plus its planted group tables. Deterministic in `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, PlantedAssignment)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g = config.num_groups;

    let mut vocabs = Vec::new();
    let mut tables = Vec::new();
    for (domain, per, tag) in [
        (Domain::Source, config.items_per_group_source, "s"),
        (Domain::Target, config.items_per_group_target, "t"),
    ] {
        let mut v = Vocabulary::new(domain);
        let mut table = vec![None];
        for group in 0..g {
            for j in 0..per {
                let cat = if config.num_categories > 0 {
                    Some(format!("{tag}cat{}", rng.random_range(0..config.num_categories)))
                } else {
                    None
                };
                v.insert(&format!("{tag}_g{group:03}_i{j:05}"), cat.as_deref());
                table.push(Some(group));
            }
        }
        vocabs.push(v);
        tables.push(table);
    }

    let mut pairs = Vec::with_capacity(config.num_users);
    let mut user_groups = Vec::with_capacity(config.num_users);
    for u in 0..config.num_users {
        let mut owned: Vec<usize> = sample(&mut rng, g, config.interests_per_user).into_vec();
        owned.sort_unstable();
        let others: Vec<usize> = (0..g).filter(|x| !owned.contains(x)).collect();
        let ls = rng.random_range(config.source_len[0]..=config.source_len[1]);
        let lt = rng.random_range(config.target_len[0]..=config.target_len[1]);
        let s = draw_sequence(&mut rng, ls, &owned, &others, config.items_per_group_source, config.noise);
        let t = draw_sequence(&mut rng, lt, &owned, &others, config.items_per_group_target, config.noise);
        let user = format!("user{u:06}");
        pairs.push(SequencePair {
            source: ClickSequence::new(user.clone(), Domain::Source, &s, config.max_len),
            target: ClickSequence::new(user.clone(), Domain::Target, &t, config.max_len),
            user_id: user,
        });
        user_groups.push(owned);
    }

    let target_vocab = vocabs.pop().unwrap();
    let source_vocab = vocabs.pop().unwrap();
    let target_item_group = tables.pop().unwrap();
    let source_item_group = tables.pop().unwrap();
    let ds = Dataset {
        source_vocab,
        target_vocab,
        pairs,
        max_len: config.max_len,
    };
    ds.validate()?;
    Ok((
        ds,
        PlantedAssignment {
            num_groups: g,
            source_item_group,
            target_item_group,
            user_groups,
        },
    ))
}

/// Renders a dataset as review-log records (one per click, rating 4 or 5,
/// increasing timestamps) and mixes in `distractors_per_user` low-rated
/// reviews per user and domain, which ingestion must discard.
pub fn review_records(
    ds: &Dataset,
    distractors_per_user: usize,
    seed: u64,
) -> (Vec<RawRecord>, Vec<RawRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = (Vec::new(), Vec::new());
    for pair in &ds.pairs {
        for (seq, vocab, sink) in [
            (&pair.source, &ds.source_vocab, &mut out.0),
            (&pair.target, &ds.target_vocab, &mut out.1),
        ] {
            let mut ts = 1_400_000_000 + rng.random_range(0..1_000_000i64);
            for &i in seq.items() {
                ts += rng.random_range(1..10_000);
                sink.push(RawRecord {
                    user: pair.user_id.clone(),
                    item: vocab.item_id(i).unwrap().to_string(),
                    rating: f64::from(rng.random_range(4u8..=5)),
                    timestamp: ts,
                    category: vocab
                        .category_name(vocab.item_categories()[i])
                        .map(str::to_string),
                });
            }
            for _ in 0..distractors_per_user {
                let i = rng.random_range(1..=vocab.len());
                sink.push(RawRecord {
                    user: pair.user_id.clone(),
                    item: vocab.item_id(i).unwrap().to_string(),
                    rating: f64::from(rng.random_range(1u8..=3)),
                    timestamp: rng.random_range(1_400_000_000..1_500_000_000),
                    category: None,
                });
            }
        }
    }
    out
}
