//! Review-log ingestion: ratings become clicks, sequences are ordered,
//! filtered and truncated.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{ClickSequence, Dataset, Domain, Interaction, SequencePair, Vocabulary};
use crate::error::{Error, Result};

/// One line of a review file. Field aliases accept the public Amazon review
/// dump layout (`reviewerID`, `asin`, `overall`, `unixReviewTime`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(alias = "reviewerID")]
    pub user: String,
    #[serde(alias = "asin")]
    pub item: String,
    #[serde(alias = "overall")]
    pub rating: f64,
    #[serde(alias = "unixReviewTime")]
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl RawRecord {
    fn into_interaction(self, domain: Domain) -> Result<Interaction> {
        if self.rating.fract() != 0.0 || !(1.0..=5.0).contains(&self.rating) {
            return Err(Error::Parse(format!("rating {} is not an integer in [1, 5]", self.rating)));
        }
        let it = Interaction {
            user_id: self.user,
            item_id: self.item,
            domain,
            timestamp: self.timestamp,
            rating: Some(self.rating as u8),
            category: self.category.filter(|c| !c.is_empty()),
        };
        it.validate()?;
        Ok(it)
    }
}

/// Parses newline-delimited JSON records. Blank lines are ignored; bad lines
/// are yielded as errors so the caller can count them.
pub fn parse_records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<RawRecord>> {
    reader.lines().filter_map(|line| match line {
        Err(e) => Some(Err(Error::Io(e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(|e| Error::Parse(e.to_string()))),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub min_rating: u8,
    pub min_source_len: usize,
    pub max_len: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_rating: 4,
            min_source_len: 5,
            max_len: 100,
        }
    }
}

/// Counters for every filtering rule.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub source_records: usize,
    pub target_records: usize,
    pub malformed: usize,
    pub below_min_rating: usize,
    pub source_clicks: usize,
    pub target_clicks: usize,
    pub shared_users: usize,
    pub dropped_short_source: usize,
    pub truncated_source: usize,
    pub truncated_target: usize,
    pub retained_users: usize,
}

type Clicks = BTreeMap<String, Vec<(i64, String)>>;

#[derive(Default)]
struct DomainLog {
    clicks: Clicks,
    // smallest category seen per item, so record order never matters
    categories: BTreeMap<String, String>,
}

fn collect(
    records: impl IntoIterator<Item = Result<RawRecord>>,
    domain: Domain,
    opts: &IngestOptions,
    stats: &mut IngestStats,
) -> DomainLog {
    let mut log = DomainLog::default();
    for rec in records {
        match domain {
            Domain::Source => stats.source_records += 1,
            Domain::Target => stats.target_records += 1,
        }
        let it = match rec.and_then(|r| r.into_interaction(domain)) {
            Ok(it) => it,
            Err(e) => {
                stats.malformed += 1;
                log::warn!("skipping malformed {} record: {e}", domain.as_str());
                continue;
            }
        };
        if it.rating.is_some_and(|r| r < opts.min_rating) {
            stats.below_min_rating += 1;
            continue;
        }
        if let Some(cat) = it.category {
            log.categories
                .entry(it.item_id.clone())
                .and_modify(|c| {
                    if cat < *c {
                        c.clone_from(&cat)
                    }
                })
                .or_insert(cat);
        }
        log.clicks
            .entry(it.user_id)
            .or_default()
            .push((it.timestamp, it.item_id));
        match domain {
            Domain::Source => stats.source_clicks += 1,
            Domain::Target => stats.target_clicks += 1,
        }
    }
    log
}

/// Builds a dual-domain dataset from review streams.
///
/// Keeps ratings `>= min_rating` as clicks, retains users present in both
/// domains whose source sequence has at least `min_source_len` clicks, orders
/// clicks by `(timestamp, item_id)` and keeps the `max_len` most recent.
/// The result does not depend on record order.
pub fn ingest_amazon(
    source: impl IntoIterator<Item = Result<RawRecord>>,
    target: impl IntoIterator<Item = Result<RawRecord>>,
    opts: &IngestOptions,
) -> Result<(Dataset, IngestStats)> {
    if !(1..=5).contains(&opts.min_rating) {
        return Err(Error::config("min_rating must be in [1, 5]"));
    }
    if opts.max_len == 0 {
        return Err(Error::config("max_len must be positive"));
    }
    let mut stats = IngestStats::default();
    let mut src = collect(source, Domain::Source, opts, &mut stats);
    let mut tgt = collect(target, Domain::Target, opts, &mut stats);

    let shared: Vec<String> = src
        .clicks
        .keys()
        .filter(|u| tgt.clicks.contains_key(*u))
        .cloned()
        .collect();
    stats.shared_users = shared.len();

    let mut kept: Vec<(String, Vec<String>, Vec<String>)> = Vec::new();
    for user in shared {
        let mut s = src.clicks.remove(&user).unwrap_or_default();
        let mut t = tgt.clicks.remove(&user).unwrap_or_default();
        if s.len() < opts.min_source_len {
            stats.dropped_short_source += 1;
            continue;
        }
        s.sort();
        t.sort();
        if s.len() > opts.max_len {
            stats.truncated_source += 1;
            s.drain(..s.len() - opts.max_len);
        }
        if t.len() > opts.max_len {
            stats.truncated_target += 1;
            t.drain(..t.len() - opts.max_len);
        }
        kept.push((
            user,
            s.into_iter().map(|(_, i)| i).collect(),
            t.into_iter().map(|(_, i)| i).collect(),
        ));
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset(
            "no users survive the ingestion filters".into(),
        ));
    }
    stats.retained_users = kept.len();

    let build_vocab = |domain: Domain, items: BTreeSet<&String>, cats: &BTreeMap<String, String>| {
        let mut v = Vocabulary::new(domain);
        // categories are registered in sorted order first so their indices are canonical
        let used: BTreeSet<&String> = items.iter().filter_map(|i| cats.get(*i)).collect();
        for c in used {
            v.category(c);
        }
        for item in items {
            v.insert(item, cats.get(item).map(String::as_str));
        }
        v
    };
    let source_vocab = build_vocab(
        Domain::Source,
        kept.iter().flat_map(|(_, s, _)| s.iter()).collect(),
        &src.categories,
    );
    let target_vocab = build_vocab(
        Domain::Target,
        kept.iter().flat_map(|(_, _, t)| t.iter()).collect(),
        &tgt.categories,
    );

    let pairs = kept
        .into_iter()
        .map(|(user, s, t)| {
            let si: Vec<usize> = s.iter().map(|i| source_vocab.index_of(i).unwrap()).collect();
            let ti: Vec<usize> = t.iter().map(|i| target_vocab.index_of(i).unwrap()).collect();
            SequencePair {
                source: ClickSequence::new(user.clone(), Domain::Source, &si, opts.max_len),
                target: ClickSequence::new(user.clone(), Domain::Target, &ti, opts.max_len),
                user_id: user,
            }
        })
        .collect();
    let ds = Dataset {
        source_vocab,
        target_vocab,
        pairs,
        max_len: opts.max_len,
    };
    ds.validate()?;
    Ok((ds, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, item: &str, rating: f64, ts: i64) -> Result<RawRecord> {
        Ok(RawRecord {
            user: user.into(),
            item: item.into(),
            rating,
            timestamp: ts,
            category: Some(format!("cat-{}", &item[..1])),
        })
    }

    fn opts() -> IngestOptions {
        IngestOptions {
            min_rating: 4,
            min_source_len: 5,
            max_len: 100,
        }
    }

    fn books(user: &str, n: usize) -> Vec<Result<RawRecord>> {
        (0..n).map(|i| rec(user, &format!("b{i:03}"), 5.0, i as i64)).collect()
    }

    #[test]
    fn rating_four_is_a_click_three_is_not() {
        let mut src = books("u1", 5);
        src.push(rec("u1", "bx", 3.0, 99));
        let tgt = vec![rec("u1", "m1", 4.0, 1), rec("u1", "m2", 3.0, 2)];
        let (ds, stats) = ingest_amazon(src, tgt, &opts()).unwrap();
        assert_eq!(stats.below_min_rating, 2);
        assert_eq!(ds.pairs[0].target.len(), 1);
        assert_eq!(ds.target_vocab.item_id(ds.pairs[0].target.items()[0]), Some("m1"));
        assert_eq!(ds.pairs[0].source.len(), 5);
    }

    #[test]
    fn short_source_user_is_dropped() {
        let mut src = books("u1", 4);
        src.extend(books("u2", 5));
        let tgt = vec![rec("u1", "m1", 5.0, 1), rec("u2", "m1", 5.0, 1)];
        let (ds, stats) = ingest_amazon(src, tgt, &opts()).unwrap();
        assert_eq!(stats.dropped_short_source, 1);
        assert_eq!(ds.pairs.len(), 1);
        assert_eq!(ds.pairs[0].user_id, "u2");
    }

    #[test]
    fn long_sequence_keeps_most_recent() {
        let src = books("u1", 150);
        let tgt = vec![rec("u1", "m1", 5.0, 1)];
        let (ds, stats) = ingest_amazon(src, tgt, &opts()).unwrap();
        assert_eq!(stats.truncated_source, 1);
        let s = &ds.pairs[0].source;
        assert_eq!(s.len(), 100);
        assert_eq!(ds.source_vocab.item_id(s.items()[0]), Some("b050"));
        assert_eq!(ds.source_vocab.item_id(s.items()[99]), Some("b149"));
    }

    #[test]
    fn only_shared_users_and_empty_error() {
        let src = books("u1", 6);
        let tgt = vec![rec("u2", "m1", 5.0, 1)];
        assert!(matches!(
            ingest_amazon(src, tgt, &opts()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn malformed_records_are_counted() {
        let mut src = books("u1", 5);
        src.push(Err(Error::Parse("bad json".into())));
        src.push(rec("u1", "b9", 4.5, 3));
        src.push(rec("u1", "b8", 5.0, -3));
        let tgt = vec![rec("u1", "m1", 5.0, 1)];
        let (_, stats) = ingest_amazon(src, tgt, &opts()).unwrap();
        assert_eq!(stats.malformed, 3);
    }

    #[test]
    fn timestamp_ties_break_on_item_id() {
        let mut src = books("u1", 5);
        src.push(rec("u1", "bz", 5.0, 10));
        src.push(rec("u1", "ba", 5.0, 10));
        let tgt = vec![rec("u1", "m1", 5.0, 1)];
        let (ds, _) = ingest_amazon(src, tgt, &opts()).unwrap();
        let items: Vec<&str> = ds.pairs[0]
            .source
            .items()
            .iter()
            .map(|&i| ds.source_vocab.item_id(i).unwrap())
            .collect();
        assert_eq!(&items[5..], &["ba", "bz"]);
    }

    #[test]
    fn parses_amazon_field_names() {
        let text = "{\"reviewerID\":\"A1\",\"asin\":\"B00\",\"overall\":5.0,\"unixReviewTime\":1400000000}\n\nnot json\n";
        let recs: Vec<_> = parse_records(text.as_bytes()).collect();
        assert_eq!(recs.len(), 2);
        let r = recs[0].as_ref().unwrap();
        assert_eq!((r.user.as_str(), r.item.as_str(), r.rating), ("A1", "B00", 5.0));
        assert!(recs[1].is_err());
    }
}
