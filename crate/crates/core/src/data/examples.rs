//! Stage-2 labelled examples: the last target click is the positive
//! candidate, unclicked target items are negatives.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CdrExample, ClickSequence, Dataset, Domain, SequencePair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExampleSplit {
    pub train: Vec<CdrExample>,
    pub test: Vec<CdrExample>,
    /// Users skipped because no target history remains before the last click.
    pub excluded_users: usize,
}

/// Splits a target sequence into its last click and the history before it.
/// Earlier clicks of the same item are removed from the history so the
/// candidate never appears in it. `None` when no history remains.
pub fn split_last_click(items: &[usize]) -> Option<(usize, Vec<usize>)> {
    let (&last, rest) = items.split_last()?;
    let history: Vec<usize> = rest.iter().copied().filter(|&i| i != last).collect();
    (!history.is_empty()).then_some((last, history))
}

/// Sequence pairs whose target side is exactly the history stage 2
/// conditions on. Users left without target history are dropped.
pub fn pretraining_pairs(ds: &Dataset) -> Vec<SequencePair> {
    ds.pairs
        .iter()
        .filter_map(|p| {
            let (_, history) = split_last_click(p.target.items())?;
            Some(SequencePair {
                user_id: p.user_id.clone(),
                source: p.source.clone(),
                target: ClickSequence::new(p.user_id.clone(), Domain::Target, &history, ds.max_len),
            })
        })
        .collect()
}

/// Builds labelled examples and splits them by user, `holdout_fraction` of
/// users going to the test side.
pub fn build_stage2_examples(
    ds: &Dataset,
    negatives_per_positive: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<ExampleSplit> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::config("holdout_fraction must be in [0, 1)"));
    }
    let vocab_size = ds.target_vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_user: Vec<Vec<CdrExample>> = Vec::new();
    let mut excluded = 0;
    for pair in &ds.pairs {
        let items = pair.target.items();
        let Some((positive, history)) = split_last_click(items) else {
            excluded += 1;
            continue;
        };
        let history = ClickSequence::new(pair.user_id.clone(), Domain::Target, &history, ds.max_len);
        let clicked: HashSet<usize> = items.iter().copied().collect();
        let available = vocab_size - clicked.len();
        if available < negatives_per_positive {
            return Err(Error::config(format!(
                "user {} has only {available} unclicked target items, {negatives_per_positive} negatives requested",
                pair.user_id
            )));
        }
        let make = |candidate: usize, label: u8| CdrExample {
            user_id: pair.user_id.clone(),
            source_seq: pair.source.clone(),
            target_seq: history.clone(),
            candidate_item: candidate,
            label,
        };
        let mut examples = vec![make(positive, 1)];
        let mut chosen = HashSet::new();
        while chosen.len() < negatives_per_positive {
            let c = rng.random_range(1..=vocab_size);
            if !clicked.contains(&c) && chosen.insert(c) {
                examples.push(make(c, 0));
            }
        }
        per_user.push(examples);
    }
    if per_user.is_empty() {
        return Err(Error::EmptyDataset(
            "no user has target history before the last click".into(),
        ));
    }
    let mut order: Vec<usize> = (0..per_user.len()).collect();
    order.shuffle(&mut rng);
    let n_test = (holdout_fraction * per_user.len() as f64).round() as usize;
    let mut test_users: Vec<usize> = order[..n_test].to_vec();
    let mut train_users: Vec<usize> = order[n_test..].to_vec();
    test_users.sort_unstable();
    train_users.sort_unstable();
    let mut split = ExampleSplit {
        excluded_users: excluded,
        ..ExampleSplit::default()
    };
    for u in train_users {
        split.train.extend(per_user[u].iter().cloned());
    }
    for u in test_users {
        split.test.extend(per_user[u].iter().cloned());
    }
    Ok(split)
}
