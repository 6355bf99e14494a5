//! Dataset directory layout:
//!
//! ```text
//! <dir>/vocab_source.tsv   index <TAB> item_id <TAB> category_index <TAB> category
//! <dir>/vocab_target.tsv
//! <dir>/sequences.jsonl    {"user": .., "source": [idx..], "target": [idx..]}
//! <dir>/manifest.json
//! <dir>/planted.json       synthetic datasets only
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClickSequence, Dataset, Domain, IngestStats, PlantedAssignment, SequencePair, Vocabulary};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const PLANTED_FILE: &str = "planted.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub users: usize,
    pub source_items: usize,
    pub target_items: usize,
    pub source_clicks: usize,
    pub target_clicks: usize,
}

impl DatasetCounts {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            users: ds.pairs.len(),
            source_items: ds.source_vocab.len(),
            target_items: ds.target_vocab.len(),
            source_clicks: ds.pairs.iter().map(|p| p.source.len()).sum(),
            target_clicks: ds.pairs.iter().map(|p| p.target.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub max_len: usize,
    pub counts: DatasetCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestStats>,
    pub version: String,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    user: String,
    source: Vec<usize>,
    target: Vec<usize>,
}

fn vocab_path(dir: &Path, domain: Domain) -> std::path::PathBuf {
    dir.join(format!("vocab_{}.tsv", domain.as_str()))
}

fn write_vocab(path: &Path, v: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "index\titem_id\tcategory_index\tcategory")?;
    for idx in 1..=v.len() {
        let c = v.item_categories()[idx];
        let cat = v.category_name(c).unwrap_or("");
        writeln!(w, "{idx}\t{}\t{c}\t{cat}", v.item_id(idx).unwrap())?;
    }
    w.flush()?;
    Ok(())
}

fn read_vocab(path: &Path, domain: Domain) -> Result<Vocabulary> {
    let text = fs::read_to_string(path)?;
    let bad = |n: usize| Error::Parse(format!("{}: bad row {}", path.display(), n + 2));
    let mut items = Vec::new();
    let mut item_category = vec![0];
    let mut categories: Vec<Option<String>> = Vec::new();
    for (n, line) in text.lines().skip(1).enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(n + 1) {
            return Err(bad(n));
        }
        let c: usize = fields[2].parse().map_err(|_| bad(n))?;
        if c > 0 {
            if categories.len() < c {
                categories.resize(c, None);
            }
            categories[c - 1] = Some(fields[3].to_string());
        }
        items.push(fields[1].to_string());
        item_category.push(c);
    }
    let categories = categories
        .into_iter()
        .map(|c| c.ok_or_else(|| Error::Parse(format!("{}: category indices not dense", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    Vocabulary::from_parts(domain, items, item_category, categories)
}

pub fn write_dataset(dir: &Path, ds: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_vocab(&vocab_path(dir, Domain::Source), &ds.source_vocab)?;
    write_vocab(&vocab_path(dir, Domain::Target), &ds.target_vocab)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(SEQUENCES_FILE))?);
    for p in &ds.pairs {
        let line = SequenceLine {
            user: p.user_id.clone(),
            source: p.source.items().to_vec(),
            target: p.target.items().to_vec(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let source_vocab = read_vocab(&vocab_path(dir, Domain::Source), Domain::Source)?;
    let target_vocab = read_vocab(&vocab_path(dir, Domain::Target), Domain::Target)?;
    let reader = BufReader::new(fs::File::open(dir.join(SEQUENCES_FILE))?);
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SequenceLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{SEQUENCES_FILE}: {e}")))?;
        pairs.push(SequencePair {
            source: ClickSequence::new(s.user.clone(), Domain::Source, &s.source, manifest.max_len),
            target: ClickSequence::new(s.user.clone(), Domain::Target, &s.target, manifest.max_len),
            user_id: s.user,
        });
    }
    let ds = Dataset {
        source_vocab,
        target_vocab,
        pairs,
        max_len: manifest.max_len,
    };
    ds.validate()?;
    if ds.content_hash() != manifest.dataset_hash {
        return Err(Error::Parse(format!(
            "dataset hash mismatch in {}: manifest {}, content {}",
            dir.display(),
            manifest.dataset_hash,
            ds.content_hash()
        )));
    }
    Ok((ds, manifest))
}

pub fn write_planted(dir: &Path, planted: &PlantedAssignment) -> Result<()> {
    write_json(&dir.join(PLANTED_FILE), planted)
}

pub fn read_planted(dir: &Path) -> Result<PlantedAssignment> {
    read_json(&dir.join(PLANTED_FILE))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn dataset_directory_roundtrip() {
        let (ds, planted) = generate_synthetic(&SyntheticConfig {
            num_users: 30,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            kind: "synthetic".into(),
            config_hash: "abc".into(),
            dataset_hash: ds.content_hash(),
            seed: 7,
            max_len: ds.max_len,
            counts: DatasetCounts::of(&ds),
            ingest: None,
            version: "test".into(),
        };
        write_dataset(dir.path(), &ds, &manifest).unwrap();
        write_planted(dir.path(), &planted).unwrap();
        let (back, m) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m, manifest);
        assert_eq!(read_planted(dir.path()).unwrap(), planted);
    }
}
