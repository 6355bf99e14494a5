// Turns review logs in the public Amazon layout into click sequences.
// Pass two JSON-lines files to ingest real data; without arguments a
// synthetic log is rendered and ingested.

use std::fs::File;
use std::io::BufReader;

use sitn::data::{
    generate_synthetic, ingest_amazon, parse_records, review_records, Dataset, IngestOptions, IngestStats,
    SyntheticConfig,
};

pub fn run_example() -> sitn::Result<(Dataset, IngestStats)> {
    let (ds, _) = generate_synthetic(&SyntheticConfig {
        num_users: 200,
        ..SyntheticConfig::default()
    })?;
    let (source, target) = review_records(&ds, 2, 1);
    let line = serde_json::to_string(&source[0]).map_err(|e| sitn::Error::Parse(e.to_string()))?;
    println!("first record {line}");
    let (ingested, stats) = ingest_amazon(
        source.into_iter().map(Ok),
        target.into_iter().map(Ok),
        &IngestOptions::default(),
    )?;
    println!("{stats:#?}");
    Ok((ingested, stats))
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [src, tgt] = args.as_slice() {
        let open = |p: &str| File::open(p).map(BufReader::new);
        let (ds, stats) = ingest_amazon(parse_records(open(src)?), parse_records(open(tgt)?), &IngestOptions::default())?;
        println!("{stats:#?}\n{} users kept", ds.pairs.len());
        return Ok(());
    }
    run_example().map(|_| ())
}
