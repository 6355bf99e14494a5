// Generates a planted dual-domain dataset and shows how strongly clicks
// follow the planted interest groups.

use sitn::data::{generate_synthetic, Domain, SyntheticConfig};

pub fn run_example() -> sitn::Result<f64> {
    let cfg = SyntheticConfig {
        num_users: 300,
        num_groups: 4,
        items_per_group_source: 10,
        items_per_group_target: 10,
        ..SyntheticConfig::default()
    };
    let (ds, planted) = generate_synthetic(&cfg)?;
    println!(
        "{} users, {} source items, {} target items",
        ds.pairs.len(),
        ds.source_vocab.len(),
        ds.target_vocab.len()
    );
    let user = &ds.pairs[0];
    println!("user {} interests {:?}", user.user_id, planted.user_groups[0]);
    let groups: Vec<Option<usize>> = user
        .source
        .items()
        .iter()
        .map(|&i| planted.item_group(Domain::Source, i))
        .collect();
    println!("source clicks by group {groups:?}");
    let fraction = planted.in_group_fraction(&ds);
    println!("in-group click fraction {fraction:.3} (noise {})", cfg.noise);
    Ok(fraction)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
