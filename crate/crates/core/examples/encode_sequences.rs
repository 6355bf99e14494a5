// Encodes click sequences with the self-attention encoder and checks that
// padding does not change the pooled representation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sitn::data::{ClickSequence, Domain};
use sitn::encoder::{encode_sequence, EncoderConfig, EncoderParams};
use sitn::params::ParamStore;

pub fn run_example() -> sitn::Result<Vec<f64>> {
    let cfg = EncoderConfig {
        dim: 8,
        heads: 2,
        max_len: 10,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let num_items = 20;
    let params = EncoderParams::init(&mut store, "source", &cfg, num_items, 3, &mut rng)?;
    // category of every item index, padding included
    let categories: Vec<usize> = (0..=num_items).map(|i| if i == 0 { 0 } else { 1 + i % 3 }).collect();

    let clicks = [3, 7, 7, 12, 5];
    let seq = ClickSequence::new("u1", Domain::Source, &clicks, cfg.max_len);
    let pooled = encode_sequence(&store, &params, &cfg, &categories, &seq)?;
    println!("mask {:?}", seq.mask);
    println!("pooled {pooled:.3?}");

    let tight = ClickSequence::new("u1", Domain::Source, &clicks, 6);
    let same = encode_sequence(&store, &params, &cfg, &categories, &tight)?;
    println!("padding to 6 instead of 10 changes nothing: {}", same == pooled);
    Ok(pooled)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
