// Evaluates the instance-to-instance and instance-to-cluster contrastive
// losses on one batch of paired source and target histories.

use sitn::autodiff::Graph;
use sitn::data::{generate_synthetic, pretraining_pairs, PairBatch, SyntheticConfig};
use sitn::ssl::{soft_assignments, ssl_loss, AblationFlags, ContrastConfig};
use sitn::training::{ModelConfig, SitnModel, VocabShape};
use sitn::data::Domain;

pub fn run_example() -> sitn::Result<f64> {
    let (ds, _) = generate_synthetic(&SyntheticConfig {
        num_users: 64,
        ..SyntheticConfig::default()
    })?;
    let mut mc = ModelConfig::default();
    mc.encoder.dim = 16;
    mc.interest.cluster_counts = vec![4, 8];
    let flags = AblationFlags::default();
    let model = SitnModel::for_pretraining(&mc, &VocabShape::of(&ds), &flags, 0)?;
    let spaces = model.spaces.as_ref().expect("pretraining model has interest spaces");

    let pairs = pretraining_pairs(&ds);
    let refs: Vec<_> = pairs.iter().take(16).collect();
    let mut g = Graph::new();
    let (ps, pt) = model.encode_pairs(&mut g, &PairBatch::new(&refs))?;
    let terms = ssl_loss(&mut g, &model.store, ps, pt, spaces, &ContrastConfig::default(), &flags)?;
    let value = |v: Option<_>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
    println!("L_i2i {:.4}", value(terms.i2i));
    println!("L_i2c {:.4}", value(terms.i2c));
    let total = g.scalar(terms.total);
    println!("total {total:.4}");

    let pi = soft_assignments(&model.store, &spaces.spaces[0], Domain::Source, g.value(ps));
    println!("soft assignment of the first user {:.3?}", pi.row(0));
    Ok(total)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
