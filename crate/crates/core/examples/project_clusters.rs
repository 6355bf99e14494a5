// Pre-trains on planted data, projects the learned source and target
// clusters to 2-D and measures how well they line up with the planted
// groups.

use std::collections::HashMap;

use sitn::data::{generate_synthetic, pretraining_pairs, SyntheticConfig};
use sitn::eval::{export_projection, pretrain_variant, space_correspondence, ClusterView, Projector, Variant};
use sitn::training::{ModelConfig, TrainConfig, VocabShape};

pub fn run_example() -> sitn::Result<f64> {
    let (ds, planted) = generate_synthetic(&SyntheticConfig {
        num_users: 200,
        num_groups: 4,
        items_per_group_source: 10,
        items_per_group_target: 10,
        ..SyntheticConfig::default()
    })?;
    let mut mc = ModelConfig::default();
    mc.encoder.dim = 8;
    mc.encoder.max_len = 20;
    mc.interest.cluster_counts = vec![4];
    let tc = TrainConfig {
        pretrain_epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let pairs = pretraining_pairs(&ds);
    let (model, _) = pretrain_variant(&pairs, &VocabShape::of(&ds), &mc, &tc, Variant::Sitn, 0, "example")?;
    let sp = &model.spaces.as_ref().expect("stage-1 model").spaces[0];
    let proj = export_projection(0, model.store.get(sp.c_source), model.store.get(sp.c_target), Projector::Pca)?;
    print!("{}", proj.to_csv());

    let index: HashMap<&str, usize> = ds.pairs.iter().enumerate().map(|(i, p)| (p.user_id.as_str(), i)).collect();
    let lookup = |u: &str| index.get(u).copied();
    let corr = space_correspondence(&model, &pairs, &planted, &lookup, 0, ClusterView::Prototypes)?;
    println!("correspondence {corr:.3}");
    Ok(corr)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
