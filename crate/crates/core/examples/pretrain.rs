// Stage 1: contrastive pre-training of both encoders, then a checkpoint
// roundtrip.

use sitn::data::{generate_synthetic, pretraining_pairs, SyntheticConfig};
use sitn::ssl::AblationFlags;
use sitn::training::{load_checkpoint, pretrain, save_checkpoint, ModelConfig, SitnModel, TrainConfig, VocabShape};

pub fn run_example() -> sitn::Result<Vec<f64>> {
    let (ds, _) = generate_synthetic(&SyntheticConfig {
        num_users: 256,
        ..SyntheticConfig::default()
    })?;
    let mut mc = ModelConfig::default();
    mc.encoder.dim = 16;
    mc.encoder.max_len = 20;
    mc.interest.cluster_counts = vec![4, 8];
    let tc = TrainConfig {
        pretrain_epochs: 3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut model = SitnModel::for_pretraining(&mc, &VocabShape::of(&ds), &AblationFlags::default(), 1)?;
    let outcome = pretrain(&pretraining_pairs(&ds), &mut model, &tc, 1, "example")?;
    let losses = outcome.losses();
    println!("{} steps, loss {:.2} -> {:.2}", losses.len(), losses[0], losses[losses.len() - 1]);

    let path = std::env::temp_dir().join("sitn_example_pretrain.bin");
    save_checkpoint(&path, &outcome.checkpoint)?;
    let back = load_checkpoint(&path)?;
    println!("checkpoint roundtrip exact: {}", back.same_tensors(&outcome.checkpoint));
    std::fs::remove_file(&path)?;
    Ok(losses)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
