// Both stages for one variant: pre-train, fine-tune the CTR head on
// last-click prediction and report test AUC and logloss.

use sitn::data::{generate_synthetic, SyntheticConfig};
use sitn::eval::{run_variant, ExampleConfig, MetricsReport, Variant};
use sitn::training::{ModelConfig, TrainConfig};

pub fn run_example() -> sitn::Result<MetricsReport> {
    let (ds, _) = generate_synthetic(&SyntheticConfig {
        num_users: 200,
        num_groups: 4,
        items_per_group_source: 10,
        items_per_group_target: 10,
        ..SyntheticConfig::default()
    })?;
    let mut mc = ModelConfig::default();
    mc.encoder.dim = 16;
    mc.encoder.max_len = 20;
    mc.interest.cluster_counts = vec![4];
    mc.ctr_hidden = 16;
    let tc = TrainConfig {
        pretrain_epochs: 2,
        finetune_epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let split = ExampleConfig::default().build(&ds, 0)?;
    println!("{} train and {} test examples", split.train.len(), split.test.len());
    let run = run_variant(&ds, &split, &mc, &tc, Variant::Sitn, 0, "example")?;
    let r = run.report;
    println!("{}: auc {:.4} logloss {:.4} on {} examples", r.variant, r.auc, r.logloss, r.n_test);
    Ok(r)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
