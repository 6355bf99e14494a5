// Runs the objective ablation over two seeds and prints the summary table.

use sitn::data::{generate_synthetic, SyntheticConfig};
use sitn::eval::{run_ablations, summarize, summary_table, ExampleConfig, VariantSummary};
use sitn::training::{ModelConfig, TrainConfig};

pub fn run_example() -> sitn::Result<Vec<VariantSummary>> {
    let (ds, _) = generate_synthetic(&SyntheticConfig {
        num_users: 120,
        num_groups: 4,
        items_per_group_source: 8,
        items_per_group_target: 8,
        ..SyntheticConfig::default()
    })?;
    let mut mc = ModelConfig::default();
    mc.encoder.dim = 8;
    mc.encoder.max_len = 20;
    mc.interest.cluster_counts = vec![4];
    mc.ctr_hidden = 8;
    let tc = TrainConfig {
        pretrain_epochs: 1,
        finetune_epochs: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let reports = run_ablations(&ds, &mc, &tc, &ExampleConfig::default(), &["table3"], &[0, 1], "example")?;
    let summary = summarize(&reports);
    print!("{}", summary_table(&summary));
    Ok(summary)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    run_example().map(|_| ())
}
