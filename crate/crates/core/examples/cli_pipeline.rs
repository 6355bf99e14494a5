// Drives the command-line workflow in-process: synth, pretrain, finetune,
// evaluate and verify against one config file.

use clap::Parser;
use sitn::cli::{run, Cli};

const CONFIG: &str = r#"
seed = 1

[dataset]
kind = "synthetic"
num_users = 80
num_groups = 4
items_per_group_source = 8
items_per_group_target = 8

[model]
ctr_hidden = 8

[model.encoder]
dim = 8
max_len = 20

[model.interest]
cluster_counts = [4]

[train]
pretrain_epochs = 1
finetune_epochs = 1
batch_size = 16
"#;

pub fn run_example() -> sitn::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("sitn_cli_example_{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let config = dir.join("exp.toml");
    std::fs::write(&config, CONFIG)?;
    let out = dir.join("run");
    for cmd in ["synth", "pretrain", "finetune", "evaluate", "verify"] {
        let cli = Cli::parse_from([
            "sitn",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--override",
            "train.finetune_lr=0.002",
            cmd,
        ]);
        run(&cli)?;
    }
    for entry in std::fs::read_dir(&out)? {
        println!("{}", entry?.path().display());
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> sitn::Result<()> {
    let out = run_example()?;
    std::fs::remove_dir_all(out.parent().unwrap())?;
    Ok(())
}
