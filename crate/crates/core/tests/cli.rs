use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[dataset]
kind = "synthetic"
num_users = 60
num_groups = 3
items_per_group_source = 6
items_per_group_target = 6
max_len = 8

[model]
ctr_hidden = 8

[model.encoder]
dim = 8
max_len = 8

[model.interest]
cluster_counts = [4, 3]

[train]
pretrain_epochs = 1
finetune_epochs = 1
batch_size = 16

[ablation]
variants = ["table3"]
seeds = [0, 1]
"#;

fn sitn(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sitn"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_pretrain_ablate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("run");
    for cmd in ["synth", "pretrain", "finetune", "evaluate", "ablate"] {
        ok(&sitn(&cfg, &out, &[cmd]));
    }
    ok(&sitn(&cfg, &out, &["project", "--projector", "pca"]));

    let table = fs::read_to_string(out.join("reports/ablation_summary.tsv")).unwrap();
    for name in ["w/o L_i2c & L_i2i", "w/o L_i2c", "w/o L_i2i", "SITN"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{name}\t"))), "{name} missing");
    }
    assert!(out.join("projections/space0_pca.csv").exists());
    assert!(out.join("projections/space1_pca.csv").exists());
    let verify = sitn(&cfg, &out, &["verify"]);
    ok(&verify);
    assert!(String::from_utf8_lossy(&verify.stdout).contains("6 manifests"));

    // reruns reproduce byte-identical manifests and checkpoints and leave the config alone
    let snapshot = |p: &str| fs::read(out.join(p)).unwrap();
    let files = ["data/manifest.json", "pretrain/manifest.json", "pretrain/checkpoint.bin", "finetune/manifest.json", "finetune/checkpoint.bin"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| snapshot(f)).collect();
    for cmd in ["synth", "pretrain", "finetune"] {
        ok(&sitn(&cfg, &out, &[cmd]));
    }
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&snapshot(f), b, "{f} changed");
    }
    assert_eq!(fs::read_to_string(&cfg).unwrap(), CONFIG);
}

#[test]
fn evaluate_rejects_checkpoint_from_another_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let a = dir.path().join("a");
    for cmd in ["synth", "pretrain", "finetune"] {
        ok(&sitn(&cfg, &a, &[cmd]));
    }
    let b = dir.path().join("b");
    ok(&sitn(&cfg, &b, &["--override", "dataset.items_per_group_target=9", "synth"]));
    let ckpt = a.join("finetune/checkpoint.bin");
    let o = sitn(
        &cfg,
        &b,
        &["--override", "dataset.items_per_group_target=9", "evaluate", "--checkpoint", ckpt.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape mismatch"));
}

#[test]
fn verify_flags_foreign_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("run");
    ok(&sitn(&cfg, &out, &["synth"]));
    ok(&sitn(&cfg, &out, &["verify"]));
    let o = sitn(&cfg, &out, &["--seed", "4", "verify"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("run");
    let o = sitn(&cfg, &out, &["--override", "train.learning_rate=0.1", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert_eq!(sitn(&cfg, &out, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(sitn(&cfg, &out, &["ablate", "--variant", "w/o everything"]).status.code(), Some(1));
    // pretrain before any dataset exists
    assert_eq!(sitn(&cfg, &out, &["pretrain"]).status.code(), Some(1));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sitn"))
        .arg("--config")
        .arg(&cfg)
        .arg("synth")
        .env("SITN_OUT_ROOT", dir.path().join("root"))
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    ok(&o);
    let printed = String::from_utf8_lossy(&o.stdout).trim().to_string();
    assert!(printed.starts_with(dir.path().join("root").to_str().unwrap()));
    assert!(Path::new(&printed).join("manifest.json").exists());
}
