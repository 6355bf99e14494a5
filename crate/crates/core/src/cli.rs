//! Command-line front end. Every command reads the experiment config, works
//! inside one output directory and leaves a manifest carrying the config hash.
//!
//! ```text
//! <out>/config.toml
//! <out>/data/                      dataset directory
//! <out>/pretrain/checkpoint.bin    loss.jsonl  manifest.json
//! <out>/finetune/checkpoint.bin    loss.jsonl  metrics.json  manifest.json
//! <out>/reports/                   evaluate.*  ablation.*  manifest files
//! <out>/projections/               space<i>_<projector>.csv  manifest.json
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::io::{read_dataset, read_json, read_planted, write_dataset, write_json, write_planted, DatasetCounts, DatasetManifest};
use crate::data::{generate_synthetic, ingest_amazon, parse_records, pretraining_pairs, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, export_projection, finetune_and_evaluate, reports_table, run_ablations, space_correspondence,
    summarize, summary_table, ClusterView, MetricsReport, Projector, Variant,
};
use crate::training::{
    load_checkpoint, pretrain, save_checkpoint, SitnModel, StepLog, VocabShape,
};

pub const OUT_ROOT_ENV: &str = "SITN_OUT_ROOT";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "sitn", version, about = "Self-supervised interest transfer for cross-domain CTR")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to $SITN_OUT_ROOT/<config hash>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key.path=value`, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest Amazon-style review files into a dataset directory.
    Ingest,
    /// Generate a synthetic dataset with planted interest groups.
    Synth,
    /// Stage 1: contrastive pretraining.
    Pretrain,
    /// Stage 2: CTR fine-tuning from the stage-1 checkpoint.
    Finetune,
    /// Score a fine-tuned checkpoint on the held-out users.
    Evaluate {
        /// Checkpoint to evaluate instead of <out>/finetune/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score ablation variants over the configured seeds.
    Ablate {
        /// Variant slug or name, `table3`, `table4` or `all`; repeatable.
        #[arg(long = "variant", value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Export 2-D projections of the stage-1 interest clusters.
    Project {
        #[arg(long, default_value = "pca")]
        projector: String,
    },
    /// Check that every manifest under the output directory shares one config hash.
    Verify,
}

/// Written next to every command's outputs; contains no timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
}

/// Resolved config and output directory for one invocation.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Context {
    pub fn new(common: &CommonArgs) -> Result<Self> {
        let text = match &common.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut config = ExperimentConfig::load(&text, &common.overrides)?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        config.validate()?;
        let hash = config.hash();
        let out = common
            .out
            .clone()
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| {
                let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(&hash)
            });
        Ok(Self { config, out, hash })
    }

    pub fn from_config(config: ExperimentConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hash: config.hash(),
            config,
            out: out.to_path_buf(),
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn manifest(&self, command: &str, dataset_hash: Option<String>, outputs: &[&str]) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            version: VERSION.to_string(),
            dataset_hash,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            values: BTreeMap::new(),
        }
    }

    fn snapshot_config(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let mut c = self.config.clone();
        c.out = None;
        fs::write(self.out.join("config.toml"), c.to_toml())?;
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        if !dir.join(crate::data::io::MANIFEST_FILE).exists() {
            return Err(Error::config(format!(
                "no dataset at {}; run `sitn synth` or `sitn ingest` first",
                dir.display()
            )));
        }
        Ok(read_dataset(&dir)?.0)
    }
}

fn write_log(path: &Path, history: &[StepLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in history {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn dataset_manifest(ctx: &Context, ds: &Dataset, kind: &str) -> DatasetManifest {
    DatasetManifest {
        kind: kind.to_string(),
        config_hash: ctx.hash.clone(),
        dataset_hash: ds.content_hash(),
        seed: ctx.config.seed,
        max_len: ds.max_len,
        counts: DatasetCounts::of(ds),
        ingest: None,
        version: VERSION.to_string(),
    }
}

pub fn cmd_ingest(ctx: &Context) -> Result<PathBuf> {
    let DatasetSpec::Amazon(spec) = &ctx.config.dataset else {
        return Err(Error::config("ingest needs dataset.kind = \"amazon\" with source and target paths"));
    };
    let open = |p: &Path| -> Result<BufReader<File>> {
        File::open(p)
            .map(BufReader::new)
            .map_err(|e| Error::config(format!("cannot open {}: {e}", p.display())))
    };
    let (ds, stats) = ingest_amazon(
        parse_records(open(&spec.source)?),
        parse_records(open(&spec.target)?),
        &spec.options(),
    )?;
    ctx.snapshot_config()?;
    let mut manifest = dataset_manifest(ctx, &ds, "amazon");
    manifest.ingest = Some(stats);
    write_dataset(&ctx.data_dir(), &ds, &manifest)?;
    Ok(ctx.data_dir())
}

pub fn cmd_synth(ctx: &Context) -> Result<PathBuf> {
    let DatasetSpec::Synthetic(spec) = &ctx.config.dataset else {
        return Err(Error::config("synth needs dataset.kind = \"synthetic\""));
    };
    let (ds, planted) = generate_synthetic(spec)?;
    ctx.snapshot_config()?;
    write_dataset(&ctx.data_dir(), &ds, &dataset_manifest(ctx, &ds, "synthetic"))?;
    write_planted(&ctx.data_dir(), &planted)?;
    Ok(ctx.data_dir())
}

pub fn cmd_pretrain(ctx: &Context) -> Result<PathBuf> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.config;
    let mut model = SitnModel::for_pretraining(&cfg.model, &VocabShape::of(&ds), &cfg.train.flags, cfg.seed)?;
    let outcome = pretrain(&pretraining_pairs(&ds), &mut model, &cfg.train, cfg.seed, &ctx.hash)?;
    let dir = ctx.out.join("pretrain");
    fs::create_dir_all(&dir)?;
    ctx.snapshot_config()?;
    save_checkpoint(&dir.join("checkpoint.bin"), &outcome.checkpoint)?;
    write_log(&dir.join("loss.jsonl"), &outcome.history)?;
    let mut m = ctx.manifest("pretrain", Some(ds.content_hash()), &["checkpoint.bin", "loss.jsonl"]);
    m.values.insert("steps".into(), outcome.history.len() as f64);
    m.values.insert("skipped_steps".into(), outcome.skipped_steps as f64);
    if let Some(l) = outcome.history.last() {
        m.values.insert("final_loss".into(), l.loss);
    }
    write_json(&dir.join("manifest.json"), &m)?;
    if let Some(reason) = outcome.aborted {
        return Err(Error::NonFinite(format!("{reason}; last good checkpoint saved")));
    }
    Ok(dir)
}

pub fn cmd_finetune(ctx: &Context) -> Result<PathBuf> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.config;
    let pre_path = ctx.out.join("pretrain").join("checkpoint.bin");
    if !pre_path.exists() {
        return Err(Error::config(format!("missing {}; run `sitn pretrain` first", pre_path.display())));
    }
    let pre = load_checkpoint(&pre_path)?;
    pre.check_config_hash(&ctx.hash);
    let split = cfg.examples.build(&ds, cfg.seed)?;
    let (_, outcome, report) = finetune_and_evaluate(
        &ds,
        &split,
        &pre,
        &cfg.model,
        &cfg.train,
        ("finetune", "finetune"),
        cfg.seed,
        &ctx.hash,
    )?;
    let dir = ctx.out.join("finetune");
    fs::create_dir_all(&dir)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &outcome.checkpoint)?;
    write_log(&dir.join("loss.jsonl"), &outcome.history)?;
    write_json(&dir.join("metrics.json"), &report)?;
    let mut m = ctx.manifest("finetune", Some(ds.content_hash()), &["checkpoint.bin", "loss.jsonl", "metrics.json"]);
    m.values.insert("auc".into(), report.auc);
    m.values.insert("logloss".into(), report.logloss);
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(dir)
}

pub fn cmd_evaluate(ctx: &Context, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.config;
    let path = checkpoint.map_or_else(|| ctx.out.join("finetune").join("checkpoint.bin"), Path::to_path_buf);
    let ckpt = load_checkpoint(&path)?;
    ckpt.check_config_hash(&ctx.hash);
    let mut model = SitnModel::for_finetuning(&cfg.model, &VocabShape::of(&ds), cfg.seed)?;
    model.load_params(&ckpt)?;
    let split = cfg.examples.build(&ds, cfg.seed)?;
    let report = evaluate_model(&model, &ds, &split, ("evaluate", "evaluate"), cfg.seed, &ctx.hash, 256)?;
    let dir = ctx.out.join("reports");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("evaluate.json"), &report)?;
    fs::write(dir.join("evaluate.tsv"), reports_table(std::slice::from_ref(&report)))?;
    let mut m = ctx.manifest("evaluate", Some(ds.content_hash()), &["evaluate.json", "evaluate.tsv"]);
    m.values.insert("auc".into(), report.auc);
    m.values.insert("logloss".into(), report.logloss);
    write_json(&dir.join("evaluate_manifest.json"), &m)?;
    Ok(report)
}

pub fn cmd_ablate(ctx: &Context, variants: &[String]) -> Result<Vec<MetricsReport>> {
    let cfg = &ctx.config;
    let names = if variants.is_empty() { cfg.ablation.variants.clone() } else { variants.to_vec() };
    let parsed = Variant::parse_list(&names)?;
    let ds = ctx.dataset()?;
    let slugs: Vec<&str> = parsed.iter().map(|v| v.slug()).collect();
    let reports = run_ablations(&ds, &cfg.model, &cfg.train, &cfg.examples, &slugs, &cfg.seeds(), &ctx.hash)?;
    let dir = ctx.out.join("reports");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("ablation.json"), &reports)?;
    fs::write(dir.join("ablation.tsv"), reports_table(&reports))?;
    let summary = summarize(&reports);
    fs::write(dir.join("ablation_summary.tsv"), summary_table(&summary))?;
    let mut m = ctx.manifest(
        "ablate",
        Some(ds.content_hash()),
        &["ablation.json", "ablation.tsv", "ablation_summary.tsv"],
    );
    for s in &summary {
        m.values.insert(format!("{}.auc_mean", s.slug), s.auc_mean);
    }
    write_json(&dir.join("ablation_manifest.json"), &m)?;
    Ok(reports)
}

pub fn cmd_project(ctx: &Context, projector: Projector) -> Result<PathBuf> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.config;
    let ckpt = load_checkpoint(&ctx.out.join("pretrain").join("checkpoint.bin"))?;
    ckpt.check_config_hash(&ctx.hash);
    let mut model = SitnModel::for_pretraining(&cfg.model, &VocabShape::of(&ds), &cfg.train.flags, cfg.seed)?;
    model.load_params(&ckpt)?;
    let dir = ctx.out.join("projections");
    fs::create_dir_all(&dir)?;
    let spaces = model.spaces.clone().unwrap_or_default();
    let mut outputs = Vec::new();
    for (i, sp) in spaces.spaces.iter().enumerate() {
        let export = export_projection(i, model.store.get(sp.c_source), model.store.get(sp.c_target), projector)?;
        let name = format!("space{i}_{}.csv", export.projector.as_str());
        fs::write(dir.join(&name), export.to_csv())?;
        outputs.push(name);
    }
    let mut m = ctx.manifest("project", Some(ds.content_hash()), &[]);
    m.outputs = outputs;
    if let Ok(planted) = read_planted(&ctx.data_dir()) {
        let index: HashMap<&str, usize> = ds.pairs.iter().enumerate().map(|(i, p)| (p.user_id.as_str(), i)).collect();
        let lookup = |u: &str| index.get(u).copied();
        let pairs = pretraining_pairs(&ds);
        for i in 0..spaces.len() {
            let c = space_correspondence(&model, &pairs, &planted, &lookup, i, ClusterView::Prototypes)?;
            m.values.insert(format!("space{i}.correspondence"), c);
        }
    }
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(dir)
}

/// Every `manifest.json` / `*_manifest.json` under `out` must carry `hash`.
pub fn cmd_verify(ctx: &Context) -> Result<usize> {
    let mut checked = 0;
    let mut bad = Vec::new();
    let mut stack = vec![ctx.out.clone()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name != "manifest.json" && !name.ends_with("_manifest.json") {
                continue;
            }
            let v: serde_json::Value = read_json(&p)?;
            let h = v.get("config_hash").and_then(|h| h.as_str()).unwrap_or("");
            checked += 1;
            if h != ctx.hash {
                bad.push(format!("{} ({h})", p.display()));
            }
        }
    }
    if checked == 0 {
        return Err(Error::config(format!("no manifests under {}", ctx.out.display())));
    }
    if !bad.is_empty() {
        return Err(Error::HashMismatch {
            expected: ctx.hash.clone(),
            files: bad,
        });
    }
    Ok(checked)
}

/// Exit status for a failed command: 1 for usage and configuration
/// problems, 2 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownVariant(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::new(&cli.common)?;
    match &cli.command {
        Command::Ingest => println!("{}", cmd_ingest(&ctx)?.display()),
        Command::Synth => println!("{}", cmd_synth(&ctx)?.display()),
        Command::Pretrain => println!("{}", cmd_pretrain(&ctx)?.display()),
        Command::Finetune => println!("{}", cmd_finetune(&ctx)?.display()),
        Command::Evaluate { checkpoint } => {
            let r = cmd_evaluate(&ctx, checkpoint.as_deref())?;
            println!("auc {:.6} logloss {:.6} n {}", r.auc, r.logloss, r.n_test);
        }
        Command::Ablate { variants } => {
            let reports = cmd_ablate(&ctx, variants)?;
            print!("{}", summary_table(&summarize(&reports)));
        }
        Command::Project { projector } => println!("{}", cmd_project(&ctx, projector.parse()?)?.display()),
        Command::Verify => println!("{} manifests share config hash {}", cmd_verify(&ctx)?, ctx.hash),
    }
    Ok(())
}
