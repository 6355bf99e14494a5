//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL|NOT RUN`
//! line and then asserts it.
//!
//! `cargo test --test acceptance -- --nocapture --test-threads=1`

mod common;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitn::autodiff::Graph;
use sitn::cli::{cmd_ingest, Context};
use sitn::config::{AmazonSpec, DatasetSpec, ExperimentConfig};
use sitn::data::io::read_dataset;
use sitn::data::*;
use sitn::eval::*;
use sitn::params::ParamStore;
use sitn::ssl::{i2c_space_loss, i2i_loss, ContrastConfig, InterestSpace};
use sitn::tensor::Matrix;
use sitn::training::*;

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_CASES: u64 = 150;
const GRAD_TOL: f64 = 1e-4;
const GRAD_PROBES: usize = 20;
const CLOSED_FORM_TOL: f64 = 1e-6;
const ABLATION_MARGIN: f64 = 0.01;
const CORRESPONDENCE_MIN: f64 = 0.75;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(n: u32, pass: bool, what: &str, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {status} {what}: {detail}");
}

#[test]
fn criterion_1_formula_oracle() {
    let start = Instant::now();
    let worst = oracle_sweep(ORACLE_CASES);
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = max <= ORACLE_TOL && secs < 60.0;
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(1, pass, "formula-oracle equivalence", &format!("{ORACLE_CASES} cases, {} ({secs:.1}s)", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let checks = gradient_sweep(GRAD_PROBES);
    let secs = start.elapsed().as_secs_f64();
    let expected = [
        "ssl/embeddings",
        "ssl/attention",
        "ssl/clusters",
        "ssl/fusion",
        "stage2/embeddings",
        "stage2/attention",
        "stage2/ctr_head",
    ];
    let names: Vec<String> = checks.iter().map(|(o, c)| format!("{o}/{}", c.group)).collect();
    let covered = expected.iter().all(|e| names.iter().any(|n| n == e));
    let pass = covered
        && secs < 300.0
        && checks.iter().all(|(_, c)| c.probes >= GRAD_PROBES && c.worst <= GRAD_TOL);
    let detail: Vec<String> = checks
        .iter()
        .map(|(o, c)| format!("{o}/{} {:.1e}", c.group, c.worst))
        .collect();
    report(2, pass, "finite-difference gradients", &format!("{} ({secs:.1}s)", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_3_closed_forms() {
    let cfg = ContrastConfig::default();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=8 {
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = Matrix::from_rows(&vec![row; n]);
        let mut g = Graph::new();
        let a = g.constant(p.clone());
        let b = g.constant(p);
        let l = i2i_loss(&mut g, a, b, &cfg).unwrap();
        worst = worst.max((g.scalar(l) - 2.0 * n as f64 * (n as f64).ln()).abs());
    }
    let single = {
        let mut g = Graph::new();
        let a = g.constant(Matrix::row_vector(&[0.7, -0.2]));
        let b = g.constant(Matrix::row_vector(&[-1.5, 0.4]));
        let l = i2i_loss(&mut g, a, b, &cfg).unwrap();
        g.scalar(l).abs()
    };
    let mut store = ParamStore::new();
    let sp = InterestSpace::init(&mut store, "s", 1, 1, 3, false, &mut rng).unwrap();
    let mut g = Graph::new();
    let ps = g.constant(Matrix::row_vector(&[0.3, -1.2, 0.5]));
    let pt = g.constant(Matrix::row_vector(&[1.1, 0.2, -0.7]));
    let t = i2c_space_loss(&mut g, &store, ps, pt, &sp, &cfg).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let i2c_err = (g.scalar(t.s2t) - ln2).abs().max((g.scalar(t.t2s) - ln2).abs());
    let pass = worst <= CLOSED_FORM_TOL && single <= CLOSED_FORM_TOL && i2c_err <= CLOSED_FORM_TOL;
    report(
        3,
        pass,
        "closed forms",
        &format!("2n ln n err {worst:.1e}, n=1 i2i {single:.1e}, ln2 per direction err {i2c_err:.1e}"),
    );
    assert!(pass);
}

/// The planted experiment shared by criteria 4 and 5.
struct Planted {
    reports: Vec<MetricsReport>,
    correspondence: Vec<(f64, f64)>,
    secs: f64,
}

pub fn planted_model_config() -> ModelConfig {
    let mut mc = ModelConfig::default();
    mc.encoder.dim = 32;
    mc.encoder.max_len = 20;
    mc.interest.cluster_counts = vec![8];
    mc.interest.single_space_k = 8;
    mc.ctr_hidden = 32;
    mc
}

pub fn planted_train_config() -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 50,
        finetune_epochs: 10,
        finetune_lr: 2e-3,
        contrast: ContrastConfig {
            temperature: 1.0,
            normalize: false,
        },
        ..TrainConfig::default()
    }
}

fn planted() -> &'static Planted {
    static CELL: OnceLock<Planted> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let (ds, truth) = generate_synthetic(&SyntheticConfig {
            num_users: 2000,
            num_groups: 8,
            max_len: 20,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let index: HashMap<String, usize> = ds.pairs.iter().enumerate().map(|(i, p)| (p.user_id.clone(), i)).collect();
        let lookup = |u: &str| index.get(u).copied();
        let pairs = pretraining_pairs(&ds);
        let (mc, tc) = (planted_model_config(), planted_train_config());
        let mut reports = Vec::new();
        let mut correspondence = Vec::new();
        for seed in SEEDS {
            let split = ExampleConfig::default().build(&ds, seed).unwrap();
            for v in TABLE3_VARIANTS {
                let run = run_variant(&ds, &split, &mc, &tc, v, seed, "acceptance").unwrap();
                if v == Variant::Sitn {
                    let a = space_correspondence(&run.pretrained, &pairs, &truth, &lookup, 0, ClusterView::Prototypes).unwrap();
                    let b = space_correspondence(&run.pretrained, &pairs, &truth, &lookup, 0, ClusterView::NewClusters).unwrap();
                    correspondence.push((a, b));
                }
                reports.push(run.report);
            }
        }
        Planted {
            reports,
            correspondence,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_4_ablation_ordering() {
    let p = planted();
    let summary = summarize(&p.reports);
    let mean = |slug: &str| summary.iter().find(|s| s.slug == slug).unwrap().auc_mean;
    let (sitn, none, no_i2c, no_i2i) = (mean("sitn"), mean("no-ssl"), mean("no-i2c"), mean("no-i2i"));
    let pass = sitn - none >= ABLATION_MARGIN && sitn >= no_i2c && sitn >= no_i2i && p.secs < 1800.0;
    report(
        4,
        pass,
        "ablation ordering on planted data",
        &format!(
            "mean AUC over {} seeds: SITN {sitn:.4}, w/o L_i2c {no_i2c:.4}, w/o L_i2i {no_i2i:.4}, w/o both {none:.4} ({:.0}s)",
            SEEDS.len(),
            p.secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_interest_correspondence() {
    let p = planted();
    let n = p.correspondence.len() as f64;
    let proto = p.correspondence.iter().map(|c| c.0).sum::<f64>() / n;
    let newc = p.correspondence.iter().map(|c| c.1).sum::<f64>() / n;
    let per_seed: Vec<String> = p.correspondence.iter().map(|c| format!("{:.3}", c.0)).collect();
    let pass = proto >= CORRESPONDENCE_MIN;
    report(
        5,
        pass,
        "cluster correspondence after stage 1",
        &format!(
            "prototypes mean {proto:.3} (seeds {}), new clusters mean {newc:.3}, random baseline 0.125, threshold {CORRESPONDENCE_MIN}",
            per_seed.join(" ")
        ),
    );
    assert!(pass);
}

/// Review streams in the public dump layout with every filtering rule
/// exercised, and the counts each rule must produce.
struct ReviewFixture {
    source: Vec<RawRecord>,
    target: Vec<RawRecord>,
    expect: IngestStats,
}

fn rec(user: &str, item: String, rating: f64, ts: i64) -> RawRecord {
    RawRecord {
        user: user.to_string(),
        item,
        rating,
        timestamp: ts,
        category: None,
    }
}

fn review_fixture(ds: &Dataset, seed: u64) -> ReviewFixture {
    let (mut source, mut target) = review_records(ds, 2, seed);
    for u in 0..5 {
        // long histories, cut to the most recent 100
        let user = format!("long{u}");
        for j in 0..130 {
            source.push(rec(&user, format!("s_long_{j}"), 5.0, 1_500_000_000 + j));
        }
        for j in 0..110 {
            target.push(rec(&user, format!("t_long_{j}"), 4.0, 1_500_000_000 + j));
        }
        // four clicks and a low rating: source too short
        let user = format!("short{u}");
        for j in 0..4 {
            source.push(rec(&user, format!("s_short_{j}"), 4.0, 1_500_000_000 + j));
        }
        source.push(rec(&user, "s_short_x".into(), 2.0, 1_500_000_100));
        target.push(rec(&user, "t_short".into(), 5.0, 1_500_000_000));
        for j in 0..6 {
            source.push(rec(&format!("solo{u}"), format!("s_solo_{j}"), 5.0, 1_500_000_000 + j));
        }
    }
    source.push(rec("long0", "s_bad".into(), 3.5, 1_500_000_000));

    // independent tabulation
    let mut e = IngestStats {
        source_records: source.len(),
        target_records: target.len(),
        ..IngestStats::default()
    };
    let mut clicks: [HashMap<&str, usize>; 2] = Default::default();
    for (d, recs) in [&source, &target].into_iter().enumerate() {
        for r in recs {
            if r.rating.fract() != 0.0 {
                e.malformed += 1;
            } else if r.rating < 4.0 {
                e.below_min_rating += 1;
            } else {
                *clicks[d].entry(r.user.as_str()).or_default() += 1;
            }
        }
    }
    e.source_clicks = clicks[0].values().sum();
    e.target_clicks = clicks[1].values().sum();
    for (u, &n) in &clicks[0] {
        let Some(&m) = clicks[1].get(u) else { continue };
        e.shared_users += 1;
        if n < 5 {
            e.dropped_short_source += 1;
            continue;
        }
        e.retained_users += 1;
        e.truncated_source += usize::from(n > 100);
        e.truncated_target += usize::from(m > 100);
    }
    ReviewFixture { source, target, expect: e }
}

fn write_records(path: &std::path::Path, recs: &[RawRecord]) {
    let text: String = recs
        .iter()
        .map(|r| {
            serde_json::json!({
                "reviewerID": r.user, "asin": r.item, "overall": r.rating, "unixReviewTime": r.timestamp
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(path, text).unwrap();
}

fn ingest_files(dir: &std::path::Path, source: PathBuf, target: PathBuf, max_len: usize) -> (Dataset, IngestStats) {
    let config = ExperimentConfig {
        dataset: DatasetSpec::Amazon(AmazonSpec {
            source,
            target,
            min_rating: 4,
            min_source_len: 5,
            max_len,
        }),
        ..ExperimentConfig::default()
    };
    let ctx = Context::from_config(config, &dir.join("run")).unwrap();
    let data = cmd_ingest(&ctx).unwrap();
    let (ds, manifest) = read_dataset(&data).unwrap();
    (ds, manifest.ingest.unwrap())
}

fn ingest_via_cli(dir: &std::path::Path, source: &[RawRecord], target: &[RawRecord], max_len: usize) -> (Dataset, IngestStats) {
    std::fs::create_dir_all(dir).unwrap();
    let (s, t) = (dir.join("source.json"), dir.join("target.json"));
    write_records(&s, source);
    write_records(&t, target);
    ingest_files(dir, s, t, max_len)
}

#[test]
fn criterion_6_amazon_pipeline() {
    let (ds, _) = generate_synthetic(&SyntheticConfig {
        num_users: 1500,
        num_groups: 8,
        max_len: 20,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();

    // offline: the ingestion rules on records in the public dump layout
    let fx = review_fixture(&ds, 11);
    let (full, stats) = ingest_via_cli(&dir.path().join("rules"), &fx.source, &fx.target, 100);
    let rules_ok = stats == fx.expect
        && full.pairs.iter().all(|p| p.source.len() >= 5 && p.source.len() <= 100 && p.target.len() <= 100)
        && full.pairs.iter().filter(|p| p.source.len() == 100 && p.target.len() == 100).count() == 5;

    // directional check on the planted histories after ingestion
    let (src, tgt) = review_records(&ds, 2, 12);
    let (ingested, _) = ingest_via_cli(&dir.path().join("planted"), &src, &tgt, 20);
    let (mc, tc) = (planted_model_config(), planted_train_config());
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in [0, 1, 2] {
        let split = ExampleConfig::default().build(&ingested, seed).unwrap();
        let a = run_variant(&ingested, &split, &mc, &tc, Variant::Sitn, seed, "acceptance").unwrap();
        let b = run_variant(&ingested, &split, &mc, &tc, Variant::NoSsl, seed, "acceptance").unwrap();
        wins += usize::from(a.report.auc > b.report.auc);
        gaps.push(format!("{:+.4}", a.report.auc - b.report.auc));
    }
    let proxy_ok = rules_ok && wins == 3;
    println!(
        "criterion 6: NOT RUN on the public Amazon subsample (set SITN_AMAZON_SOURCE and SITN_AMAZON_TARGET, run with --ignored); \
         offline proxy {}: ingestion counts {} ({} users kept, {} dropped short, {} truncated), SITN minus w/o both AUC {}",
        if proxy_ok { "PASS" } else { "FAIL" },
        if rules_ok { "exact" } else { "MISMATCH" },
        stats.retained_users,
        stats.dropped_short_source,
        stats.truncated_source,
        gaps.join(" ")
    );
    assert!(rules_ok, "{stats:?} vs {:?}", fx.expect);
    assert_eq!(wins, 3);
}

#[test]
#[ignore = "needs the public review files"]
fn criterion_6_amazon_real_data() {
    let (Ok(src), Ok(tgt)) = (std::env::var("SITN_AMAZON_SOURCE"), std::env::var("SITN_AMAZON_TARGET")) else {
        println!("criterion 6: NOT RUN SITN_AMAZON_SOURCE / SITN_AMAZON_TARGET unset");
        return;
    };
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (mut ds, stats) = ingest_files(dir.path(), src.into(), tgt.into(), 100);
    let rules_ok = ds.pairs.iter().all(|p| (5..=100).contains(&p.source.len()) && (1..=100).contains(&p.target.len()))
        && stats.retained_users == stats.shared_users - stats.dropped_short_source
        && stats.retained_users == ds.pairs.len()
        && stats.source_clicks + stats.target_clicks + stats.below_min_rating + stats.malformed
            == stats.source_records + stats.target_records;
    ds.pairs.truncate(20_000);
    let mut mc = planted_model_config();
    mc.encoder.max_len = 100;
    let tc = planted_train_config();
    let (mut sitn_auc, mut base_auc) = (0.0, 0.0);
    for seed in [0, 1, 2] {
        let split = ExampleConfig::default().build(&ds, seed).unwrap();
        sitn_auc += run_variant(&ds, &split, &mc, &tc, Variant::Sitn, seed, "amazon").unwrap().report.auc / 3.0;
        base_auc += run_variant(&ds, &split, &mc, &tc, Variant::NoSsl, seed, "amazon").unwrap().report.auc / 3.0;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = rules_ok && sitn_auc > base_auc && secs < 7200.0;
    report(
        6,
        pass,
        "public Amazon subsample",
        &format!("{} users, {stats:?}; mean AUC SITN {sitn_auc:.4} vs w/o both {base_auc:.4} ({secs:.0}s)", ds.pairs.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let ds = tiny_dataset(40, 2);
    let split = ExampleConfig::default().build(&ds, 1).unwrap();
    let mc = small_model_config();
    let tc = TrainConfig {
        pretrain_epochs: 2,
        finetune_epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let a = run_variant(&ds, &split, &mc, &tc, Variant::Sitn, 1, "h").unwrap();
    let b = run_variant(&ds, &split, &mc, &tc, Variant::Sitn, 1, "h").unwrap();
    let reproducible = a.pretrain.checkpoint.same_tensors(&b.pretrain.checkpoint)
        && a.finetune.checkpoint.same_tensors(&b.finetune.checkpoint)
        && a.report.same_metrics(&b.report);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &a.finetune.checkpoint).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let roundtrip = back.same_tensors(&a.finetune.checkpoint) && back.metrics == a.finetune.checkpoint.metrics;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut invariants = true;
    for _ in 0..200 {
        let n = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let warped: Vec<f64> = scores.iter().map(|s| (5.0 * s).exp() - 3.0).collect();
        invariants &= auc(&scores, &labels).unwrap() == auc(&warped, &labels).unwrap();
        let mean = scores
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| bce_loss(f64::from(y), p).unwrap())
            .sum::<f64>()
            / n as f64;
        invariants &= (mean_logloss(&scores, &labels).unwrap() - mean).abs() < 1e-9;
    }
    let pass = reproducible && roundtrip && invariants;
    report(
        7,
        pass,
        "determinism and persistence",
        &format!("identical reruns {reproducible}, bit-exact checkpoint roundtrip {roundtrip}, metric invariants on 200 random cases {invariants}"),
    );
    assert!(pass);
}
