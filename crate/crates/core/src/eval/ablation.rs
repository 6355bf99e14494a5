//! End-to-end variant runs: pretrain, fine-tune, score the held-out users.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::clusters::{assign_cluster_groups, cluster_correspondence};
use super::metrics::{auc, mean_logloss, MetricsReport};
use crate::autodiff::Graph;
use crate::data::{
    build_stage2_examples, pretraining_pairs, BatchIterator, Dataset, Domain, ExampleSplit, PairBatch,
    PlantedAssignment, SequencePair,
};
use crate::error::{Error, Result};
use crate::ssl::{compute_new_clusters, soft_assignments, AblationFlags};
use crate::tensor::Matrix;
use crate::training::{
    finetune, predict_ctr, pretrain, sub_seed, Checkpoint, ModelConfig, SitnModel, TrainConfig, TrainOutcome,
    VocabShape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Sitn,
    NoSsl,
    NoI2c,
    NoI2i,
    NoMgMv,
    NoMg,
    NoMv,
}

/// Rows of the objective ablation table.
pub const TABLE3_VARIANTS: [Variant; 4] = [Variant::NoSsl, Variant::NoI2c, Variant::NoI2i, Variant::Sitn];
/// Rows of the cluster-module ablation table.
pub const TABLE4_VARIANTS: [Variant; 4] = [Variant::NoMgMv, Variant::NoMg, Variant::NoMv, Variant::Sitn];

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Sitn,
        Variant::NoSsl,
        Variant::NoI2c,
        Variant::NoI2i,
        Variant::NoMgMv,
        Variant::NoMg,
        Variant::NoMv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sitn => "SITN",
            Variant::NoSsl => "w/o L_i2c & L_i2i",
            Variant::NoI2c => "w/o L_i2c",
            Variant::NoI2i => "w/o L_i2i",
            Variant::NoMgMv => "w/o MG&MV",
            Variant::NoMg => "w/o MG",
            Variant::NoMv => "w/o MV",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Sitn => "sitn",
            Variant::NoSsl => "no-ssl",
            Variant::NoI2c => "no-i2c",
            Variant::NoI2i => "no-i2i",
            Variant::NoMgMv => "no-mg-mv",
            Variant::NoMg => "no-mg",
            Variant::NoMv => "no-mv",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let all = AblationFlags::default();
        match self {
            Variant::Sitn => all,
            Variant::NoSsl => AblationFlags {
                use_i2i: false,
                use_i2c: false,
                ..all
            },
            Variant::NoI2c => AblationFlags { use_i2c: false, ..all },
            Variant::NoI2i => AblationFlags { use_i2i: false, ..all },
            Variant::NoMgMv => AblationFlags {
                use_mg: false,
                use_mv: false,
                ..all
            },
            Variant::NoMg => AblationFlags { use_mg: false, ..all },
            Variant::NoMv => AblationFlags { use_mv: false, ..all },
        }
    }

    /// Parses every name in `names` before anything runs. `table3` and
    /// `table4` expand to their row sets, `all` to every variant.
    pub fn parse_list<S: AsRef<str>>(names: &[S]) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for n in names {
            let expanded: Vec<Variant> = match n.as_ref().trim() {
                "table3" => TABLE3_VARIANTS.to_vec(),
                "table4" => TABLE4_VARIANTS.to_vec(),
                "all" => Variant::ALL.to_vec(),
                other => vec![other.parse()?],
            };
            for v in expanded {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        Ok(out)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s || v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExampleConfig {
    pub negatives_per_positive: usize,
    pub holdout_fraction: f64,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            negatives_per_positive: 4,
            holdout_fraction: 0.2,
        }
    }
}

impl ExampleConfig {
    /// Labelled examples for `seed`; the split depends on the seed only.
    pub fn build(&self, ds: &Dataset, seed: u64) -> Result<ExampleSplit> {
        build_stage2_examples(ds, self.negatives_per_positive, self.holdout_fraction, sub_seed(seed, 7))
    }
}

/// Everything produced by one variant and seed.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub pretrained: SitnModel,
    pub pretrain: TrainOutcome,
    pub model: SitnModel,
    pub finetune: TrainOutcome,
    pub report: MetricsReport,
}

/// Stage 1 for `variant`: fresh seeded initialisation, then contrastive
/// training on the histories in `pairs`.
pub fn pretrain_variant(
    pairs: &[SequencePair],
    vocab: &VocabShape,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
    config_hash: &str,
) -> Result<(SitnModel, TrainOutcome)> {
    let cfg = TrainConfig {
        flags: variant.flags(),
        ..train_cfg.clone()
    };
    let mut model = SitnModel::for_pretraining(model_cfg, vocab, &cfg.flags, seed)?;
    let outcome = pretrain(pairs, &mut model, &cfg, seed, config_hash)?;
    if let Some(reason) = &outcome.aborted {
        return Err(Error::NonFinite(format!("stage 1 aborted: {reason}")));
    }
    Ok((model, outcome))
}

/// Stage 2 from a stage-1 checkpoint, then test-set scoring.
#[allow(clippy::too_many_arguments)]
pub fn finetune_and_evaluate(
    ds: &Dataset,
    split: &ExampleSplit,
    pretrained: &Checkpoint,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    label: (&str, &str),
    seed: u64,
    config_hash: &str,
) -> Result<(SitnModel, TrainOutcome, MetricsReport)> {
    let start = Instant::now();
    let mut model = SitnModel::for_finetuning(model_cfg, &VocabShape::of(ds), seed)?;
    model.load_encoders(pretrained)?;
    let outcome = finetune(&split.train, &mut model, train_cfg, seed, config_hash)?;
    if let Some(reason) = &outcome.aborted {
        return Err(Error::NonFinite(format!("stage 2 aborted: {reason}")));
    }
    let report = evaluate_model(&model, ds, split, label, seed, config_hash, train_cfg.batch_size.max(256))?;
    Ok((
        model,
        outcome,
        MetricsReport {
            runtime_secs: start.elapsed().as_secs_f64(),
            ..report
        },
    ))
}

/// AUC and logloss of `model` on the test side of `split`.
pub fn evaluate_model(
    model: &SitnModel,
    ds: &Dataset,
    split: &ExampleSplit,
    (variant, slug): (&str, &str),
    seed: u64,
    config_hash: &str,
    batch_size: usize,
) -> Result<MetricsReport> {
    let scores = predict_ctr(model, &split.test, batch_size)?;
    let labels: Vec<u8> = split.test.iter().map(|e| e.label).collect();
    Ok(MetricsReport {
        variant: variant.to_string(),
        slug: slug.to_string(),
        seed,
        auc: auc(&scores, &labels)?,
        logloss: mean_logloss(&scores, &labels)?,
        n_test: labels.len(),
        dataset_hash: ds.content_hash(),
        config_hash: config_hash.to_string(),
        runtime_secs: 0.0,
    })
}

/// Full two-stage run of one variant.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    ds: &Dataset,
    split: &ExampleSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
    config_hash: &str,
) -> Result<VariantRun> {
    let start = Instant::now();
    let pairs = pretraining_pairs(ds);
    let (pretrained, pre) = pretrain_variant(&pairs, &VocabShape::of(ds), model_cfg, train_cfg, variant, seed, config_hash)?;
    let (model, fine, report) = finetune_and_evaluate(
        ds,
        split,
        &pre.checkpoint,
        model_cfg,
        train_cfg,
        (variant.name(), variant.slug()),
        seed,
        config_hash,
    )?;
    log::info!(
        "{} seed {seed}: auc {:.4} logloss {:.4}",
        variant.name(),
        report.auc,
        report.logloss
    );
    Ok(VariantRun {
        variant,
        pretrained,
        pretrain: pre,
        model,
        finetune: fine,
        report: MetricsReport {
            runtime_secs: start.elapsed().as_secs_f64(),
            ..report
        },
    })
}

/// Trains and evaluates every variant for every seed, each from a fresh
/// seeded initialisation. Reports come back seed-major.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations<S: AsRef<str>>(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    examples: &ExampleConfig,
    variants: &[S],
    seeds: &[u64],
    config_hash: &str,
) -> Result<Vec<MetricsReport>> {
    let variants = Variant::parse_list(variants)?;
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut reports = Vec::new();
    for &seed in seeds {
        let split = examples.build(ds, seed)?;
        for &v in &variants {
            reports.push(run_variant(ds, &split, model_cfg, train_cfg, v, seed, config_hash)?.report);
        }
    }
    Ok(reports)
}

/// Pooled source and target instances of every pair, value only.
pub fn encode_all(model: &SitnModel, pairs: &[SequencePair], batch_size: usize) -> Result<(Matrix, Matrix)> {
    let d = model.config.encoder.dim;
    let mut ps = Vec::with_capacity(pairs.len() * d);
    let mut pt = Vec::with_capacity(pairs.len() * d);
    for batch in BatchIterator::sequential(pairs, batch_size.max(1))? {
        let mut g = Graph::new();
        let (s, t) = model.encode_pairs(&mut g, &PairBatch::new(&batch))?;
        ps.extend_from_slice(g.value(s).data());
        pt.extend_from_slice(g.value(t).data());
    }
    Ok((Matrix::from_vec(pairs.len(), d, ps)?, Matrix::from_vec(pairs.len(), d, pt)?))
}

/// Which cluster representation the correspondence compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterView {
    /// The trainable matrices `C`.
    Prototypes,
    /// New clusters `U` computed over all instances.
    NewClusters,
}

/// Correspondence of one interest space of a stage-1 model against the
/// planted groups, with clusters labelled by member π-mass.
pub fn space_correspondence(
    model: &SitnModel,
    pairs: &[SequencePair],
    planted: &PlantedAssignment,
    user_index: &dyn Fn(&str) -> Option<usize>,
    space: usize,
    view: ClusterView,
) -> Result<f64> {
    let spaces = model
        .spaces
        .as_ref()
        .ok_or_else(|| Error::config("model has no interest spaces"))?;
    let sp = spaces
        .spaces
        .get(space)
        .ok_or_else(|| Error::config(format!("no interest space {space}")))?;
    let user_groups = pairs
        .iter()
        .map(|p| {
            user_index(&p.user_id)
                .and_then(|i| planted.user_groups.get(i).cloned())
                .ok_or_else(|| Error::config(format!("no planted groups for user {}", p.user_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ps, pt) = encode_all(model, pairs, 256)?;
    let pi_s = soft_assignments(&model.store, sp, Domain::Source, &ps);
    let pi_t = soft_assignments(&model.store, sp, Domain::Target, &pt);
    let gs = assign_cluster_groups(&pi_s, &user_groups, planted.num_groups)?;
    let gt = assign_cluster_groups(&pi_t, &user_groups, planted.num_groups)?;
    let (cs, ct) = match view {
        ClusterView::Prototypes => (
            model.store.get(sp.c_source).clone(),
            model.store.get(sp.c_target).clone(),
        ),
        ClusterView::NewClusters => {
            let mut g = Graph::new();
            let c_s = g.param(&model.store, sp.c_source);
            let c_t = g.param(&model.store, sp.c_target);
            let p_s = g.constant(ps);
            let p_t = g.constant(pt);
            let (us, _) = compute_new_clusters(&mut g, c_s, p_s)?;
            let (ut, _) = compute_new_clusters(&mut g, c_t, p_t)?;
            (g.value(us).clone(), g.value(ut).clone())
        }
    };
    cluster_correspondence(&cs, &ct, &gs, &gt)
}
