//! Two-stage training: contrastive pretraining of both encoders and the
//! interest spaces, then CTR fine-tuning with encoders initialised from the
//! first stage.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::data::{BatchIterator, CdrExample, Dataset, Domain, PairBatch, SequencePair};
use crate::encoder::{embed_items, encode_batch, target_attention, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::ssl::{ssl_loss, AblationFlags, ContrastConfig, Dense, GranularitySet, InterestConfig};
use crate::tensor::Matrix;

pub const PROB_EPS: f64 = 1e-7;

/// Derives an independent stream seed from the experiment seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Hard cap on stage-1 steps, if any.
    pub pretrain_max_steps: Option<usize>,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub contrast: ContrastConfig,
    pub adam: AdamConfig,
    pub flags: AblationFlags,
    pub freeze_encoders: bool,
    pub drop_incomplete: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            pretrain_max_steps: None,
            finetune_epochs: 5,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-3,
            batch_size: 64,
            contrast: ContrastConfig::default(),
            adam: AdamConfig::default(),
            flags: AblationFlags::default(),
            freeze_encoders: false,
            drop_incomplete: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("train.{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("train.adam needs betas in [0, 1) and eps > 0"));
        }
        self.contrast.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub interest: InterestConfig,
    /// Hidden width of the CTR head.
    pub ctr_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            interest: InterestConfig::default(),
            ctr_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.interest.validate()?;
        if self.ctr_hidden == 0 {
            return Err(Error::config("model.ctr_hidden must be positive"));
        }
        Ok(())
    }
}

/// Vocabulary-dependent sizes needed to build parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabShape {
    pub source_items: usize,
    pub source_categories: usize,
    pub source_item_categories: Vec<usize>,
    pub target_items: usize,
    pub target_categories: usize,
    pub target_item_categories: Vec<usize>,
}

impl VocabShape {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            source_items: ds.source_vocab.len(),
            source_categories: ds.source_vocab.num_categories(),
            source_item_categories: ds.source_vocab.item_categories().to_vec(),
            target_items: ds.target_vocab.len(),
            target_categories: ds.target_vocab.num_categories(),
            target_item_categories: ds.target_vocab.item_categories().to_vec(),
        }
    }

    pub fn item_categories(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::Source => &self.source_item_categories,
            Domain::Target => &self.target_item_categories,
        }
    }
}

/// `concat(u_s, u_t, v)` (`3D`) -> `tanh` hidden -> one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrHead {
    pub hidden: Dense,
    pub out: Dense,
}

impl CtrHead {
    pub fn init(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let input = 3 * dim;
        Self {
            hidden: Dense {
                w: store.insert("ctr.w1", Matrix::randn(input, hidden, 1.0 / (input as f64).sqrt(), rng)),
                b: store.insert("ctr.b1", Matrix::zeros(1, hidden)),
            },
            out: Dense {
                w: store.insert("ctr.w2", Matrix::randn(hidden, 1, 1.0 / (hidden as f64).sqrt(), rng)),
                b: store.insert("ctr.b2", Matrix::zeros(1, 1)),
            },
        }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.hidden.w);
        let b1 = g.param(store, self.hidden.b);
        let w2 = g.param(store, self.out.w);
        let b2 = g.param(store, self.out.b);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let z = g.matmul(h, w2);
        g.add_row(z, b2)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.hidden.w, self.hidden.b, self.out.w, self.out.b]
    }
}

/// Parameters plus the handles that give them structure. Stage-1 models carry
/// interest spaces, stage-2 models a CTR head.
#[derive(Clone, Debug)]
pub struct SitnModel {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub vocab: VocabShape,
    pub source: EncoderParams,
    pub target: EncoderParams,
    pub spaces: Option<GranularitySet>,
    pub head: Option<CtrHead>,
}

impl SitnModel {
    fn encoders(config: &ModelConfig, vocab: &VocabShape, seed: u64) -> Result<(ParamStore, EncoderParams, EncoderParams)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
        let source = EncoderParams::init(
            &mut store,
            "source",
            &config.encoder,
            vocab.source_items,
            vocab.source_categories,
            &mut rng,
        )?;
        let target = EncoderParams::init(
            &mut store,
            "target",
            &config.encoder,
            vocab.target_items,
            vocab.target_categories,
            &mut rng,
        )?;
        Ok((store, source, target))
    }

    /// Stage-1 model: both encoders and the interest spaces selected by `flags`.
    /// Encoder initialisation depends only on the seed, not on the flags.
    pub fn for_pretraining(config: &ModelConfig, vocab: &VocabShape, flags: &AblationFlags, seed: u64) -> Result<Self> {
        let (mut store, source, target) = Self::encoders(config, vocab, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));
        let spaces = GranularitySet::init(&mut store, &config.interest, config.encoder.dim, flags, &mut rng)?;
        Ok(Self {
            store,
            config: config.clone(),
            vocab: vocab.clone(),
            source,
            target,
            spaces: Some(spaces),
            head: None,
        })
    }

    /// Stage-2 model: both encoders and a freshly initialised CTR head.
    pub fn for_finetuning(config: &ModelConfig, vocab: &VocabShape, seed: u64) -> Result<Self> {
        let (mut store, source, target) = Self::encoders(config, vocab, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
        let head = CtrHead::init(&mut store, config.encoder.dim, config.ctr_hidden, &mut rng);
        Ok(Self {
            store,
            config: config.clone(),
            vocab: vocab.clone(),
            source,
            target,
            spaces: None,
            head: Some(head),
        })
    }

    pub fn encoder(&self, domain: Domain) -> &EncoderParams {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = self.source.ids();
        ids.extend(self.target.ids());
        ids
    }

    /// Overwrites every tensor of this model from `ckpt`; all must be present
    /// with matching shapes.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let value = ckpt
                .params
                .by_name(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            self.store.assign(&name, value)?;
        }
        Ok(())
    }

    /// Copies both encoders' tensors from a stage-1 checkpoint.
    pub fn load_encoders(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for prefix in ["source.", "target."] {
            self.store.copy_prefix_from(&ckpt.params, prefix)?;
        }
        let names: Vec<String> = self
            .encoder_ids()
            .into_iter()
            .map(|id| self.store.name(id).to_string())
            .collect();
        for name in names {
            if ckpt.params.by_name(&name).is_none() {
                return Err(Error::MissingTensor(name));
            }
        }
        Ok(())
    }

    fn zero_padding(&self, grads: &mut Gradients) {
        self.source.zero_padding_grads(grads);
        self.target.zero_padding_grads(grads);
    }

    /// Pooled source and target instances for a batch of aligned pairs.
    pub fn encode_pairs(&self, g: &mut Graph, batch: &PairBatch) -> Result<(Var, Var)> {
        let enc = &self.config.encoder;
        let s = encode_batch(g, &self.store, &self.source, enc, &self.vocab.source_item_categories, &batch.source)?;
        let t = encode_batch(g, &self.store, &self.target, enc, &self.vocab.target_item_categories, &batch.target)?;
        Ok((s.pooled, t.pooled))
    }

    /// CTR logits (`n x 1`) for a batch of examples.
    pub fn ctr_logits(&self, g: &mut Graph, examples: &[&CdrExample]) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::config("model has no CTR head"))?;
        let enc = &self.config.encoder;
        let src: Vec<_> = examples.iter().map(|e| &e.source_seq).collect();
        let tgt: Vec<_> = examples.iter().map(|e| &e.target_seq).collect();
        let zs = encode_batch(g, &self.store, &self.source, enc, &self.vocab.source_item_categories, &src)?;
        let zt = encode_batch(g, &self.store, &self.target, enc, &self.vocab.target_item_categories, &tgt)?;
        let candidates: Vec<usize> = examples.iter().map(|e| e.candidate_item).collect();
        if let Some(&bad) = candidates.iter().find(|&&c| c == 0 || c > self.vocab.target_items) {
            return Err(Error::config(format!("candidate item {bad} outside the target vocabulary")));
        }
        let v = embed_items(g, &self.store, &self.target, &self.vocab.target_item_categories, &candidates, None);
        let us = target_attention(g, v, &zs)?;
        let ut = target_attention(g, v, &zt)?;
        let x = g.concat_cols(&[us, ut, v]);
        Ok(head.logits(g, &self.store, x))
    }
}

/// Adam with bias correction. A step whose gradients are not all finite is
/// skipped and counted.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    t: u64,
    m: BTreeMap<ParamId, Matrix>,
    v: BTreeMap<ParamId, Matrix>,
    pub skipped: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter with a gradient (restricted to
    /// `trainable` when given). Returns whether the step was applied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: Option<&HashSet<ParamId>>) -> Result<bool> {
        for (id, g) in grads.iter() {
            let shape = store.get(id).shape();
            if g.shape() != shape {
                return Err(Error::Shape {
                    name: store.name(id).to_string(),
                    expected: shape,
                    found: g.shape(),
                });
            }
        }
        if let Err(e) = grads.check_finite(store) {
            log::warn!("skipping optimizer step: {e}");
            self.skipped += 1;
            return Ok(false);
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            if trainable.is_some_and(|t| !t.contains(&id)) {
                continue;
            }
            let m = self.m.entry(id).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(id).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(true)
    }
}

/// `-(y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_loss(y: f64, y_hat: f64) -> Result<f64> {
    if y != 0.0 && y != 1.0 {
        return Err(Error::InvalidLabel(y));
    }
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Named tensors with their training context.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(model: &SitnModel, stage: Stage, step: u64, config_hash: &str) -> Self {
        Self {
            stage,
            step,
            config_hash: config_hash.to_string(),
            metrics: BTreeMap::new(),
            params: model.store.clone(),
        }
    }

    /// Logs a warning and returns false when the stored hash differs.
    pub fn check_config_hash(&self, expected: &str) -> bool {
        if self.config_hash != expected {
            log::warn!(
                "checkpoint config hash {} differs from current config {}",
                self.config_hash,
                expected
            );
            return false;
        }
        true
    }

    /// True when both checkpoints hold the same tensors bit for bit.
    pub fn same_tensors(&self, other: &Checkpoint) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(_, name, m)| {
                other.params.by_name(name).is_some_and(|o| {
                    o.shape() == m.shape() && o.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

const MAGIC: &[u8; 8] = b"SITNCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: u64,
    config_hash: String,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

/// Binary layout: magic, `u32` version, `u64` header length, JSON header,
/// then every tensor's `f64` values little-endian in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = Header {
        stage: ckpt.stage,
        step: ckpt.step,
        config_hash: ckpt.config_hash.clone(),
        metrics: ckpt.metrics.clone(),
        tensors: ckpt
            .params
            .iter()
            .map(|(_, name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, m) in ckpt.params.iter() {
        for x in m.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |what: &str| Error::Parse(format!("corrupt checkpoint {}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| corrupt("truncated"))?;
    let hjson = body.get(..hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(hjson).map_err(|e| corrupt(&e.to_string()))?;
    let mut data = &body[hlen..];
    let mut params = ParamStore::new();
    for t in header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| corrupt("tensor size overflow"))?;
        let nbytes = n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflow"))?;
        if data.len() < nbytes {
            return Err(corrupt(&format!("truncated tensor `{}`", t.name)));
        }
        let values = data[..nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[nbytes..];
        if params.id(&t.name).is_some() {
            return Err(corrupt(&format!("duplicate tensor `{}`", t.name)));
        }
        params.insert(t.name, Matrix::from_vec(t.rows, t.cols, values)?);
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        stage: header.stage,
        step: header.step,
        config_hash: header.config_hash,
        metrics: header.metrics,
        params,
    })
}

/// One optimisation step of either stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i2i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i2c: Option<f64>,
    pub applied: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
    pub skipped_steps: usize,
    /// Set when training stopped on a non-finite loss; the checkpoint then
    /// holds the last parameters that produced a finite loss.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.loss).collect()
    }
}

/// Stage 1: optimises `L_ssl` over aligned sequence pairs. With both
/// objectives disabled no step is taken and the initialisation is returned.
pub fn pretrain(
    pairs: &[SequencePair],
    model: &mut SitnModel,
    cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spaces = model
        .spaces
        .clone()
        .ok_or_else(|| Error::config("pretraining needs a model with interest spaces"))?;
    let mut history = Vec::new();
    let mut adam = Adam::new(cfg.adam.clone(), cfg.pretrain_lr);
    let mut aborted = None;
    let max_steps = if cfg.flags.any_objective() {
        cfg.pretrain_max_steps.unwrap_or(usize::MAX)
    } else {
        0
    };
    if pairs.is_empty() && max_steps > 0 && cfg.pretrain_epochs > 0 {
        return Err(Error::EmptyDataset("no sequence pairs to pretrain on".into()));
    }
    let drop = cfg.drop_incomplete && pairs.len() >= cfg.batch_size;
    let start = Instant::now();
    'epochs: for epoch in 0..cfg.pretrain_epochs {
        if history.len() >= max_steps {
            break;
        }
        for batch in BatchIterator::new(pairs, cfg.batch_size, sub_seed(seed, 100 + epoch as u64), drop)? {
            if history.len() >= max_steps {
                break 'epochs;
            }
            let pb = PairBatch::new(&batch);
            let mut g = Graph::new();
            let (ps, pt) = model.encode_pairs(&mut g, &pb)?;
            let terms = ssl_loss(&mut g, &model.store, ps, pt, &spaces, &cfg.contrast, &cfg.flags)?;
            let loss = g.scalar(terms.total);
            if !loss.is_finite() {
                aborted = Some(format!("non-finite loss at step {}", adam.steps() + 1));
                log::error!("{}", aborted.as_ref().unwrap());
                break 'epochs;
            }
            let mut grads = g.backward(terms.total);
            model.zero_padding(&mut grads);
            let applied = adam.step(&mut model.store, &grads, None)?;
            history.push(StepLog {
                step: history.len() as u64 + 1,
                epoch,
                loss,
                i2i: terms.i2i.map(|v| g.scalar(v)),
                i2c: terms.i2c.map(|v| g.scalar(v)),
                applied,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let mut checkpoint = Checkpoint::of(model, Stage::Pretrain, adam.steps(), config_hash);
    if let Some(last) = history.last() {
        checkpoint.metrics.insert("final_loss".into(), last.loss);
    }
    checkpoint.metrics.insert("skipped_steps".into(), adam.skipped as f64);
    Ok(TrainOutcome {
        checkpoint,
        history,
        skipped_steps: adam.skipped,
        aborted,
    })
}

/// Summed stage-2 loss over a batch of examples.
pub fn batch_bce(model: &SitnModel, g: &mut Graph, examples: &[&CdrExample]) -> Result<Var> {
    let logits = model.ctr_logits(g, examples)?;
    let labels: Vec<f64> = examples.iter().map(|e| f64::from(e.label)).collect();
    g.bce_with_logits(logits, &labels, PROB_EPS)
}

/// Stage 2: trains encoders (unless frozen) and the CTR head on labelled
/// examples. `model` must already hold the pretrained encoders.
pub fn finetune(
    examples: &[CdrExample],
    model: &mut SitnModel,
    cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let head = model
        .head
        .clone()
        .ok_or_else(|| Error::config("fine-tuning needs a model with a CTR head"))?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no stage-2 training examples".into()));
    }
    let trainable: Option<HashSet<ParamId>> = cfg.freeze_encoders.then(|| head.ids().into_iter().collect());
    let mut adam = Adam::new(cfg.adam.clone(), cfg.finetune_lr);
    let mut history = Vec::new();
    let mut aborted = None;
    let start = Instant::now();
    let drop = cfg.drop_incomplete && examples.len() >= cfg.batch_size;
    'epochs: for epoch in 0..cfg.finetune_epochs {
        for batch in BatchIterator::new(examples, cfg.batch_size, sub_seed(seed, 1000 + epoch as u64), drop)? {
            let mut g = Graph::new();
            let loss_var = batch_bce(model, &mut g, &batch)?;
            let loss = g.scalar(loss_var);
            if !loss.is_finite() {
                aborted = Some(format!("non-finite loss at step {}", adam.steps() + 1));
                log::error!("{}", aborted.as_ref().unwrap());
                break 'epochs;
            }
            let mut grads = g.backward(loss_var);
            model.zero_padding(&mut grads);
            let applied = adam.step(&mut model.store, &grads, trainable.as_ref())?;
            history.push(StepLog {
                step: history.len() as u64 + 1,
                epoch,
                loss,
                i2i: None,
                i2c: None,
                applied,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let mut checkpoint = Checkpoint::of(model, Stage::Finetune, adam.steps(), config_hash);
    if let Some(last) = history.last() {
        checkpoint.metrics.insert("final_loss".into(), last.loss);
    }
    checkpoint.metrics.insert("skipped_steps".into(), adam.skipped as f64);
    Ok(TrainOutcome {
        checkpoint,
        history,
        skipped_steps: adam.skipped,
        aborted,
    })
}

/// Click probabilities for `examples`, evaluated in chunks of `batch_size`.
pub fn predict_ctr(model: &SitnModel, examples: &[CdrExample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for batch in BatchIterator::sequential(examples, batch_size.max(1))? {
        let mut g = Graph::new();
        let logits = model.ctr_logits(&mut g, &batch)?;
        out.extend(g.value(logits).data().iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}
