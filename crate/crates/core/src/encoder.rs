//! Per-domain sequence encoder: item + category (+ position) embeddings, a
//! stack of masked multi-head self-attention blocks and mean pooling; plus the
//! target-attention readout used by the CTR stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{masked_softmax, Graph, Var};
use crate::data::{ClickSequence, PADDING_INDEX};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Model width `D`; also the embedding width.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub positional: bool,
    pub residual: bool,
    pub layer_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 2,
            layers: 1,
            max_len: 100,
            positional: true,
            residual: false,
            layer_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(Error::config("model.dim, model.heads, model.layers and model.max_len must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model.dim {} is not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Query/key/value/output projections of one attention block, each `D x D`;
/// head `h` owns columns `h*d_k..(h+1)*d_k` of the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

/// Handles to one domain's encoder tensors inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub prefix: String,
    /// `(|V| + 1) x D`, row 0 is padding and stays zero.
    pub item_emb: ParamId,
    /// `(categories + 1) x D`, row 0 means "no category" and stays zero.
    pub cat_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        num_items: usize,
        num_categories: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let table = |rows: usize, rng: &mut R| {
            let mut m = Matrix::randn(rows, d, std, rng);
            m.row_mut(PADDING_INDEX).fill(0.0);
            m
        };
        let item_emb = store.insert(format!("{prefix}.item_emb"), table(num_items + 1, rng));
        let cat_emb = store.insert(format!("{prefix}.cat_emb"), table(num_categories + 1, rng));
        let pos_emb = cfg.positional.then(|| {
            store.insert(
                format!("{prefix}.pos_emb"),
                Matrix::randn(cfg.max_len, d, 0.1 * std, rng),
            )
        });
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut w = |name: &str| {
                    store.insert(
                        format!("{prefix}.layer{l}.{name}"),
                        Matrix::randn(d, d, std, rng),
                    )
                };
                LayerParams {
                    w_q: w("w_q"),
                    w_k: w("w_k"),
                    w_v: w("w_v"),
                    w_o: w("w_o"),
                }
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            item_emb,
            cat_emb,
            pos_emb,
            layers,
        })
    }

    /// Forces the padding rows of both embedding gradients to zero.
    pub fn zero_padding_grads(&self, grads: &mut Gradients) {
        for id in [self.item_emb, self.cat_emb] {
            if let Some(g) = grads.get_mut(id) {
                g.row_mut(PADDING_INDEX).fill(0.0);
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.item_emb, self.cat_emb];
        ids.extend(self.pos_emb);
        for l in &self.layers {
            ids.extend([l.w_q, l.w_k, l.w_v, l.w_o]);
        }
        ids
    }
}

/// Plain scaled dot-product attention: row `i` of the output is the softmax
/// over valid keys of `q_i . k_j / sqrt(d)` applied to the values. A query
/// with no valid key yields zeros.
pub fn scaled_dot_product_attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    key_mask: &[bool],
) -> Result<Matrix> {
    if queries.cols() != keys.cols() {
        return Err(Error::config("queries and keys must share their width"));
    }
    if keys.rows() != values.rows() || keys.rows() != key_mask.len() {
        return Err(Error::config("keys, values and mask must have the same length"));
    }
    let scale = 1.0 / (queries.cols() as f64).sqrt();
    let mut out = Matrix::zeros(queries.rows(), values.cols());
    for i in 0..queries.rows() {
        let scores: Vec<f64> = (0..keys.rows())
            .map(|j| dot(queries.row(i), keys.row(j)) * scale)
            .collect();
        let w = masked_softmax(&scores, key_mask);
        for (j, wj) in w.iter().enumerate() {
            if *wj != 0.0 {
                for (o, v) in out.row_mut(i).iter_mut().zip(values.row(j)) {
                    *o += wj * v;
                }
            }
        }
    }
    Ok(out)
}

/// Embeddings of `indices` (item + category), zeroed where `keep` is false.
pub fn embed_items(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    item_categories: &[usize],
    indices: &[usize],
    keep: Option<&[bool]>,
) -> Var {
    let items = g.param(store, params.item_emb);
    let cats = g.param(store, params.cat_emb);
    let cat_idx: Vec<usize> = indices.iter().map(|&i| item_categories[i]).collect();
    let a = g.gather_rows(items, indices, keep);
    let b = g.gather_rows(cats, &cat_idx, keep);
    g.add(a, b)
}

/// One masked multi-head self-attention block over `(n*L) x D` input where
/// query, key and value are all the input sequence.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    cfg: &EncoderConfig,
    x: Var,
    mask: &[bool],
    seq_len: usize,
) -> Result<Var> {
    cfg.validate()?;
    let wq = g.param(store, layer.w_q);
    let wk = g.param(store, layer.w_k);
    let wv = g.param(store, layer.w_v);
    let wo = g.param(store, layer.w_o);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let heads = g.self_attention(q, k, v, mask, seq_len, cfg.heads);
    let mut out = g.matmul(heads, wo);
    if cfg.residual {
        out = g.add(out, x);
    }
    if cfg.layer_norm {
        out = g.layer_norm_rows(out);
    }
    Ok(g.mask_rows(out, mask))
}

/// Encoder output for a batch: per-position states `(n*L) x D` and the pooled
/// instance representations `n x D`.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub states: Var,
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub seq_len: usize,
}

/// Encodes a batch of equally padded sequences of one domain.
pub fn encode_batch(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    item_categories: &[usize],
    seqs: &[&ClickSequence],
) -> Result<EncodedBatch> {
    let seq_len = seqs
        .first()
        .map(|s| s.max_len())
        .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    if seqs.iter().any(|s| s.max_len() != seq_len) {
        return Err(Error::config("sequences in a batch must share their padded length"));
    }
    if cfg.positional && seq_len > cfg.max_len {
        return Err(Error::config(format!(
            "sequence length {seq_len} exceeds model.max_len {}",
            cfg.max_len
        )));
    }
    if let Some(s) = seqs.iter().find(|s| s.is_empty()) {
        return Err(Error::EmptySequence(format!(
            "{} sequence of user {} has no clicks",
            s.domain.as_str(),
            s.user_id
        )));
    }
    let indices: Vec<usize> = seqs.iter().flat_map(|s| s.item_indices.iter().copied()).collect();
    let mask: Vec<bool> = seqs.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let mut x = embed_items(g, store, params, item_categories, &indices, Some(&mask));
    if let Some(pos) = params.pos_emb {
        let table = g.param(store, pos);
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..seq_len).collect();
        let p = g.gather_rows(table, &positions, Some(&mask));
        x = g.add(x, p);
    }
    for layer in &params.layers {
        x = multi_head_self_attention(g, store, layer, cfg, x, &mask, seq_len)?;
    }
    let pooled = g.mean_pool(x, &mask, seq_len)?;
    Ok(EncodedBatch {
        states: x,
        pooled,
        mask,
        seq_len,
    })
}

/// Pooled representation of a single sequence.
pub fn encode_sequence(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    item_categories: &[usize],
    seq: &ClickSequence,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, store, params, cfg, item_categories, &[seq])?;
    Ok(g.value(enc.pooled).row(0).to_vec())
}

/// Attention readout of encoded histories with one query row per sequence;
/// keys and values are the encoded states.
pub fn target_attention(g: &mut Graph, query: Var, history: &EncodedBatch) -> Result<Var> {
    g.target_attention(query, history.states, &history.mask, history.seq_len)
}
