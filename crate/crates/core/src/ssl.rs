//! Cross-domain contrastive objectives: instance-to-instance InfoNCE and
//! instance-to-cluster contrast against batch-conditioned interest clusters,
//! with multi-view fusion and a sum over several interest spaces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// L2-normalise instances before every similarity.
    pub normalize: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            normalize: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Which parts of the objective and of the cluster machinery are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_i2i: bool,
    pub use_i2c: bool,
    pub use_mv: bool,
    pub use_mg: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_i2i: true,
            use_i2c: true,
            use_mv: true,
            use_mg: true,
        }
    }
}

impl AblationFlags {
    pub fn any_objective(&self) -> bool {
        self.use_i2i || self.use_i2c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterestConfig {
    /// Cluster count `K` of every interest space.
    pub cluster_counts: Vec<usize>,
    pub k_top: usize,
    /// `K` of the lone space used when multi-granularity is switched off.
    pub single_space_k: usize,
}

impl Default for InterestConfig {
    fn default() -> Self {
        Self {
            cluster_counts: vec![32, 64],
            k_top: 2,
            single_space_k: 64,
        }
    }
}

impl InterestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_counts.is_empty() {
            return Err(Error::config("interest.cluster_counts must list at least one space"));
        }
        if self.k_top == 0 {
            return Err(Error::config("interest.k_top must be at least 1"));
        }
        for &k in self.cluster_counts.iter().chain([&self.single_space_k]) {
            if k < self.k_top {
                return Err(Error::config(format!(
                    "cluster count {k} is smaller than interest.k_top {}",
                    self.k_top
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

/// Multi-view fusion MLP: dense layers with `tanh` between them.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub layers: Vec<Dense>,
}

impl FusionParams {
    /// `input -> hidden (tanh) -> output`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut dense = |i: usize, fan_in: usize, fan_out: usize, rng: &mut R| Dense {
            w: store.insert(
                format!("{prefix}.l{i}.w"),
                Matrix::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            ),
            b: store.insert(format!("{prefix}.l{i}.b"), Matrix::zeros(1, fan_out)),
        };
        let l0 = dense(0, input, hidden, rng);
        let l1 = dense(1, hidden, output, rng);
        Self { layers: vec![l0, l1] }
    }

    /// A single identity layer of width `dim`.
    pub fn identity(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            layers: vec![Dense {
                w: store.insert(format!("{prefix}.l0.w"), Matrix::identity(dim)),
                b: store.insert(format!("{prefix}.l0.b"), Matrix::zeros(1, dim)),
            }],
        }
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].w).rows()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.tanh(h);
            }
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let z = g.matmul(h, w);
            h = g.add_row(z, b);
        }
        h
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// One granularity: source and target cluster matrices (`K x D`) and, with
/// multi-view on, a fusion MLP per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestSpace {
    pub k: usize,
    pub k_top: usize,
    pub c_source: ParamId,
    pub c_target: ParamId,
    /// `None` means the positive is the top-1 new cluster itself.
    pub fusion: Option<(FusionParams, FusionParams)>,
}

impl InterestSpace {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        k_top: usize,
        dim: usize,
        multi_view: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k_top == 0 || k_top > k {
            return Err(Error::config(format!("invalid interest space K={k}, k_top={k_top}")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let c_source = store.insert(format!("{prefix}.c_source"), Matrix::randn(k, dim, std, rng));
        let c_target = store.insert(format!("{prefix}.c_target"), Matrix::randn(k, dim, std, rng));
        let fusion = multi_view.then(|| {
            let s = FusionParams::init(store, &format!("{prefix}.fusion_source"), k_top * dim, dim, dim, rng);
            let t = FusionParams::init(store, &format!("{prefix}.fusion_target"), k_top * dim, dim, dim, rng);
            (s, t)
        });
        Ok(Self {
            k,
            k_top: if multi_view { k_top } else { 1 },
            c_source,
            c_target,
            fusion,
        })
    }

    pub fn clusters(&self, domain: Domain) -> ParamId {
        match domain {
            Domain::Source => self.c_source,
            Domain::Target => self.c_target,
        }
    }

    pub fn fusion(&self, domain: Domain) -> Option<&FusionParams> {
        self.fusion.as_ref().map(|(s, t)| match domain {
            Domain::Source => s,
            Domain::Target => t,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.c_source, self.c_target];
        if let Some((s, t)) = &self.fusion {
            ids.extend(s.ids());
            ids.extend(t.ids());
        }
        ids
    }
}

/// The ordered list of interest spaces summed by the cluster objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GranularitySet {
    pub spaces: Vec<InterestSpace>,
}

impl GranularitySet {
    /// Builds the spaces selected by `flags`: all configured counts with
    /// multi-granularity on, a single `single_space_k` space otherwise.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &InterestConfig,
        dim: usize,
        flags: &AblationFlags,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let counts = if flags.use_mg {
            cfg.cluster_counts.clone()
        } else {
            vec![cfg.single_space_k]
        };
        let spaces = counts
            .iter()
            .enumerate()
            .map(|(i, &k)| InterestSpace::init(store, &format!("space{i}"), k, cfg.k_top, dim, flags.use_mv, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spaces })
    }

    pub fn len(&self) -> usize {
        self.spaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spaces.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.spaces.iter().flat_map(InterestSpace::ids).collect()
    }
}

fn check_pair(g: &Graph, ps: Var, pt: Var) -> Result<()> {
    if g.shape(ps) != g.shape(pt) {
        return Err(Error::Shape {
            name: "P_t".into(),
            expected: g.shape(ps),
            found: g.shape(pt),
        });
    }
    if g.shape(ps).0 == 0 {
        return Err(Error::EmptyDataset("empty contrastive batch".into()));
    }
    for (name, v) in [("P_s", ps), ("P_t", pt)] {
        if !g.value(v).is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(())
}

fn prepare(g: &mut Graph, p: Var, cfg: &ContrastConfig) -> Var {
    if cfg.normalize {
        g.l2_normalize_rows(p)
    } else {
        p
    }
}

/// Sum of `lse(row) - positive` over rows: one directional InfoNCE sum.
fn info_nce(g: &mut Graph, logits: Var, positive: Var) -> Var {
    let lse = g.log_sum_exp_rows(logits);
    let d = g.sub(lse, positive);
    g.sum(d)
}

/// `L_s2t + L_t2s` with raw dot-product similarity over the batch.
pub fn i2i_loss(g: &mut Graph, ps: Var, pt: Var, cfg: &ContrastConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(g, ps, pt)?;
    let ps = prepare(g, ps, cfg);
    let pt = prepare(g, pt, cfg);
    let sim = g.matmul_nt(ps, pt);
    let s = g.scale(sim, 1.0 / cfg.temperature);
    let diag = g.diag(s);
    let s2t = info_nce(g, s, diag);
    let st = g.transpose(s);
    let t2s = info_nce(g, st, diag);
    Ok(g.add(s2t, t2s))
}

/// New clusters `U = pi^T P` (`K x D`) and the soft assignments `pi`
/// (`n x K`, rows sum to one).
pub fn compute_new_clusters(g: &mut Graph, c: Var, p: Var) -> Result<(Var, Var)> {
    if g.shape(c).1 != g.shape(p).1 {
        return Err(Error::Shape {
            name: "cluster matrix".into(),
            expected: (g.shape(c).0, g.shape(p).1),
            found: g.shape(c),
        });
    }
    let logits = g.matmul_nt(p, c);
    let pi = g.row_softmax(logits);
    let u = g.matmul_tn(pi, p);
    Ok((u, pi))
}

/// Indices of the `k_top` largest `p . u_k`, descending, ties to the lower index.
pub fn top_k_interests(p: &[f64], u: &Matrix, k_top: usize) -> Vec<usize> {
    let scores: Vec<f64> = (0..u.rows()).map(|k| dot(p, u.row(k))).collect();
    let mut order: Vec<usize> = (0..u.rows()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k_top);
    order
}

/// Multi-view clusters `q_i = MLP(concat(u_i1 .. u_ik))`, one row per instance.
/// Without fusion parameters `k_top` must be 1 and `q_i` is the nearest new
/// cluster.
pub fn mv_cluster(
    g: &mut Graph,
    store: &ParamStore,
    p: Var,
    u: Var,
    k_top: usize,
    fusion: Option<&FusionParams>,
) -> Result<Var> {
    let (n, d) = g.shape(p);
    let (k, du) = g.shape(u);
    if d != du {
        return Err(Error::Shape {
            name: "new clusters".into(),
            expected: (k, d),
            found: (k, du),
        });
    }
    if k_top == 0 || k_top > k {
        return Err(Error::config(format!("k_top {k_top} outside 1..={k}")));
    }
    match fusion {
        Some(f) if f.input_dim(store) != k_top * d => {
            return Err(Error::config(format!(
                "fusion input width {} does not match k_top * D = {}",
                f.input_dim(store),
                k_top * d
            )))
        }
        None if k_top != 1 => return Err(Error::config("k_top > 1 requires fusion parameters")),
        _ => {}
    }
    let (pv, uv) = (g.value(p), g.value(u));
    let indices: Vec<usize> = (0..n).flat_map(|i| top_k_interests(pv.row(i), uv, k_top)).collect();
    let selected = g.gather_rows(u, &indices, None);
    let concat = g.reshape(selected, n, k_top * d);
    Ok(match fusion {
        Some(f) => f.forward(g, store, concat),
        None => concat,
    })
}

/// One direction of the cluster objective: each instance against its
/// cross-domain MV cluster (positive) and all cross-domain new clusters.
pub fn i2c_direction(g: &mut Graph, p: Var, q_other: Var, u_other: Var, tau: f64) -> Var {
    let pos = g.row_dot(p, q_other);
    let pos = g.scale(pos, 1.0 / tau);
    let neg = g.matmul_nt(p, u_other);
    let neg = g.scale(neg, 1.0 / tau);
    let logits = g.concat_cols(&[pos, neg]);
    info_nce(g, logits, pos)
}

/// Intermediate values of one space's cluster objective.
#[derive(Clone, Debug)]
pub struct SpaceTerms {
    pub u_source: Var,
    pub u_target: Var,
    pub pi_source: Var,
    pub pi_target: Var,
    pub q_source: Var,
    pub q_target: Var,
    pub s2t: Var,
    pub t2s: Var,
    pub total: Var,
}

/// `e_s2t + e_t2s` for one interest space.
pub fn i2c_space_loss(
    g: &mut Graph,
    store: &ParamStore,
    ps: Var,
    pt: Var,
    space: &InterestSpace,
    cfg: &ContrastConfig,
) -> Result<SpaceTerms> {
    cfg.validate()?;
    check_pair(g, ps, pt)?;
    let ps = prepare(g, ps, cfg);
    let pt = prepare(g, pt, cfg);
    let cs = g.param(store, space.c_source);
    let ct = g.param(store, space.c_target);
    let (u_source, pi_source) = compute_new_clusters(g, cs, ps)?;
    let (u_target, pi_target) = compute_new_clusters(g, ct, pt)?;
    let q_source = mv_cluster(g, store, ps, u_source, space.k_top, space.fusion(Domain::Source))?;
    let q_target = mv_cluster(g, store, pt, u_target, space.k_top, space.fusion(Domain::Target))?;
    let s2t = i2c_direction(g, ps, q_target, u_target, cfg.temperature);
    let t2s = i2c_direction(g, pt, q_source, u_source, cfg.temperature);
    let total = g.add(s2t, t2s);
    Ok(SpaceTerms {
        u_source,
        u_target,
        pi_source,
        pi_target,
        q_source,
        q_target,
        s2t,
        t2s,
        total,
    })
}

/// Sum of the per-space cluster objectives.
pub fn i2c_loss(
    g: &mut Graph,
    store: &ParamStore,
    ps: Var,
    pt: Var,
    spaces: &GranularitySet,
    cfg: &ContrastConfig,
) -> Result<Var> {
    if spaces.is_empty() {
        return Err(Error::config("at least one interest space is required"));
    }
    let mut total: Option<Var> = None;
    for space in &spaces.spaces {
        let e = i2c_space_loss(g, store, ps, pt, space, cfg)?.total;
        total = Some(match total {
            Some(t) => g.add(t, e),
            None => e,
        });
    }
    Ok(total.unwrap())
}

#[derive(Clone, Debug)]
pub struct SslTerms {
    pub i2i: Option<Var>,
    pub i2c: Option<Var>,
    pub total: Var,
}

/// `L_i2i + L_i2c`, each term present only when its flag is set.
#[allow(clippy::too_many_arguments)]
pub fn ssl_loss(
    g: &mut Graph,
    store: &ParamStore,
    ps: Var,
    pt: Var,
    spaces: &GranularitySet,
    cfg: &ContrastConfig,
    flags: &AblationFlags,
) -> Result<SslTerms> {
    if !flags.any_objective() {
        return Err(Error::config("both contrastive objectives are disabled"));
    }
    let i2i = flags.use_i2i.then(|| i2i_loss(g, ps, pt, cfg)).transpose()?;
    let i2c = flags
        .use_i2c
        .then(|| i2c_loss(g, store, ps, pt, spaces, cfg))
        .transpose()?;
    let total = match (i2i, i2c) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!(),
    };
    Ok(SslTerms { i2i, i2c, total })
}

/// Soft assignments of value-only instances `p` (`n x D`) to the clusters of
/// one domain of a space.
pub fn soft_assignments(store: &ParamStore, space: &InterestSpace, domain: Domain, p: &Matrix) -> Matrix {
    let mut g = Graph::new();
    let c = g.param(store, space.clusters(domain));
    let pv = g.constant(p.clone());
    let logits = g.matmul_nt(pv, c);
    let pi = g.row_softmax(logits);
    g.value(pi).clone()
}
