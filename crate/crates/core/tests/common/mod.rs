#![allow(dead_code)]

//! Shared helpers for the integration tests: a loop-based reference
//! evaluator of the contrastive objectives and a finite-difference probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitn::autodiff::Graph;
use sitn::data::{generate_synthetic, Dataset, SyntheticConfig};
use sitn::params::{ParamId, ParamStore};
use sitn::ssl::{AblationFlags, ContrastConfig, FusionParams, GranularitySet, InterestSpace};
use sitn::tensor::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn nll(pos: f64, all: &[f64]) -> f64 {
    let mut z = 0.0;
    for &x in all {
        z += x.exp();
    }
    -(pos.exp() / z).ln()
}

pub fn ref_i2i(ps: &Rows, pt: &Rows, tau: f64) -> f64 {
    let n = ps.len();
    let mut total = 0.0;
    for k in 0..n {
        let s2t: Vec<f64> = (0..n).map(|j| dot(&ps[k], &pt[j]) / tau).collect();
        let t2s: Vec<f64> = (0..n).map(|j| dot(&pt[k], &ps[j]) / tau).collect();
        total += nll(s2t[k], &s2t) + nll(t2s[k], &t2s);
    }
    total
}

/// `(U, pi)` computed one entry at a time.
pub fn ref_new_clusters(c: &Rows, p: &Rows) -> (Rows, Rows) {
    let k = c.len();
    let d = p[0].len();
    let mut pi = Vec::new();
    for pk in p {
        let e: Vec<f64> = c.iter().map(|ci| dot(pk, ci).exp()).collect();
        let z: f64 = e.iter().sum();
        pi.push(e.iter().map(|x| x / z).collect::<Vec<_>>());
    }
    let mut u = vec![vec![0.0; d]; k];
    for (i, row) in u.iter_mut().enumerate() {
        for (pk, w) in p.iter().zip(&pi) {
            for j in 0..d {
                row[j] += w[i] * pk[j];
            }
        }
    }
    (u, pi)
}

pub struct RefLayer {
    pub w: Rows,
    pub b: Vec<f64>,
}

pub fn fusion_layers(store: &ParamStore, f: &FusionParams) -> Vec<RefLayer> {
    f.layers
        .iter()
        .map(|l| RefLayer {
            w: rows(store.get(l.w)),
            b: store.get(l.b).row(0).to_vec(),
        })
        .collect()
}

fn ref_mlp(layers: &[RefLayer], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, l) in layers.iter().enumerate() {
        if li > 0 {
            h = h.iter().map(|v| v.tanh()).collect();
        }
        let out = l.b.len();
        let mut z = l.b.clone();
        for o in 0..out {
            for (i, hv) in h.iter().enumerate() {
                z[o] += hv * l.w[i][o];
            }
        }
        h = z;
    }
    h
}

/// Multi-view cluster per instance: the `k_top` most similar new clusters
/// (stable on ties), concatenated and fused.
pub fn ref_mv(p: &Rows, u: &Rows, k_top: usize, fusion: Option<&[RefLayer]>) -> Rows {
    p.iter()
        .map(|pk| {
            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..k_top {
                let mut best = usize::MAX;
                for i in 0..u.len() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    if best == usize::MAX || dot(pk, &u[i]) > dot(pk, &u[best]) {
                        best = i;
                    }
                }
                chosen.push(best);
            }
            let concat: Vec<f64> = chosen.iter().flat_map(|&i| u[i].clone()).collect();
            match fusion {
                Some(layers) => ref_mlp(layers, &concat),
                None => concat,
            }
        })
        .collect()
}

pub fn ref_direction(p: &Rows, q_other: &Rows, u_other: &Rows, tau: f64) -> f64 {
    let mut total = 0.0;
    for (pk, qk) in p.iter().zip(q_other) {
        let pos = dot(pk, qk) / tau;
        let mut all = vec![pos];
        all.extend(u_other.iter().map(|u| dot(pk, u) / tau));
        total += nll(pos, &all);
    }
    total
}

pub struct RefSpace {
    pub cs: Rows,
    pub ct: Rows,
    pub k_top: usize,
    pub fusion: Option<(Vec<RefLayer>, Vec<RefLayer>)>,
}

pub fn ref_space(store: &ParamStore, sp: &InterestSpace) -> RefSpace {
    RefSpace {
        cs: rows(store.get(sp.c_source)),
        ct: rows(store.get(sp.c_target)),
        k_top: sp.k_top,
        fusion: sp
            .fusion
            .as_ref()
            .map(|(s, t)| (fusion_layers(store, s), fusion_layers(store, t))),
    }
}

pub fn ref_space_loss(ps: &Rows, pt: &Rows, sp: &RefSpace, tau: f64) -> f64 {
    let (us, _) = ref_new_clusters(&sp.cs, ps);
    let (ut, _) = ref_new_clusters(&sp.ct, pt);
    let (fs, ft) = match &sp.fusion {
        Some((s, t)) => (Some(s.as_slice()), Some(t.as_slice())),
        None => (None, None),
    };
    let qs = ref_mv(ps, &us, sp.k_top, fs);
    let qt = ref_mv(pt, &ut, sp.k_top, ft);
    ref_direction(ps, &qt, &ut, tau) + ref_direction(pt, &qs, &us, tau)
}

pub fn ref_i2c(ps: &Rows, pt: &Rows, spaces: &[RefSpace], tau: f64) -> f64 {
    spaces.iter().map(|s| ref_space_loss(ps, pt, s, tau)).sum()
}

pub fn ref_ssl(ps: &Rows, pt: &Rows, spaces: &[RefSpace], tau: f64, flags: &AblationFlags) -> f64 {
    let mut total = 0.0;
    if flags.use_i2i {
        total += ref_i2i(ps, pt, tau);
    }
    if flags.use_i2c {
        total += ref_i2c(ps, pt, spaces, tau);
    }
    total
}

/// A random small setting: instances, interest spaces and their reference copies.
pub struct SmallCase {
    pub ps: Matrix,
    pub pt: Matrix,
    pub store: ParamStore,
    pub spaces: GranularitySet,
    pub cfg: ContrastConfig,
    pub flags: AblationFlags,
}

impl SmallCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=4);
        let l = rng.random_range(1..=2);
        let mut store = ParamStore::new();
        let mut spaces = Vec::new();
        let multi_view = rng.random_bool(0.5);
        for i in 0..l {
            let k = rng.random_range(1..=3);
            let k_top = if multi_view { rng.random_range(1..=k) } else { 1 };
            let sp = InterestSpace::init(&mut store, &format!("space{i}"), k, k_top, d, multi_view, &mut rng).unwrap();
            // larger cluster scale so soft assignments are far from uniform
            for id in [sp.c_source, sp.c_target] {
                for v in store.get_mut(id).data_mut() {
                    *v *= 2.0;
                }
            }
            spaces.push(sp);
        }
        let use_i2i = rng.random_bool(0.7);
        let flags = AblationFlags {
            use_i2i,
            use_i2c: !use_i2i || rng.random_bool(0.7),
            use_mv: multi_view,
            use_mg: l > 1,
        };
        Self {
            ps: Matrix::randn(n, d, 1.0, &mut rng),
            pt: Matrix::randn(n, d, 1.0, &mut rng),
            store,
            spaces: GranularitySet { spaces },
            cfg: ContrastConfig {
                temperature: rng.random_range(0.2..2.0),
                normalize: false,
            },
            flags,
        }
    }

    pub fn ref_spaces(&self) -> Vec<RefSpace> {
        self.spaces.spaces.iter().map(|s| ref_space(&self.store, s)).collect()
    }
}

/// Central difference of `f` in one coordinate of one parameter.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    f: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + h;
    let up = f(store);
    store.get_mut(id).data_mut()[index] = orig - h;
    let down = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    (up - down) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn tiny_dataset(users: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        num_users: users,
        num_groups: 3,
        items_per_group_source: 4,
        items_per_group_target: 4,
        interests_per_user: 1,
        source_len: [3, 6],
        target_len: [3, 5],
        noise: 0.1,
        num_categories: 3,
        max_len: 6,
        seed,
    })
    .unwrap()
    .0
}

pub fn value(g: &Graph, v: sitn::autodiff::Var) -> f64 {
    g.scalar(v)
}

/// Worst absolute deviation between library and reference over `cases`
/// random settings, per quantity.
pub fn oracle_sweep(cases: u64) -> Vec<(&'static str, f64)> {
    use sitn::ssl::{compute_new_clusters, i2c_loss, i2c_space_loss, i2i_loss, mv_cluster, ssl_loss};
    let mut worst = vec![
        ("i2i_loss", 0.0f64),
        ("compute_new_clusters", 0.0),
        ("mv_cluster", 0.0),
        ("i2c_space_loss", 0.0),
        ("i2c_loss", 0.0),
        ("ssl_loss", 0.0),
    ];
    let mut bump = |i: usize, e: f64| worst[i].1 = worst[i].1.max(if e.is_nan() { f64::INFINITY } else { e });
    for seed in 0..cases {
        let case = SmallCase::random(seed);
        let refs = case.ref_spaces();
        let (psr, ptr) = (rows(&case.ps), rows(&case.pt));
        let tau = case.cfg.temperature;
        let mut g = Graph::new();
        let ps = g.constant(case.ps.clone());
        let pt = g.constant(case.pt.clone());

        let l = i2i_loss(&mut g, ps, pt, &case.cfg).unwrap();
        bump(0, (g.scalar(l) - ref_i2i(&psr, &ptr, tau)).abs());

        for (sp, rs) in case.spaces.spaces.iter().zip(&refs) {
            let c = g.param(&case.store, sp.c_source);
            let (u, pi) = compute_new_clusters(&mut g, c, ps).unwrap();
            let (ur, pir) = ref_new_clusters(&rs.cs, &psr);
            let mut e: f64 = 0.0;
            for (a, b) in rows(g.value(u)).iter().flatten().zip(ur.iter().flatten()) {
                e = e.max((a - b).abs());
            }
            for (a, b) in rows(g.value(pi)).iter().flatten().zip(pir.iter().flatten()) {
                e = e.max((a - b).abs());
            }
            bump(1, e);

            let q = mv_cluster(&mut g, &case.store, ps, u, sp.k_top, sp.fusion(sitn::data::Domain::Source)).unwrap();
            let qr = ref_mv(&psr, &ur, rs.k_top, rs.fusion.as_ref().map(|(s, _)| s.as_slice()));
            let mut e: f64 = 0.0;
            for (a, b) in rows(g.value(q)).iter().flatten().zip(qr.iter().flatten()) {
                e = e.max((a - b).abs());
            }
            bump(2, e);

            let t = i2c_space_loss(&mut g, &case.store, ps, pt, sp, &case.cfg).unwrap();
            bump(3, (g.scalar(t.total) - ref_space_loss(&psr, &ptr, rs, tau)).abs());
        }

        let l = i2c_loss(&mut g, &case.store, ps, pt, &case.spaces, &case.cfg).unwrap();
        bump(4, (g.scalar(l) - ref_i2c(&psr, &ptr, &refs, tau)).abs());

        let t = ssl_loss(&mut g, &case.store, ps, pt, &case.spaces, &case.cfg, &case.flags).unwrap();
        bump(5, (g.scalar(t.total) - ref_ssl(&psr, &ptr, &refs, tau, &case.flags)).abs());
    }
    worst
}

pub fn param_group(name: &str) -> &'static str {
    if name.ends_with("_emb") {
        "embeddings"
    } else if name.contains(".layer") {
        "attention"
    } else if name.contains(".c_source") || name.contains(".c_target") {
        "clusters"
    } else if name.contains(".fusion_") {
        "fusion"
    } else if name.starts_with("ctr.") {
        "ctr_head"
    } else {
        "other"
    }
}

pub struct GroupCheck {
    pub group: &'static str,
    pub probes: usize,
    pub worst: f64,
}

/// Compares `grads` with central differences of `loss` on `probes` entries
/// per parameter group, favouring entries with a non-negligible gradient.
pub fn check_groups(
    store: &mut ParamStore,
    grads: &sitn::params::Gradients,
    loss: &dyn Fn(&ParamStore) -> f64,
    probes: usize,
    seed: u64,
) -> Vec<GroupCheck> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_group: std::collections::BTreeMap<&'static str, Vec<(ParamId, usize, f64)>> = Default::default();
    for (id, name, m) in store.iter() {
        let g = grads.get(id);
        for i in 0..m.len() {
            let a = g.map_or(0.0, |g| g.data()[i]);
            by_group.entry(param_group(name)).or_default().push((id, i, a));
        }
    }
    let mut out = Vec::new();
    for (group, mut cands) in by_group {
        cands.shuffle(&mut rng);
        cands.sort_by_key(|c| c.2.abs() < 1e-4);
        let mut worst: f64 = 0.0;
        let take = probes.min(cands.len());
        for &(id, i, a) in &cands[..take] {
            let n = central_difference(store, id, i, 1e-5, loss);
            worst = worst.max(relative_error(a, n, 1e-6));
        }
        out.push(GroupCheck { group, probes: take, worst });
    }
    out
}

pub fn small_model_config() -> sitn::training::ModelConfig {
    let mut mc = sitn::training::ModelConfig::default();
    mc.encoder.dim = 4;
    mc.encoder.heads = 2;
    mc.encoder.max_len = 6;
    mc.interest.cluster_counts = vec![3, 2];
    mc.interest.k_top = 2;
    mc.interest.single_space_k = 3;
    mc.ctr_hidden = 5;
    mc
}

/// Gradient checks of the contrastive objective and the stage-2 loss on a
/// tiny model, one entry per (objective, parameter group).
pub fn gradient_sweep(probes: usize) -> Vec<(String, GroupCheck)> {
    use sitn::data::{build_stage2_examples, pretraining_pairs, PairBatch};
    use sitn::ssl::ssl_loss;
    use sitn::training::{batch_bce, SitnModel, VocabShape};

    let ds = tiny_dataset(12, 3);
    let vocab = VocabShape::of(&ds);
    let mc = small_model_config();
    let flags = AblationFlags::default();
    let cfg = ContrastConfig {
        temperature: 0.5,
        normalize: false,
    };
    let mut out = Vec::new();

    let mut model = SitnModel::for_pretraining(&mc, &vocab, &flags, 5).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).contains(".c_") {
            for v in model.store.get_mut(id).data_mut() {
                *v *= 3.0;
            }
        }
    }
    let pairs = pretraining_pairs(&ds);
    let refs: Vec<_> = pairs.iter().take(6).collect();
    let batch = PairBatch::new(&refs);
    let ssl = |m: &SitnModel| -> (Graph, sitn::autodiff::Var) {
        let mut g = Graph::new();
        let (ps, pt) = m.encode_pairs(&mut g, &batch).unwrap();
        let t = ssl_loss(&mut g, &m.store, ps, pt, m.spaces.as_ref().unwrap(), &cfg, &flags).unwrap();
        (g, t.total)
    };
    let (g, l) = ssl(&model);
    let grads = g.backward(l);
    let shell = model.clone();
    let f = |s: &ParamStore| {
        let m = SitnModel { store: s.clone(), ..shell.clone() };
        let (g, l) = ssl(&m);
        g.scalar(l)
    };
    for c in check_groups(&mut model.store, &grads, &f, probes, 11) {
        out.push(("ssl".to_string(), c));
    }

    let mut model = SitnModel::for_finetuning(&mc, &vocab, 5).unwrap();
    let split = build_stage2_examples(&ds, 2, 0.0, 1).unwrap();
    let ex: Vec<_> = split.train.iter().take(9).collect();
    let (mut g, shell) = (Graph::new(), model.clone());
    let l = batch_bce(&model, &mut g, &ex).unwrap();
    let grads = g.backward(l);
    let f = |s: &ParamStore| {
        let m = SitnModel { store: s.clone(), ..shell.clone() };
        let mut g = Graph::new();
        let l = batch_bce(&m, &mut g, &ex).unwrap();
        g.scalar(l)
    };
    for c in check_groups(&mut model.store, &grads, &f, probes, 12) {
        out.push(("stage2".to_string(), c));
    }
    out
}
