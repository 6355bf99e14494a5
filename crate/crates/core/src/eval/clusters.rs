//! Cluster-level diagnostics: matching trained clusters to planted groups,
//! cross-domain correspondence and 2-D projections.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Planted group of each cluster: the group receiving the most member
/// π-mass, where instance `i` spreads unit weight evenly over its groups.
/// Ties go to the lower group index.
pub fn assign_cluster_groups(pi: &Matrix, user_groups: &[Vec<usize>], num_groups: usize) -> Result<Vec<usize>> {
    if pi.rows() != user_groups.len() {
        return Err(Error::config(format!(
            "{} assignment rows for {} users",
            pi.rows(),
            user_groups.len()
        )));
    }
    let k = pi.cols();
    let mut mass = vec![vec![0.0; num_groups]; k];
    for (i, groups) in user_groups.iter().enumerate() {
        if groups.is_empty() {
            continue;
        }
        let w = 1.0 / groups.len() as f64;
        for &g in groups {
            if g >= num_groups {
                return Err(Error::config(format!("group {g} outside 0..{num_groups}")));
            }
            for c in 0..k {
                mass[c][g] += w * pi.get(i, c);
            }
        }
    }
    Ok(mass
        .iter()
        .map(|row| {
            let mut best = 0;
            for g in 1..num_groups {
                if row[g] > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect())
}

/// Fraction of source clusters whose nearest target cluster (by dot
/// product) carries the same planted group.
pub fn cluster_correspondence(
    source: &Matrix,
    target: &Matrix,
    source_groups: &[usize],
    target_groups: &[usize],
) -> Result<f64> {
    if source.rows() == 0 || source.shape() != target.shape() {
        return Err(Error::Shape {
            name: "target clusters".into(),
            expected: source.shape(),
            found: target.shape(),
        });
    }
    if source_groups.len() != source.rows() || target_groups.len() != target.rows() {
        return Err(Error::config("planted pairing must label every cluster"));
    }
    let mut hits = 0;
    for k in 0..source.rows() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..target.rows() {
            let s = dot(source.row(k), target.row(j));
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        if source_groups[k] == target_groups[best] {
            hits += 1;
        }
    }
    Ok(hits as f64 / source.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projector {
    Pca,
    Tsne,
}

impl FromStr for Projector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Projector::Pca),
            "tsne" | "t-sne" => Ok(Projector::Tsne),
            other => Err(Error::config(format!("unknown projector `{other}` (pca, tsne)"))),
        }
    }
}

impl Projector {
    pub fn as_str(self) -> &'static str {
        match self {
            Projector::Pca => "pca",
            Projector::Tsne => "tsne",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub space: usize,
    pub domain: Domain,
    pub cluster: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionExport {
    pub projector: Projector,
    pub rows: Vec<ProjectionRow>,
}

impl ProjectionExport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("space,domain,cluster,x,y\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.space, r.domain.as_str(), r.cluster, r.x, r.y);
        }
        out
    }
}

/// Joint 2-D embedding of the source and target clusters of one space: rows
/// `0..K_s` are source clusters, the rest target clusters. t-SNE with fewer
/// than three points falls back to PCA.
pub fn export_projection(
    space: usize,
    source: &Matrix,
    target: &Matrix,
    projector: Projector,
) -> Result<ProjectionExport> {
    if source.cols() != target.cols() {
        return Err(Error::config("source and target clusters differ in width"));
    }
    let mut data = source.data().to_vec();
    data.extend_from_slice(target.data());
    let points = Matrix::from_vec(source.rows() + target.rows(), source.cols(), data)?;
    let used = if projector == Projector::Tsne && points.rows() < 3 {
        log::warn!("t-SNE needs at least 3 points, falling back to PCA");
        Projector::Pca
    } else {
        projector
    };
    let coords = match used {
        Projector::Pca => pca_2d(&points),
        Projector::Tsne => tsne_2d(&points, 30.0, 750),
    };
    let rows = (0..points.rows())
        .map(|i| {
            let (domain, cluster) = if i < source.rows() {
                (Domain::Source, i)
            } else {
                (Domain::Target, i - source.rows())
            };
            ProjectionRow {
                space,
                domain,
                cluster,
                x: coords.get(i, 0),
                y: coords.get(i, 1),
            }
        })
        .collect();
    Ok(ProjectionExport { projector: used, rows })
}

/// Projection of centred points onto the two leading covariance
/// eigenvectors, each sign-fixed so its largest-magnitude entry is positive.
pub fn pca_2d(points: &Matrix) -> Matrix {
    let (n, d) = points.shape();
    let mut centred = points.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| points.get(r, c)).sum::<f64>() / n.max(1) as f64;
        for r in 0..n {
            centred.set(r, c, points.get(r, c) - mean);
        }
    }
    let cov = centred.matmul_tn(&centred);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Matrix::zeros(n, 2);
    for (slot, &e) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = (0..d).map(|i| eig.eigenvectors[(i, e)]).collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            out.set(r, slot, dot(centred.row(r), &v));
        }
    }
    out
}

/// Exact t-SNE initialised from scaled PCA coordinates; fully deterministic.
pub fn tsne_2d(points: &Matrix, perplexity: f64, iterations: usize) -> Matrix {
    let n = points.rows();
    let perplexity = perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d2[i * n + j] = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
        }
    }
    // conditional affinities with per-point bandwidth matched to the perplexity
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-beta * d2[i * n + j]).exp();
                    p[i * n + j] = w;
                    sum += w;
                    weighted += w * d2[i * n + j];
                }
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-6 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let init = pca_2d(points);
    let scale = init.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12) / (n as f64).sqrt();
    let mut y: Vec<f64> = init.data().iter().map(|x| x / scale * 1e-2).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let lr = (n as f64 / 12.0).max(50.0);
    let mut grad = vec![0.0; 2 * n];
    let mut num = vec![0.0; n * n];
    for it in 0..iterations {
        let exaggeration = if it < 100 { 12.0 } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dx = y[2 * i] - y[2 * j];
                    let dy = y[2 * i + 1] - y[2 * j + 1];
                    let q = 1.0 / (1.0 + dx * dx + dy * dy);
                    num[i * n + j] = q;
                    total += q;
                }
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let q = (num[i * n + j] / total).max(1e-12);
                    let mult = 4.0 * (exaggeration * pj[i * n + j] - q) * num[i * n + j];
                    grad[2 * i] += mult * (y[2 * i] - y[2 * j]);
                    grad[2 * i + 1] += mult * (y[2 * i + 1] - y[2 * j + 1]);
                }
            }
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            velocity[k] = momentum * velocity[k] - lr * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    Matrix::from_vec(n, 2, y).expect("2 columns")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn permuted_copy_matches_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs = Matrix::randn(8, 16, 1.0, &mut rng);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| cs.row(p).to_vec()).collect();
        let ct = Matrix::from_rows(&rows);
        let sg: Vec<usize> = (0..8).collect();
        let tg: Vec<usize> = perm.to_vec();
        assert_eq!(cluster_correspondence(&cs, &ct, &sg, &tg).unwrap(), 1.0);
    }

    #[test]
    fn single_cluster_group_assignment() {
        let pi = Matrix::filled(4, 1, 1.0);
        let groups = vec![vec![1], vec![2, 1], vec![1], vec![0]];
        let g = assign_cluster_groups(&pi, &groups, 3).unwrap();
        assert_eq!(g, vec![1]);
    }

    #[test]
    fn pca_preserves_planar_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = Matrix::randn(2, 5, 1.0, &mut rng);
        let coeff = Matrix::randn(6, 2, 1.0, &mut rng);
        let pts = coeff.matmul(&basis);
        let proj = pca_2d(&pts);
        for i in 0..6 {
            for j in 0..6 {
                let d = |m: &Matrix| -> f64 {
                    m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                };
                assert!((d(&pts) - d(&proj)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tsne_falls_back_for_two_points_and_is_deterministic() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]);
        let e = export_projection(0, &a, &b, Projector::Tsne).unwrap();
        assert_eq!(e.projector, Projector::Pca);
        assert_eq!(e.rows.len(), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Matrix::randn(5, 4, 1.0, &mut rng);
        let t = Matrix::randn(5, 4, 1.0, &mut rng);
        let x = export_projection(1, &s, &t, Projector::Tsne).unwrap();
        let y = export_projection(1, &s, &t, Projector::Tsne).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.rows.len(), 10);
        assert!(x.rows.iter().all(|r| r.x.is_finite() && r.y.is_finite()));
        assert!(x.to_csv().starts_with("space,domain,cluster,x,y\n"));
    }
}
