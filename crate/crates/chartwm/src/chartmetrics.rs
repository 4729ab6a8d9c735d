//! Chart-quality metrics: how faithfully a latent embedding reproduces the
//! spatial layout of the ground-truth positions it was learned from.
//!
//! Four numbers summarize a chart, all computed from pairwise distances:
//! trustworthiness and continuity (rank-based, local, optimal at 1), Kruskal
//! stress (optimally scaled global distance residual, optimal at 0), and the
//! Rajski distance between discretized distance distributions (information-
//! theoretic, optimal at 0). A closed-form 2-D Procrustes alignment and a
//! top-2 PCA projection support plotting charts over ground truth.
//!
//! Everything here is deterministic: distance ties are broken by point index,
//! and no operation draws randomness.

use std::path::Path;

use crate::dataset::atomic_write;
use crate::error::{DataError, MetricsError};
use crate::linalg::sym_eig;
use crate::tensor::Tensor;

/// The four reported metrics plus the resolution knobs they were computed
/// with, so numbers stay comparable across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartReport {
    /// Trustworthiness: 1 − penalty for latent neighbors that are not true
    /// spatial neighbors. In [0, 1], optimal at 1.
    pub tw: f64,
    /// Continuity: 1 − penalty for true spatial neighbors missing from the
    /// latent neighborhood. In [0, 1], optimal at 1.
    pub ct: f64,
    /// Optimally scaled Kruskal stress; ≥ 0, optimal at 0.
    pub ks: f64,
    /// Rajski distance between binned distance distributions; in [0, 1],
    /// optimal at 0.
    pub rd: f64,
    /// Neighborhood size used for tw/ct.
    pub k: usize,
    /// Histogram resolution used for rd.
    pub bins: usize,
}

/// Default neighborhood size: 5% of the point count, at least 1, and small
/// enough to satisfy `k < n/2`.
pub fn default_k(n: usize) -> usize {
    let k = (0.05 * n as f64).ceil() as usize;
    k.clamp(1, ((n.max(3) - 1) / 2).max(1))
}

fn check_pair(x: &Tensor, z: &Tensor, metric: &str, need: usize) -> Result<usize, MetricsError> {
    let (nx, _) = x.dims2();
    let (nz, _) = z.dims2();
    if nx != nz {
        return Err(MetricsError::LengthMismatch { a: nx, b: nz });
    }
    if nx < need {
        return Err(MetricsError::TooFewPoints { metric: metric.into(), need, got: nx });
    }
    Ok(nx)
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let (_, p) = t.dims2();
    &t.data()[i * p..(i + 1) * p]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Full n×n distance matrix (diagonal zero).
fn dist_matrix(t: &Tensor) -> Vec<f64> {
    let (n, _) = t.dims2();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(row(t, i), row(t, j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Condensed upper-triangle distances in (i < j) row-major order.
fn pair_distances(t: &Tensor) -> Vec<f64> {
    let (n, _) = t.dims2();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(dist(row(t, i), row(t, j)));
        }
    }
    out
}

/// For each point, the other points ordered by increasing distance, ties
/// broken by index. `order[i]` lists n−1 neighbor indices; the neighbor at
/// position r has rank r+1.
fn neighbor_orders(d: &[f64], n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| {
                d[i * n + a].partial_cmp(&d[i * n + b]).unwrap().then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

/// Shared rank-penalty core. Charges, for each point, every neighbor that is
/// in the k-neighborhood under `probe` but not under `reference`, by how far
/// down the `reference` ranking it actually sits. Trustworthiness is
/// `rank_core(X, Z, k)`; continuity exchanges the roles.
fn rank_core(reference: &Tensor, probe: &Tensor, k: usize) -> Result<f64, MetricsError> {
    let n = check_pair(reference, probe, "trustworthiness/continuity", 3)?;
    if k < 1 || 2 * k >= n {
        return Err(MetricsError::BadNeighborhood { k, max: (n - 1) / 2, n });
    }
    let dr = dist_matrix(reference);
    let dp = dist_matrix(probe);
    let ord_r = neighbor_orders(&dr, n);
    let ord_p = neighbor_orders(&dp, n);

    let mut penalty = 0.0;
    for i in 0..n {
        // rank of j under the reference ordering, 1-based
        let mut rank = vec![0usize; n];
        for (pos, &j) in ord_r[i].iter().enumerate() {
            rank[j] = pos + 1;
        }
        let ref_nn: std::collections::HashSet<usize> =
            ord_r[i][..k].iter().copied().collect();
        for &j in &ord_p[i][..k] {
            if !ref_nn.contains(&j) {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let norm = (n * k * (2 * n - 3 * k - 1)) as f64;
    Ok(1.0 - 2.0 * penalty / norm)
}

/// Trustworthiness of embedding `z` against ground truth `x` at neighborhood
/// size `k`: 1 minus the normalized rank penalty of latent neighbors that are
/// not spatial neighbors. Rank-based, so invariant under any similarity
/// transform of either point set.
pub fn trustworthiness(x: &Tensor, z: &Tensor, k: usize) -> Result<f64, MetricsError> {
    rank_core(x, z, k)
}

/// Continuity: the symmetric counterpart of [`trustworthiness`], penalizing
/// true spatial neighbors missing from the latent neighborhood, each by its
/// latent rank.
pub fn continuity(x: &Tensor, z: &Tensor, k: usize) -> Result<f64, MetricsError> {
    rank_core(z, x, k)
}

/// Kruskal stress with the analytically optimal scaling
/// `β* = Σ d*·d / Σ d²` absorbed:
/// `KS = sqrt( Σ (d* − β*·d)² / Σ d*² )` over unordered pairs.
pub fn kruskal_stress(x: &Tensor, z: &Tensor) -> Result<f64, MetricsError> {
    let _ = check_pair(x, z, "kruskal_stress", 2)?;
    let ds = pair_distances(x);
    let d = pair_distances(z);
    let denom: f64 = ds.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(MetricsError::Degenerate {
            metric: "kruskal_stress".into(),
            reason: "all ground-truth distances are zero".into(),
        });
    }
    let dd: f64 = d.iter().map(|v| v * v).sum();
    let beta = if dd > 0.0 {
        ds.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / dd
    } else {
        0.0
    };
    let resid: f64 = ds.iter().zip(&d).map(|(a, b)| (a - beta * b).powi(2)).sum();
    Ok((resid / denom).sqrt())
}

fn entropy_nats(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Rajski distance between the two pairwise-distance distributions:
/// normalize each distance set to [0, 1] by its maximum, accumulate the
/// joint histogram of `(d*_ij, d_ij)` over `bins × bins` cells, and return
/// `1 − I(U;V) / H(U,V)` with entropies in nats. 0 means the distance sets
/// determine each other exactly; 1 means they are independent.
pub fn rajski_distance(x: &Tensor, z: &Tensor, bins: usize) -> Result<f64, MetricsError> {
    let _ = check_pair(x, z, "rajski_distance", 3)?;
    if bins < 2 {
        return Err(MetricsError::Degenerate {
            metric: "rajski_distance".into(),
            reason: format!("need at least 2 bins, got {bins}"),
        });
    }
    let ds = pair_distances(x);
    let d = pair_distances(z);
    let max_s = ds.iter().cloned().fold(0.0f64, f64::max);
    let min_s = ds.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_s == 0.0 || (max_s - min_s).abs() <= 1e-12 * max_s {
        return Err(MetricsError::Degenerate {
            metric: "rajski_distance".into(),
            reason: "all ground-truth distances are equal".into(),
        });
    }
    let max_d = d.iter().cloned().fold(0.0f64, f64::max);
    let bin = |v: f64, max: f64| -> usize {
        if max == 0.0 {
            0
        } else {
            (((v / max) * bins as f64) as usize).min(bins - 1)
        }
    };
    let mut joint = vec![0.0f64; bins * bins];
    for (a, b) in ds.iter().zip(&d) {
        joint[bin(*a, max_s) * bins + bin(*b, max_d)] += 1.0;
    }
    let total = ds.len() as f64;
    for c in joint.iter_mut() {
        *c /= total;
    }
    let mut pu = vec![0.0f64; bins];
    let mut pv = vec![0.0f64; bins];
    for u in 0..bins {
        for v in 0..bins {
            pu[u] += joint[u * bins + v];
            pv[v] += joint[u * bins + v];
        }
    }
    let h_joint = entropy_nats(joint.iter().copied());
    let mi = entropy_nats(pu.iter().copied()) + entropy_nats(pv.iter().copied()) - h_joint;
    // X is non-degenerate, so H(U) > 0 and therefore H(U,V) > 0.
    Ok((1.0 - mi / h_joint).clamp(0.0, 1.0))
}

/// A positive similarity transform `p ↦ s·R·p + t` with `det R = +1`.
#[derive(Debug, Clone, Copy)]
pub struct ProcrustesTransform {
    pub scale: f64,
    /// Row-major 2×2 rotation.
    pub rot: [[f64; 2]; 2],
    pub trans: [f64; 2],
}

impl ProcrustesTransform {
    pub fn identity() -> Self {
        ProcrustesTransform { scale: 1.0, rot: [[1.0, 0.0], [0.0, 1.0]], trans: [0.0, 0.0] }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.scale * (self.rot[0][0] * p[0] + self.rot[0][1] * p[1]) + self.trans[0],
            self.scale * (self.rot[1][0] * p[0] + self.rot[1][1] * p[1]) + self.trans[1],
        ]
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.rot[1][0].atan2(self.rot[0][0])
    }
}

/// Align `z2` onto `x2` (both n×2) with the closed-form optimal positive
/// similarity transform, minimizing `Σ‖s·R·z + t − x‖²` with reflections
/// excluded. Returns the aligned points, the transform, and the objective
/// value at the optimum.
pub fn procrustes_align(
    z2: &Tensor,
    x2: &Tensor,
) -> Result<(Tensor, ProcrustesTransform, f64), MetricsError> {
    let n = check_pair(x2, z2, "procrustes_align", 2)?;
    let (_, pz) = z2.dims2();
    let (_, px) = x2.dims2();
    if pz != 2 || px != 2 {
        return Err(MetricsError::Degenerate {
            metric: "procrustes_align".into(),
            reason: format!("point sets must be 2-D, got {pz} and {px} columns"),
        });
    }
    let nf = n as f64;
    let mut zc = [0.0; 2];
    let mut xc = [0.0; 2];
    for i in 0..n {
        let (zr, xr) = (row(z2, i), row(x2, i));
        zc[0] += zr[0] / nf;
        zc[1] += zr[1] / nf;
        xc[0] += xr[0] / nf;
        xc[1] += xr[1] / nf;
    }
    // Cross-covariance A = Σ (x−x̄)(z−z̄)ᵀ and the z energy.
    let mut a = [[0.0f64; 2]; 2];
    let mut zz = 0.0;
    for i in 0..n {
        let (zr, xr) = (row(z2, i), row(x2, i));
        let (dz0, dz1) = (zr[0] - zc[0], zr[1] - zc[1]);
        let (dx0, dx1) = (xr[0] - xc[0], xr[1] - xc[1]);
        a[0][0] += dx0 * dz0;
        a[0][1] += dx0 * dz1;
        a[1][0] += dx1 * dz0;
        a[1][1] += dx1 * dz1;
        zz += dz0 * dz0 + dz1 * dz1;
    }
    if zz == 0.0 {
        return Err(MetricsError::Degenerate {
            metric: "procrustes_align".into(),
            reason: "zero-variance chart points cannot be aligned".into(),
        });
    }
    // For R(θ), tr(R·Aᵀ) = cosθ·(a00+a11) + sinθ·(a10−a01); maximize over θ.
    let c_term = a[0][0] + a[1][1];
    let s_term = a[1][0] - a[0][1];
    let mag = (c_term * c_term + s_term * s_term).sqrt();
    let (cos_t, sin_t) = if mag > 0.0 { (c_term / mag, s_term / mag) } else { (1.0, 0.0) };
    let scale = if mag > 0.0 { mag / zz } else { 1.0 };
    let rot = [[cos_t, -sin_t], [sin_t, cos_t]];
    let tf = ProcrustesTransform {
        scale,
        rot,
        trans: [
            xc[0] - scale * (rot[0][0] * zc[0] + rot[0][1] * zc[1]),
            xc[1] - scale * (rot[1][0] * zc[0] + rot[1][1] * zc[1]),
        ],
    };
    let mut aligned = Tensor::zeros(&[n, 2]);
    let mut objective = 0.0;
    for i in 0..n {
        let zr = row(z2, i);
        let p = tf.apply([zr[0], zr[1]]);
        aligned.set2(i, 0, p[0]);
        aligned.set2(i, 1, p[1]);
        let xr = row(x2, i);
        objective += (p[0] - xr[0]).powi(2) + (p[1] - xr[1]).powi(2);
    }
    Ok((aligned, tf, objective))
}

/// A fitted top-2 principal subspace: the data mean and two orthonormal
/// direction vectors, reusable to project points the fit never saw (e.g.
/// predicted rollout latents into the chart of their trajectory).
#[derive(Debug, Clone)]
pub struct Pca2Basis {
    pub mean: Vec<f64>,
    /// Per input dimension, its loading on (component 1, component 2).
    pub components: Vec<[f64; 2]>,
}

impl Pca2Basis {
    pub fn project_row(&self, r: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (a, slot) in self.components.iter().enumerate() {
            let centered = r[a] - self.mean[a];
            out[0] += centered * slot[0];
            out[1] += centered * slot[1];
        }
        out
    }

    pub fn project(&self, z: &Tensor) -> Tensor {
        let (n, _) = z.dims2();
        let mut out = Tensor::zeros(&[n, 2]);
        for i in 0..n {
            let p = self.project_row(row(z, i));
            out.set2(i, 0, p[0]);
            out.set2(i, 1, p[1]);
        }
        out
    }
}

/// Fit the top-2 principal components of `z` (n×D, D ≥ 2): descending
/// eigenvalue order, each component's sign fixed by making its largest-
/// magnitude loading positive.
pub fn pca2_fit(z: &Tensor) -> Result<Pca2Basis, MetricsError> {
    let (n, d) = z.dims2();
    if n < 3 {
        return Err(MetricsError::TooFewPoints { metric: "pca2".into(), need: 3, got: n });
    }
    if d < 2 {
        return Err(MetricsError::Degenerate {
            metric: "pca2".into(),
            reason: format!("need at least 2 latent dimensions, got {d}"),
        });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(row(z, i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = Tensor::zeros(&[d, d]);
    for i in 0..n {
        let r = row(z, i);
        for a in 0..d {
            for b in a..d {
                let v = cov.at2(a, b) + (r[a] - mean[a]) * (r[b] - mean[b]) / (n as f64 - 1.0);
                cov.set2(a, b, v);
                cov.set2(b, a, v);
            }
        }
    }
    if cov.data().iter().all(|&v| v == 0.0) {
        return Err(MetricsError::Degenerate {
            metric: "pca2".into(),
            reason: "zero covariance: all points coincide".into(),
        });
    }
    let (_, vecs) = sym_eig(&cov).map_err(|e| MetricsError::Degenerate {
        metric: "pca2".into(),
        reason: e.to_string(),
    })?;
    // Top-2 eigenvector columns with the sign convention applied.
    let mut comp = vec![[0.0f64; 2]; d];
    for c in 0..2 {
        let mut best = 0usize;
        for r in 0..d {
            if vecs.at2(r, c).abs() > vecs.at2(best, c).abs() {
                best = r;
            }
        }
        let sign = if vecs.at2(best, c) < 0.0 { -1.0 } else { 1.0 };
        for (r, slot) in comp.iter_mut().enumerate() {
            slot[c] = sign * vecs.at2(r, c);
        }
    }
    Ok(Pca2Basis { mean, components: comp })
}

/// Project `z` (n×D, D ≥ 2) onto the top-2 principal components of its
/// sample covariance.
pub fn pca2(z: &Tensor) -> Result<Tensor, MetricsError> {
    Ok(pca2_fit(z)?.project(z))
}

/// All four metrics for one (ground truth, embedding) pair.
pub fn chart_report(
    x: &Tensor,
    z: &Tensor,
    k: usize,
    bins: usize,
) -> Result<ChartReport, MetricsError> {
    Ok(ChartReport {
        tw: trustworthiness(x, z, k)?,
        ct: continuity(x, z, k)?,
        ks: kruskal_stress(x, z)?,
        rd: rajski_distance(x, z, bins)?,
        k,
        bins,
    })
}

/// One evaluated trajectory for the metrics CSV.
#[derive(Debug, Clone)]
pub struct TrajMetrics {
    pub traj_id: usize,
    pub n: usize,
    pub report: ChartReport,
}

pub const METRICS_CSV_HEADER: &str = "traj_id,n,k,bins,tw,ct,ks,rd";

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let std = if n > 1.0 {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Render the per-trajectory metrics CSV: one row per trajectory, then a
/// `mean` row and a `std` (sample standard deviation) row summarizing the
/// four metric columns across trajectories.
pub fn metrics_csv(rows: &[TrajMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.traj_id, r.n, r.report.k, r.report.bins, r.report.tw, r.report.ct, r.report.ks,
            r.report.rd
        ));
    }
    if !rows.is_empty() {
        let total_n: usize = rows.iter().map(|r| r.n).sum();
        let (k, bins) = (rows[0].report.k, rows[0].report.bins);
        let pick = |f: fn(&ChartReport) -> f64| rows.iter().map(move |r| f(&r.report));
        let cols: [fn(&ChartReport) -> f64; 4] =
            [|r| r.tw, |r| r.ct, |r| r.ks, |r| r.rd];
        let stats: Vec<(f64, f64)> = cols.iter().map(|&f| mean_std(pick(f))).collect();
        out.push_str(&format!(
            "mean,{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            total_n, k, bins, stats[0].0, stats[1].0, stats[2].0, stats[3].0
        ));
        out.push_str(&format!(
            "std,{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            total_n, k, bins, stats[0].1, stats[1].1, stats[2].1, stats[3].1
        ));
    }
    out
}

/// Write the metrics CSV atomically.
pub fn write_metrics_csv(path: &Path, rows: &[TrajMetrics]) -> Result<(), DataError> {
    atomic_write(path, metrics_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "metrics-test", 0);
        let mut t = Tensor::zeros(&[n, d]);
        t.fill_uniform(&mut rng, -1.0, 1.0);
        t
    }

    #[test]
    fn identical_embeddings_score_perfect_tw_and_ct() {
        let x = random_points(12, 2, 1);
        assert_eq!(trustworthiness(&x, &x, 3).unwrap(), 1.0, "TW of X against X");
        assert_eq!(continuity(&x, &x, 3).unwrap(), 1.0, "CT of X against X");
    }

    #[test]
    fn similarity_transforms_preserve_perfect_tw() {
        // Ranks are invariant under scaling, rotation, and translation.
        let x = random_points(10, 2, 2);
        let mut z = Tensor::zeros(&[10, 2]);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        for i in 0..10 {
            let r = row(&x, i);
            z.set2(i, 0, 3.0 * (c * r[0] - s * r[1]) + 7.0);
            z.set2(i, 1, 3.0 * (s * r[0] + c * r[1]) - 2.0);
        }
        assert_eq!(trustworthiness(&x, &z, 2).unwrap(), 1.0);
        assert_eq!(continuity(&x, &z, 2).unwrap(), 1.0);
    }

    /// Independent oracle: build rank tables by counting, for each ordered
    /// pair (i, j), how many other points sit strictly closer to i (or tie
    /// with a smaller index), then apply the penalty formula literally.
    fn brute_force_tw(x: &Tensor, z: &Tensor, k: usize) -> f64 {
        let (n, _) = x.dims2();
        let rank_of = |t: &Tensor, i: usize, j: usize| -> usize {
            let dij = dist(row(t, i), row(t, j));
            let mut r = 1;
            for m in 0..n {
                if m == i || m == j {
                    continue;
                }
                let dim = dist(row(t, i), row(t, m));
                if dim < dij || (dim == dij && m < j) {
                    r += 1;
                }
            }
            r
        };
        let mut penalty = 0.0;
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    continue;
                }
                let in_z = rank_of(z, i, j) <= k;
                let rx = rank_of(x, i, j);
                if in_z && rx > k {
                    penalty += (rx - k) as f64;
                }
            }
        }
        1.0 - 2.0 * penalty / (n * k * (2 * n - 3 * k - 1)) as f64
    }

    #[test]
    fn tw_and_ct_match_the_exhaustive_rank_oracle_on_eight_points() {
        let x = random_points(8, 2, 3);
        let z = random_points(8, 4, 4);
        let tw = trustworthiness(&x, &z, 2).unwrap();
        let ct = continuity(&x, &z, 2).unwrap();
        assert_eq!(tw, brute_force_tw(&x, &z, 2), "TW vs counting oracle");
        assert_eq!(ct, brute_force_tw(&z, &x, 2), "CT vs counting oracle with roles swapped");
        assert!(tw < 1.0 && ct < 1.0, "random embeddings should not be perfect");
    }

    #[test]
    fn continuity_is_trustworthiness_with_arguments_exchanged() {
        let x = random_points(9, 3, 5);
        let z = random_points(9, 5, 6);
        assert_eq!(continuity(&x, &z, 2).unwrap(), trustworthiness(&z, &x, 2).unwrap());
    }

    #[test]
    fn neighborhood_size_bounds_are_enforced() {
        let x = random_points(8, 2, 7);
        assert!(matches!(
            trustworthiness(&x, &x, 0),
            Err(MetricsError::BadNeighborhood { .. })
        ));
        assert!(
            matches!(trustworthiness(&x, &x, 4), Err(MetricsError::BadNeighborhood { .. })),
            "k = 4 violates k < n/2 for n = 8"
        );
        assert!(trustworthiness(&x, &x, 3).is_ok());
    }

    #[test]
    fn tw_is_invariant_under_monotone_distance_transforms() {
        let x = random_points(11, 2, 8);
        let z = random_points(11, 4, 9);
        let base = trustworthiness(&x, &z, 2).unwrap();
        let mut scaled = z.clone();
        for v in scaled.data_mut() {
            *v = *v * 37.0 - 4.0;
        }
        assert_eq!(
            trustworthiness(&x, &scaled, 2).unwrap(),
            base,
            "rank metrics must ignore affine rescaling of the embedding"
        );
    }

    #[test]
    fn kruskal_stress_vanishes_for_scaled_copies() {
        let x = random_points(12, 2, 10);
        for c in [0.1, 1.0, 10.0] {
            let mut z = x.clone();
            for v in z.data_mut() {
                *v *= c;
            }
            let ks = kruskal_stress(&x, &z).unwrap();
            assert!(ks < 1e-12, "optimal scaling must absorb c = {c}, got {ks}");
        }
    }

    #[test]
    fn kruskal_stress_ignores_rigid_rotations() {
        let x = random_points(9, 2, 11);
        let z = random_points(9, 2, 12);
        let base = kruskal_stress(&x, &z).unwrap();
        let (c, s) = (1.1f64.cos(), 1.1f64.sin());
        let mut zr = Tensor::zeros(&[9, 2]);
        for i in 0..9 {
            let r = row(&z, i);
            zr.set2(i, 0, c * r[0] - s * r[1] + 5.0);
            zr.set2(i, 1, s * r[0] + c * r[1] - 3.0);
        }
        assert!(
            (kruskal_stress(&x, &zr).unwrap() - base).abs() < 1e-12,
            "distances are rotation/translation invariant"
        );
    }

    #[test]
    fn kruskal_stress_matches_direct_pair_summation_on_five_points() {
        let x = random_points(5, 3, 13);
        let z = random_points(5, 4, 14);
        // Oracle: the formula evaluated with explicit loops.
        let mut ds = Vec::new();
        let mut d = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                ds.push(dist(row(&x, i), row(&x, j)));
                d.push(dist(row(&z, i), row(&z, j)));
            }
        }
        let beta: f64 = ds.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()
            / d.iter().map(|v| v * v).sum::<f64>();
        let expect = (ds
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - beta * b).powi(2))
            .sum::<f64>()
            / ds.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
        let got = kruskal_stress(&x, &z).unwrap();
        assert!((got - expect).abs() < 1e-14, "got {got}, oracle {expect}");
    }

    #[test]
    fn kruskal_stress_rejects_coincident_ground_truth() {
        let x = Tensor::zeros(&[4, 2]);
        let z = random_points(4, 2, 15);
        assert!(matches!(kruskal_stress(&x, &z), Err(MetricsError::Degenerate { .. })));
        // The mirrored degeneracy (collapsed embedding) is a valid worst case.
        let ks = kruskal_stress(&z, &x).unwrap();
        assert!((ks - 1.0).abs() < 1e-12, "collapsed embedding scores stress 1, got {ks}");
    }

    #[test]
    fn rajski_distance_is_zero_for_identical_sets_and_one_for_collapse() {
        let x = random_points(15, 2, 16);
        assert_eq!(rajski_distance(&x, &x, 50).unwrap(), 0.0, "perfect dependence");
        let z = Tensor::zeros(&[15, 3]);
        let rd = rajski_distance(&x, &z, 50).unwrap();
        assert_eq!(rd, 1.0, "a collapsed embedding carries no information: got {rd}");
    }

    #[test]
    fn rajski_distance_matches_an_independent_histogram_oracle() {
        let x = random_points(20, 2, 17);
        let z = random_points(20, 6, 18);
        let bins = 8;
        // Oracle: recompute the joint histogram with explicit nested loops
        // and entropies accumulated in a different order (per-cell).
        let mut ds = Vec::new();
        let mut d = Vec::new();
        for i in 0..20 {
            for j in i + 1..20 {
                ds.push(dist(row(&x, i), row(&x, j)));
                d.push(dist(row(&z, i), row(&z, j)));
            }
        }
        let (ms, md) = (
            ds.iter().cloned().fold(0.0f64, f64::max),
            d.iter().cloned().fold(0.0f64, f64::max),
        );
        let mut joint = vec![vec![0.0f64; bins]; bins];
        for (a, b) in ds.iter().zip(&d) {
            let u = (((a / ms) * bins as f64) as usize).min(bins - 1);
            let v = (((b / md) * bins as f64) as usize).min(bins - 1);
            joint[u][v] += 1.0 / ds.len() as f64;
        }
        let mut h_joint = 0.0;
        let mut hu = 0.0;
        let mut hv = 0.0;
        for u in 0..bins {
            let pu: f64 = joint[u].iter().sum();
            if pu > 0.0 {
                hu -= pu * pu.ln();
            }
            let pv: f64 = (0..bins).map(|r| joint[r][u]).sum();
            if pv > 0.0 {
                hv -= pv * pv.ln();
            }
            for v in 0..bins {
                if joint[u][v] > 0.0 {
                    h_joint -= joint[u][v] * joint[u][v].ln();
                }
            }
        }
        let expect = 1.0 - (hu + hv - h_joint) / h_joint;
        let got = rajski_distance(&x, &z, bins).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}, oracle {expect}");
    }

    #[test]
    fn rajski_distance_is_symmetric_and_bounded() {
        for seed in 0..25 {
            let x = random_points(10, 2, 100 + seed);
            let z = random_points(10, 3, 200 + seed);
            let ab = rajski_distance(&x, &z, 10).unwrap();
            let ba = rajski_distance(&z, &x, 10).unwrap();
            assert!((0.0..=1.0).contains(&ab), "RD out of range: {ab}");
            assert!((ab - ba).abs() < 1e-12, "RD must be symmetric: {ab} vs {ba}");
        }
    }

    #[test]
    fn rajski_distance_rejects_degenerate_ground_truth() {
        // Four corners of a unit square's diagonal pair: all six pairwise
        // distances equal is impossible in the plane, so use three points of
        // an equilateral triangle (all three distances equal).
        let mut x = Tensor::zeros(&[3, 2]);
        x.set2(0, 0, 0.0);
        x.set2(1, 0, 1.0);
        x.set2(2, 0, 0.5);
        x.set2(2, 1, 3f64.sqrt() / 2.0);
        let z = random_points(3, 2, 19);
        assert!(matches!(
            rajski_distance(&x, &z, 10),
            Err(MetricsError::Degenerate { .. })
        ));
    }

    fn planted_similarity(z: &Tensor, s: f64, theta: f64, t: [f64; 2]) -> Tensor {
        let (n, _) = z.dims2();
        let (c, sn) = (theta.cos(), theta.sin());
        let mut x = Tensor::zeros(&[n, 2]);
        for i in 0..n {
            let r = row(z, i);
            x.set2(i, 0, s * (c * r[0] - sn * r[1]) + t[0]);
            x.set2(i, 1, s * (sn * r[0] + c * r[1]) + t[1]);
        }
        x
    }

    #[test]
    fn procrustes_recovers_a_planted_similarity_exactly() {
        let z = random_points(14, 2, 20);
        let theta = std::f64::consts::PI / 6.0;
        let x = planted_similarity(&z, 2.0, theta, [1.0, -3.0]);
        let (aligned, tf, resid) = procrustes_align(&z, &x).unwrap();
        assert!(resid < 1e-10, "exact similarity must align exactly, residual {resid}");
        assert!((tf.scale - 2.0).abs() < 1e-9, "scale {}", tf.scale);
        assert!((tf.angle() - theta).abs() < 1e-9, "angle {}", tf.angle());
        assert!((tf.trans[0] - 1.0).abs() < 1e-9 && (tf.trans[1] + 3.0).abs() < 1e-9);
        assert!(aligned.max_abs_diff(&x) < 1e-9);
        let det = tf.rot[0][0] * tf.rot[1][1] - tf.rot[0][1] * tf.rot[1][0];
        assert!((det - 1.0).abs() < 1e-9, "rotation must be proper");
    }

    #[test]
    fn procrustes_on_identical_sets_is_the_identity() {
        let z = random_points(9, 2, 21);
        let (_, tf, resid) = procrustes_align(&z, &z).unwrap();
        assert!(resid < 1e-18);
        assert!((tf.scale - 1.0).abs() < 1e-12);
        assert!(tf.angle().abs() < 1e-12);
        assert!(tf.trans[0].abs() < 1e-12 && tf.trans[1].abs() < 1e-12);
    }

    #[test]
    fn procrustes_beats_ten_thousand_random_candidates_on_noisy_data() {
        let z = random_points(12, 2, 22);
        let mut x = planted_similarity(&z, 1.5, 0.8, [0.5, 0.25]);
        let mut noise = stream(23, "metrics-test", 0);
        for v in x.data_mut() {
            *v += 0.01 * noise.gen_range(-1.0..1.0);
        }
        let (_, tf, resid) = procrustes_align(&z, &x).unwrap();

        // The returned residual must equal the objective evaluated directly.
        let mut direct = 0.0;
        for i in 0..12 {
            let r = row(&z, i);
            let p = tf.apply([r[0], r[1]]);
            let xr = row(&x, i);
            direct += (p[0] - xr[0]).powi(2) + (p[1] - xr[1]).powi(2);
        }
        assert!((resid - direct).abs() < 1e-12, "residual {resid} vs direct {direct}");

        let mut rng = stream(24, "metrics-test", 0);
        for _ in 0..10_000 {
            let cand = ProcrustesTransform {
                scale: rng.gen_range(0.1..3.0),
                rot: {
                    let a: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    [[a.cos(), -a.sin()], [a.sin(), a.cos()]]
                },
                trans: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            };
            let mut obj = 0.0;
            for i in 0..12 {
                let r = row(&z, i);
                let p = cand.apply([r[0], r[1]]);
                let xr = row(&x, i);
                obj += (p[0] - xr[0]).powi(2) + (p[1] - xr[1]).powi(2);
            }
            assert!(
                obj >= resid - 1e-12,
                "random candidate beat the closed form: {obj} < {resid}"
            );
        }
    }

    #[test]
    fn procrustes_rejects_zero_variance_charts() {
        let z = Tensor::zeros(&[5, 2]);
        let x = random_points(5, 2, 25);
        assert!(matches!(procrustes_align(&z, &x), Err(MetricsError::Degenerate { .. })));
    }

    #[test]
    fn pca2_recovers_planar_data_embedded_in_higher_dimensions() {
        // Data living in the first two of six dimensions: the projection
        // must preserve all pairwise distances exactly.
        let y = random_points(20, 2, 26);
        let mut z = Tensor::zeros(&[20, 6]);
        for i in 0..20 {
            z.set2(i, 0, y.at2(i, 0));
            z.set2(i, 1, y.at2(i, 1));
        }
        let p = pca2(&z).unwrap();
        let dy = pair_distances(&y);
        let dp = pair_distances(&p);
        let worst = dy
            .iter()
            .zip(&dp)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "planar data must project losslessly, worst gap {worst}");
    }

    #[test]
    fn pca2_orders_components_by_variance() {
        let z = random_points(40, 5, 27);
        let p = pca2(&z).unwrap();
        let var = |c: usize| -> f64 {
            let mean: f64 = (0..40).map(|i| p.at2(i, c)).sum::<f64>() / 40.0;
            (0..40).map(|i| (p.at2(i, c) - mean).powi(2)).sum::<f64>() / 39.0
        };
        assert!(var(0) >= var(1), "first component must carry the most variance");
    }

    #[test]
    fn pca2_explained_variance_is_uniform_for_isotropic_data() {
        let mut rng = stream(28, "metrics-test", 0);
        let d = 8;
        let n = 4000;
        let mut z = Tensor::zeros(&[n, d]);
        z.fill_normal(&mut rng, 1.0);
        let p = pca2(&z).unwrap();
        let total: f64 = {
            let mut acc = 0.0;
            for c in 0..d {
                let mean: f64 = (0..n).map(|i| z.at2(i, c)).sum::<f64>() / n as f64;
                acc += (0..n).map(|i| (z.at2(i, c) - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            }
            acc
        };
        for c in 0..2 {
            let mean: f64 = (0..n).map(|i| p.at2(i, c)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (p.at2(i, c) - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let share = var / total;
            assert!(
                (share - 1.0 / d as f64).abs() < 0.05,
                "isotropic data: component {c} share {share} should be near {}",
                1.0 / d as f64
            );
        }
    }

    #[test]
    fn pca2_equals_basis_fit_plus_projection_bitwise() {
        let z = random_points(15, 4, 29);
        let direct = pca2(&z).unwrap();
        let basis = pca2_fit(&z).unwrap();
        let via_basis = basis.project(&z);
        assert_eq!(direct.data(), via_basis.data(), "one code path, one answer");
        // A held-out point projects consistently with an in-sample twin.
        let p = basis.project_row(row(&z, 3));
        assert_eq!([direct.at2(3, 0), direct.at2(3, 1)], p);
    }

    #[test]
    fn pca2_rejects_rank_zero_input() {
        let mut z = Tensor::zeros(&[5, 3]);
        for i in 0..5 {
            z.set2(i, 0, 2.5);
            z.set2(i, 1, -1.0);
        }
        assert!(matches!(pca2(&z), Err(MetricsError::Degenerate { .. })));
    }

    #[test]
    fn chart_report_stays_within_documented_ranges() {
        for seed in 0..10 {
            let x = random_points(16, 2, 300 + seed);
            let z = random_points(16, 4, 400 + seed);
            let r = chart_report(&x, &z, default_k(16), 20).unwrap();
            assert!((0.0..=1.0).contains(&r.tw), "tw {}", r.tw);
            assert!((0.0..=1.0).contains(&r.ct), "ct {}", r.ct);
            assert!(r.ks >= 0.0, "ks {}", r.ks);
            assert!((0.0..=1.0).contains(&r.rd), "rd {}", r.rd);
        }
    }

    #[test]
    fn default_neighborhood_is_five_percent_and_always_valid() {
        assert_eq!(default_k(20), 1);
        assert_eq!(default_k(100), 5);
        assert_eq!(default_k(201), 11);
        for n in 3..200 {
            let k = default_k(n);
            assert!(k >= 1 && 2 * k < n, "default k = {k} invalid for n = {n}");
        }
    }

    #[test]
    fn metrics_csv_contains_per_trajectory_and_summary_rows() {
        let report = ChartReport { tw: 0.9, ct: 0.8, ks: 0.2, rd: 0.4, k: 3, bins: 50 };
        let rows = vec![
            TrajMetrics { traj_id: 0, n: 100, report },
            TrajMetrics { traj_id: 1, n: 100, report: ChartReport { tw: 0.7, ..report } },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5, "header + 2 trajectories + mean + std");
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert!(lines[3].starts_with("mean,200,3,50,0.800000"), "mean row: {}", lines[3]);
        // std of {0.9, 0.7} is 0.1414...
        assert!(lines[4].starts_with("std,200,3,50,0.141421"), "std row: {}", lines[4]);
    }
}
