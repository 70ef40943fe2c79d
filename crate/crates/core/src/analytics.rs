//! Embedding-space analytics: PCA, diagonal-covariance GMM clustering,
//! centroid similarity and per-cluster aggregation of calibration scores.
//!
//! Pipeline for a raw embedding: ℓ2-normalize, project with PCA, renormalize,
//! then assign to the component with the largest posterior.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{symmetric_eigen, LinalgError, Mat};
use crate::scalar::{dot, log_sum_exp, normalized, Scalar};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("requested {requested} components from {dim}-dimensional data")]
    TooManyComponents { requested: usize, dim: usize },
    #[error("data has rank {rank}, below the requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },
    #[error("vector {index} has width {got}, expected {expected}")]
    Width { index: usize, got: usize, expected: usize },
    #[error("vector {0} cannot be normalized (zero or non-finite norm)")]
    Degenerate(usize),
    #[error("RBF bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("cluster id {id} out of range for k = {k}")]
    ClusterId { id: usize, k: usize },
    #[error("score {value} of calibration scene {index} is outside [0, 1]")]
    Score { index: usize, value: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn check_widths<T>(vectors: &[Vec<T>], d: usize) -> Result<(), AnalyticsError> {
    match vectors.iter().position(|v| v.len() != d) {
        Some(i) => Err(AnalyticsError::Width { index: i, got: vectors[i].len(), expected: d }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel<T = f64> {
    pub mean: Vec<T>,
    /// `n×d`, orthonormal rows, ordered by decreasing explained variance.
    pub components: Mat<T>,
    /// Variance along each component.
    pub variances: Vec<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn n(&self) -> usize {
        self.components.rows()
    }

    pub fn fit(vectors: &[Vec<T>], n: usize) -> Result<Self, AnalyticsError> {
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.len() < n.max(2) {
            return Err(AnalyticsError::TooFewSamples { needed: n.max(2), got: vectors.len() });
        }
        if n > d || n == 0 {
            return Err(AnalyticsError::TooManyComponents { requested: n, dim: d });
        }
        check_widths(vectors, d)?;
        let count = T::from_count(vectors.len());
        let mut mean = vec![T::zero(); d];
        for v in vectors {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let centered = Mat::from_fn(vectors.len(), d, |i, j| vectors[i][j] - mean[j]);
        let cov = centered.t_matmul(&centered).scale(T::one() / (count - T::one()));
        let (values, vectors_t) = symmetric_eigen(&cov)?;
        let top = values.first().copied().unwrap_or(T::zero()).max(T::zero());
        let tol = top * T::lit(1e-10) + T::min_positive_value();
        let rank = values.iter().filter(|&&v| v > tol).count();
        if rank < n {
            return Err(AnalyticsError::RankDeficient { rank, requested: n });
        }
        let components = Mat::from_fn(n, d, |i, j| vectors_t[(i, j)]);
        Ok(Self { mean, components, variances: values[..n].to_vec() })
    }

    /// `components·(v − mean)`.
    pub fn transform(&self, v: &[T]) -> Vec<T> {
        let centered: Vec<T> = v.iter().zip(&self.mean).map(|(&x, &m)| x - m).collect();
        self.components.mat_vec(&centered)
    }

    pub fn inverse_transform(&self, y: &[T]) -> Vec<T> {
        let mut out = self.components.t_mat_vec(y);
        out.iter_mut().zip(&self.mean).for_each(|(o, &m)| *o += m);
        out
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm<T = f64> {
    /// `k×n`.
    pub means: Mat<T>,
    /// `k×n` per-coordinate variances.
    pub variances: Mat<T>,
    pub weights: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop once the mean per-sample log-likelihood improves by less.
    pub tol: f64,
    pub var_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-5, var_floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit<T> {
    pub gmm: Gmm<T>,
    /// Total log-likelihood after each EM iteration.
    pub log_likelihood: Vec<T>,
    /// Components reseeded from the farthest point during initialization.
    pub reseeded: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<T: Scalar>(v: &[T], centers: &Mat<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for c in 0..centers.rows() {
        let d = sq_dist(v, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl<T: Scalar> Gmm<T> {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `log π_c + log N(v | μ_c, diag σ²_c)` for every component.
    pub fn log_joint(&self, v: &[T]) -> Vec<T> {
        let ln2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        (0..self.k())
            .map(|c| {
                let mut s = self.weights[c].ln();
                for ((&x, &m), &var) in v.iter().zip(self.means.row(c)).zip(self.variances.row(c)) {
                    s -= T::lit(0.5) * (ln2pi + var.ln() + (x - m) * (x - m) / var);
                }
                s
            })
            .collect()
    }

    /// Component with the largest posterior; ties go to the lower index.
    pub fn assign(&self, v: &[T]) -> usize {
        let lj = self.log_joint(v);
        let mut best = 0;
        for (c, &x) in lj.iter().enumerate() {
            if x > lj[best] {
                best = c;
            }
        }
        best
    }

    /// EM from a k-means++ start. Deterministic in `seed`.
    pub fn fit(vectors: &[Vec<T>], k: usize, seed: u64, cfg: &GmmConfig) -> Result<GmmFit<T>, AnalyticsError> {
        let n = vectors.len();
        if k == 0 || n < k {
            return Err(AnalyticsError::TooFewSamples { needed: k.max(1), got: n });
        }
        let d = vectors[0].len();
        check_widths(vectors, d)?;
        let floor = T::lit(cfg.var_floor);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // k-means++ seeding.
        let mut centers = Mat::zeros(k, d);
        centers.row_mut(0).copy_from_slice(&vectors[rng.random_range(0..n)]);
        let mut dist: Vec<T> = vectors.iter().map(|v| sq_dist(v, centers.row(0))).collect();
        for c in 1..k {
            let total: T = dist.iter().copied().sum();
            let pick = if total > T::zero() {
                let mut u = T::lit(rng.random::<f64>()) * total;
                let mut idx = n - 1;
                for (i, &w) in dist.iter().enumerate() {
                    if u < w {
                        idx = i;
                        break;
                    }
                    u -= w;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centers.row_mut(c).copy_from_slice(&vectors[pick]);
            for (dv, v) in dist.iter_mut().zip(vectors) {
                *dv = dv.min(sq_dist(v, centers.row(c)));
            }
        }

        // Hard assignment; empty components take the point farthest from its center.
        let mut reseeded = 0;
        let mut labels: Vec<usize>;
        loop {
            labels = vectors.iter().map(|v| nearest(v, &centers).0).collect();
            let mut counts = vec![0usize; k];
            labels.iter().for_each(|&l| counts[l] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            if reseeded >= k {
                break;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&vectors[a], centers.row(labels[a]));
                    let db = sq_dist(&vectors[b], centers.row(labels[b]));
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
                });
            let Some(far) = far else { break };
            log::warn!("gmm: component {empty} empty after init; reseeding from point {far}");
            centers.row_mut(empty).copy_from_slice(&vectors[far]);
            reseeded += 1;
        }

        let nf = T::from_count(n);
        let mut gmm = Gmm { means: centers, variances: Mat::zeros(k, d), weights: vec![T::zero(); k] };
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let mut global_var = vec![T::zero(); d];
        let gmean: Vec<T> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<T>() / nf).collect();
        for v in vectors {
            for j in 0..d {
                global_var[j] += (v[j] - gmean[j]) * (v[j] - gmean[j]) / nf;
            }
        }
        for c in 0..k {
            gmm.weights[c] = T::from_count(counts[c].max(1)) / T::from_count(n + counts.iter().filter(|&&x| x == 0).count());
            for j in 0..d {
                let var = if counts[c] >= 2 {
                    let members = labels.iter().zip(vectors).filter(|(&l, _)| l == c);
                    let m = gmm.means[(c, j)];
                    members.map(|(_, v)| (v[j] - m) * (v[j] - m)).sum::<T>() / T::from_count(counts[c])
                } else {
                    global_var[j]
                };
                gmm.variances[(c, j)] = var.max(floor);
            }
        }
        let wsum: T = gmm.weights.iter().copied().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= wsum);

        let mut history = Vec::new();
        let mut resp = Mat::zeros(n, k);
        let mut prev = T::neg_infinity();
        for _ in 0..cfg.max_iter {
            // E-step.
            let mut ll = T::zero();
            for (i, v) in vectors.iter().enumerate() {
                let lj = gmm.log_joint(v);
                let lse = log_sum_exp(&lj);
                ll += lse;
                for c in 0..k {
                    resp[(i, c)] = (lj[c] - lse).exp();
                }
            }
            history.push(ll);
            if (ll - prev) / nf < T::lit(cfg.tol) && prev.is_finite() {
                break;
            }
            prev = ll;
            // M-step.
            for c in 0..k {
                let nk: T = (0..n).map(|i| resp[(i, c)]).sum();
                if nk <= T::lit(1e-10) {
                    continue;
                }
                gmm.weights[c] = nk / nf;
                for j in 0..d {
                    let m = (0..n).map(|i| resp[(i, c)] * vectors[i][j]).sum::<T>() / nk;
                    gmm.means[(c, j)] = m;
                }
                for j in 0..d {
                    let m = gmm.means[(c, j)];
                    let var = (0..n).map(|i| resp[(i, c)] * (vectors[i][j] - m) * (vectors[i][j] - m)).sum::<T>() / nk;
                    gmm.variances[(c, j)] = var.max(floor);
                }
            }
            let wsum: T = gmm.weights.iter().copied().sum();
            gmm.weights.iter_mut().for_each(|w| *w /= wsum);
        }
        Ok(GmmFit { gmm, log_likelihood: history, reseeded })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k: usize,
    /// PCA output dimension; `None` skips PCA.
    pub pca_dim: Option<usize>,
    pub seed: u64,
    pub gmm: GmmConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 8, pca_dim: Some(64), seed: 0, gmm: GmmConfig::default() }
    }
}

/// Fitted clustering of the real tokens together with the calibration
/// mixture over its clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel<T = f64> {
    pub k: usize,
    pub pca: Option<PcaModel<T>>,
    pub gmm: Gmm<T>,
    /// Unit-normalized component means, `k×n`.
    pub centroids: Mat<T>,
    /// Real tokens per cluster.
    pub n0: Vec<usize>,
    /// Calibration share per cluster.
    pub pi: Vec<T>,
}

impl<T: Scalar> ClusterModel<T> {
    /// Fits PCA and the GMM on `real`, then computes `n0` and the
    /// calibration mixture from `cal`.
    pub fn fit(real: &[Vec<T>], cal: &[Vec<T>], cfg: &ClusterConfig) -> Result<Self, AnalyticsError> {
        let unit = normalize_all(real)?;
        let pca = match cfg.pca_dim {
            Some(n) => Some(PcaModel::fit(&unit, n)?),
            None => None,
        };
        let projected = unit
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = pca.as_ref().map_or_else(|| v.clone(), |m| m.transform(v));
                normalized(&p).ok_or(AnalyticsError::Degenerate(i))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fit = Gmm::fit(&projected, cfg.k, cfg.seed, &cfg.gmm)?;
        let gmm = fit.gmm;
        let width = gmm.means.cols();
        let mut centroids = Mat::zeros(cfg.k, width);
        for c in 0..cfg.k {
            let u = normalized(gmm.means.row(c)).unwrap_or_else(|| {
                let mut e = vec![T::zero(); width];
                e[0] = T::one();
                e
            });
            centroids.row_mut(c).copy_from_slice(&u);
        }
        let mut model = ClusterModel { k: cfg.k, pca, gmm, centroids, n0: vec![0; cfg.k], pi: vec![T::zero(); cfg.k] };
        for v in &projected {
            model.n0[model.gmm.assign(v)] += 1;
        }
        let cal_assign = model.assign_all(cal)?;
        model.pi = calibration_mixture(&cal_assign, cfg.k)?;
        Ok(model)
    }

    /// Raw embedding → normalized PCA space used by the GMM and centroids.
    pub fn project(&self, v: &[T]) -> Option<Vec<T>> {
        let u = normalized(v)?;
        let p = match &self.pca {
            Some(m) => m.transform(&u),
            None => u,
        };
        normalized(&p)
    }

    pub fn assign(&self, v: &[T]) -> Option<usize> {
        self.project(v).map(|p| self.gmm.assign(&p))
    }

    pub fn assign_all(&self, vectors: &[Vec<T>]) -> Result<Vec<usize>, AnalyticsError> {
        vectors.iter().enumerate().map(|(i, v)| self.assign(v).ok_or(AnalyticsError::Degenerate(i))).collect()
    }

    pub fn similarity(&self, sigma: T) -> Result<SimilarityMatrix<T>, AnalyticsError> {
        rbf_similarity(&self.centroids, sigma)
    }

    pub fn to_json(&self) -> Result<String, AnalyticsError>
    where
        T: Serialize,
    {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, AnalyticsError>
    where
        T: for<'de> Deserialize<'de>,
    {
        Ok(serde_json::from_str(s)?)
    }
}

fn normalize_all<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<Vec<T>>, AnalyticsError> {
    vectors.iter().enumerate().map(|(i, v)| normalized(v).ok_or(AnalyticsError::Degenerate(i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix<T = f64> {
    pub r: Mat<T>,
    pub sigma: T,
}

/// `R_kj = exp(−(1 − cos(c_k, c_j))² / (2σ²))` for unit-norm centroid rows.
pub fn rbf_similarity<T: Scalar>(centroids: &Mat<T>, sigma: T) -> Result<SimilarityMatrix<T>, AnalyticsError> {
    if !(sigma > T::zero()) {
        return Err(AnalyticsError::Bandwidth(sigma.as_f64()));
    }
    let k = centroids.rows();
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let r = Mat::from_fn(k, k, |i, j| {
        if i == j {
            return T::one();
        }
        let cos = dot(centroids.row(i), centroids.row(j)).max(-T::one()).min(T::one());
        let dc = T::one() - cos;
        (-(dc * dc) / two_s2).exp()
    });
    Ok(SimilarityMatrix { r, sigma })
}

/// Share of calibration tokens per cluster.
pub fn calibration_mixture<T: Scalar>(assignments: &[usize], k: usize) -> Result<Vec<T>, AnalyticsError> {
    if assignments.is_empty() {
        return Err(AnalyticsError::EmptyCalibration);
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        *counts.get_mut(a).ok_or(AnalyticsError::ClusterId { id: a, k })? += 1;
    }
    let n = T::from_count(assignments.len());
    Ok(counts.into_iter().map(|c| T::from_count(c) / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores<T = f64> {
    /// Mean calibration score per cluster; `None` when the cluster has no
    /// calibration scenes.
    pub s_bar: Vec<Option<T>>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> ClusterScores<T> {
    /// `s̄` with missing clusters set to zero. Those clusters also carry
    /// `π_k = 0`, so the overall score is unaffected.
    pub fn filled(&self) -> Vec<T> {
        self.s_bar.iter().map(|s| s.unwrap_or(T::zero())).collect()
    }

    pub fn overall(&self, pi: &[T]) -> T {
        for (k, (s, &p)) in self.s_bar.iter().zip(pi).enumerate() {
            if s.is_none() && p > T::zero() {
                log::warn!("cluster {k} has calibration weight {p} but no scores");
            }
        }
        overall_score(pi, &self.filled())
    }
}

pub fn aggregate_scores<T: Scalar>(scores: &[T], assignments: &[usize], k: usize) -> Result<ClusterScores<T>, AnalyticsError> {
    if scores.is_empty() {
        return Err(AnalyticsError::EmptyCalibration);
    }
    if scores.len() != assignments.len() {
        return Err(AnalyticsError::TooFewSamples { needed: assignments.len(), got: scores.len() });
    }
    let mut sums = vec![T::zero(); k];
    let mut counts = vec![0usize; k];
    for (i, (&s, &a)) in scores.iter().zip(assignments).enumerate() {
        if !(s >= T::zero() && s <= T::one()) {
            return Err(AnalyticsError::Score { index: i, value: s.as_f64() });
        }
        if a >= k {
            return Err(AnalyticsError::ClusterId { id: a, k });
        }
        sums[a] += s;
        counts[a] += 1;
    }
    let s_bar = sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / T::from_count(c))).collect();
    Ok(ClusterScores { s_bar, counts })
}

/// `Σ_k π_k s̄_k`.
pub fn overall_score<T: Scalar>(pi: &[T], s_bar: &[T]) -> T {
    dot(pi, s_bar)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(1.0);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-15 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Writes `token_id,cluster_id` rows with a header.
pub fn write_assignments<W: Write>(ids: &[&str], clusters: &[usize], w: W) -> Result<(), AnalyticsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["token_id", "cluster_id"])?;
    for (id, c) in ids.iter().zip(clusters) {
        out.write_record([id.to_string(), c.to_string()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_assignments<R: Read>(r: R) -> Result<Vec<(String, usize)>, AnalyticsError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let (Some(id), Some(c)) = (rec.get(0), rec.get(1)) else {
            return Err(AnalyticsError::Parse { line, message: "expected token_id,cluster_id".into() });
        };
        let c = c.trim().parse().map_err(|e| AnalyticsError::Parse { line, message: format!("cluster id: {e}") })?;
        out.push((id.to_string(), c));
    }
    Ok(out)
}
