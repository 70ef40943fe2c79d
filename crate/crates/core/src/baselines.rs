//! Reference selectors: uniform sampling, importance-weighted resampling
//! (IWR) and leverage-based cluster allocation (Chameleon).

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{AnalyticsError, PcaModel};
use crate::linalg::{Cholesky, LinalgError, Mat};
use crate::scalar::{dot, log_sum_exp, round_half_even, Scalar};

pub const LOG_WEIGHT_CLIP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error(transparent)]
    Pca(#[from] AnalyticsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("leverage score {value} of cluster {k} is not positive")]
    Leverage { k: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSelection {
    /// Pool indices in selection order.
    pub indices: Vec<usize>,
    pub shortfall: usize,
}

/// `budget` distinct pool indices drawn uniformly without replacement.
pub fn uniform_select(pool_size: usize, budget: usize, seed: u64) -> BaselineSelection {
    let take = budget.min(pool_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BaselineSelection { indices: sample(&mut rng, pool_size, take).into_vec(), shortfall: budget - take }
}

/// Indices of the `budget` largest scores; ties by token id.
pub fn top_by_score<T: Scalar>(scores: &[T], ids: &[String], budget: usize) -> BaselineSelection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then_with(|| ids[a].cmp(&ids[b])));
    let take = budget.min(order.len());
    order.truncate(take);
    BaselineSelection { indices: order, shortfall: budget - take }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticBandwidth {
    /// Both densities use `N0^{−1/(n+4)}`.
    RealCount,
    /// The synthetic density uses its own sample count.
    OwnCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IwrConfig {
    pub pca_dim: usize,
    pub synthetic_bandwidth: SyntheticBandwidth,
}

impl Default for IwrConfig {
    fn default() -> Self {
        Self { pca_dim: 16, synthetic_bandwidth: SyntheticBandwidth::RealCount }
    }
}

/// Scott's rule `count^{−1/(n+4)}`.
pub fn scott_bandwidth(count: usize, n: usize) -> f64 {
    (count as f64).powf(-1.0 / (n as f64 + 4.0))
}

/// Log density of an isotropic product-Gaussian KDE with bandwidth `h`.
pub fn kde_log_density<T: Scalar>(samples: &[Vec<T>], h: T, x: &[T]) -> T {
    let n = T::from_count(x.len());
    let norm = -n * (h * T::lit((2.0 * std::f64::consts::PI).sqrt())).ln() - T::from_count(samples.len()).ln();
    let two_h2 = T::lit(2.0) * h * h;
    let terms: Vec<T> = samples
        .iter()
        .map(|s| -s.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / two_h2)
        .collect();
    log_sum_exp(&terms) + norm
}

/// `log p̂_real(x) − log p̂_syn(x)`, clipped to `±100`.
pub fn iwr_log_weight<T: Scalar>(real: &[Vec<T>], h_real: T, syn: &[Vec<T>], h_syn: T, x: &[T]) -> T {
    let clip = T::lit(LOG_WEIGHT_CLIP);
    let lw = kde_log_density(real, h_real, x) - kde_log_density(syn, h_syn, x);
    if lw.is_nan() {
        return -clip;
    }
    lw.max(-clip).min(clip)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IwrResult<T> {
    pub selection: BaselineSelection,
    /// Clipped log-weights for every pool token.
    pub log_weights: Vec<T>,
    pub bandwidths: (T, T),
}

/// Joint PCA, per-set KDE, top-`budget` pool tokens by importance weight.
pub fn iwr_select<T: Scalar>(
    real: &[Vec<T>],
    syn: &[Vec<T>],
    syn_ids: &[String],
    budget: usize,
    cfg: &IwrConfig,
) -> Result<IwrResult<T>, BaselineError> {
    if real.is_empty() {
        return Err(BaselineError::Empty("real"));
    }
    if syn.is_empty() {
        return Err(BaselineError::Empty("synthetic"));
    }
    let joint: Vec<Vec<T>> = real.iter().chain(syn).cloned().collect();
    let pca = PcaModel::fit(&joint, cfg.pca_dim)?;
    let pr: Vec<Vec<T>> = real.iter().map(|v| pca.transform(v)).collect();
    let ps: Vec<Vec<T>> = syn.iter().map(|v| pca.transform(v)).collect();
    let h_real = T::lit(scott_bandwidth(real.len(), cfg.pca_dim));
    let h_syn = match cfg.synthetic_bandwidth {
        SyntheticBandwidth::RealCount => h_real,
        SyntheticBandwidth::OwnCount => T::lit(scott_bandwidth(syn.len(), cfg.pca_dim)),
    };
    let log_weights: Vec<T> = ps.iter().map(|x| iwr_log_weight(&pr, h_real, &ps, h_syn, x)).collect();
    let selection = top_by_score(&log_weights, syn_ids, budget);
    Ok(IwrResult { selection, log_weights, bandwidths: (h_real, h_syn) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChameleonAllocation<T = f64> {
    pub leverage: Vec<T>,
    /// `softmax(1/γ)`.
    pub weights: Vec<T>,
    /// Per-cluster budget, summing to `B`.
    pub counts: Vec<usize>,
}

/// `γ_k = [R(R + KλI)⁻¹]_kk` with `R = C̃C̃ᵀ`.
pub fn leverage_scores<T: Scalar>(centroids: &Mat<T>, lambda: T) -> Result<Vec<T>, BaselineError> {
    let k = centroids.rows();
    let r = centroids.matmul_t(centroids);
    let mut a = r.clone();
    for i in 0..k {
        a[(i, i)] += T::from_count(k) * lambda;
    }
    // R and (R + μI)⁻¹ commute, so the diagonal of (R + μI)⁻¹R is the same.
    let x = Cholesky::new(&a)?.solve_mat(&r);
    let gamma = x.diag();
    if let Some(kk) = gamma.iter().position(|&g| !(g > T::zero())) {
        return Err(BaselineError::Leverage { k: kk, value: gamma[kk].as_f64() });
    }
    Ok(gamma)
}

/// Rounds `w·B` half-to-even, then moves single units by largest residual in
/// the needed direction (ties by cluster index) until the total is `B`.
pub fn integer_budget<T: Scalar>(weights: &[T], budget: usize) -> Vec<usize> {
    let b = T::from_count(budget);
    let ideal: Vec<f64> = weights.iter().map(|&w| (w * b).as_f64()).collect();
    let mut counts: Vec<usize> = weights.iter().map(|&w| round_half_even(w * b).as_f64().max(0.0) as usize).collect();
    let mut total: usize = counts.iter().sum();
    while total != budget {
        let up = total < budget;
        // signed residual: positive means under-allocated
        let residual = |k: usize| if up { ideal[k] - counts[k] as f64 } else { counts[k] as f64 - ideal[k] };
        let pick = (0..counts.len())
            .filter(|&k| up || counts[k] > 0)
            .max_by(|&a, &b| residual(a).total_cmp(&residual(b)).then(b.cmp(&a)));
        let Some(k) = pick else { break };
        if up {
            counts[k] += 1;
            total += 1;
        } else {
            counts[k] -= 1;
            total -= 1;
        }
    }
    counts
}

pub fn chameleon_allocation<T: Scalar>(centroids: &Mat<T>, budget: usize, lambda: T) -> Result<ChameleonAllocation<T>, BaselineError> {
    let leverage = leverage_scores(centroids, lambda)?;
    let inv: Vec<T> = leverage.iter().map(|&g| T::one() / g).collect();
    let lse = log_sum_exp(&inv);
    let weights: Vec<T> = inv.iter().map(|&x| (x - lse).exp()).collect();
    let counts = integer_budget(&weights, budget);
    Ok(ChameleonAllocation { leverage, weights, counts })
}

/// Index of the centroid with the largest cosine; ties to the lower index.
pub fn nearest_centroid<T: Scalar>(centroids: &Mat<T>, v: &[T]) -> usize {
    let mut best = (T::neg_infinity(), 0);
    for k in 0..centroids.rows() {
        let c = dot(centroids.row(k), v);
        if c > best.0 {
            best = (c, k);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChameleonResult<T> {
    pub allocation: ChameleonAllocation<T>,
    pub selection: BaselineSelection,
}

/// Draws `c_k` tokens uniformly from each cluster's pool, then tops up
/// uniformly from the unselected remainder.
pub fn chameleon_select<T: Scalar>(
    centroids: &Mat<T>,
    pool_clusters: &[usize],
    budget: usize,
    lambda: T,
    seed: u64,
) -> Result<ChameleonResult<T>, BaselineError> {
    let allocation = chameleon_allocation(centroids, budget, lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; pool_clusters.len()];
    let mut indices = Vec::new();
    for (k, &want) in allocation.counts.iter().enumerate() {
        let members: Vec<usize> = (0..pool_clusters.len()).filter(|&i| pool_clusters[i] == k).collect();
        for j in sample(&mut rng, members.len(), want.min(members.len())) {
            chosen[members[j]] = true;
            indices.push(members[j]);
        }
    }
    let take = budget.min(pool_clusters.len());
    if indices.len() < take {
        let rest: Vec<usize> = (0..pool_clusters.len()).filter(|&i| !chosen[i]).collect();
        for j in sample(&mut rng, rest.len(), take - indices.len()) {
            indices.push(rest[j]);
        }
    }
    Ok(ChameleonResult { allocation, selection: BaselineSelection { indices, shortfall: budget - take } })
}
