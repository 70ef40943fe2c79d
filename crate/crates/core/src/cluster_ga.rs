//! Cluster-aware gradient ascent over the data mixture.
//!
//! A linear surrogate predicts per-cluster score changes from log-mixture and
//! synthetic-ratio changes, coupled across clusters by the similarity kernel
//! `R`. The mixture then takes an exponentiated-gradient step whose Euclidean
//! length follows a half-cosine schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Cholesky, LinalgError, Mat};
use crate::scalar::{dot, log_sum_exp, norm2, round_half_even, Scalar};

/// Floor applied to mixture weights before any logarithm.
pub const MIXTURE_FLOOR: f64 = 1e-6;
pub const ETA_CAP: f64 = 1e3;
pub const ETA_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum GaError {
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} rounds, got {got}")]
    TooFewRounds { needed: usize, got: usize },
    #[error("no regression rows (every cluster score missing)")]
    NoRows,
    #[error("schedule needs 2 <= t <= T, got t = {t}, T = {total}")]
    Schedule { t: usize, total: usize },
    #[error("infeasible constraints: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureVector<T = f64> {
    pub w: Vec<T>,
}

impl<T: Scalar> MixtureVector<T> {
    pub fn new(w: Vec<T>) -> Result<Self, GaError> {
        if w.is_empty() {
            return Err(GaError::Mixture("empty".into()));
        }
        if let Some(k) = w.iter().position(|x| !(*x > T::zero()) || !x.is_finite()) {
            return Err(GaError::Mixture(format!("w[{k}] = {} is not strictly positive", w[k])));
        }
        let s: T = w.iter().copied().sum();
        if (s - T::one()).abs().as_f64() > 1e-9 {
            return Err(GaError::Mixture(format!("sums to {s}")));
        }
        Ok(Self { w })
    }

    /// Floors every weight at [`MIXTURE_FLOOR`] and renormalizes.
    pub fn from_unnormalized(raw: &[T]) -> Result<Self, GaError> {
        let floor = T::lit(MIXTURE_FLOOR);
        let total: T = raw.iter().map(|&x| x.max(T::zero())).sum();
        if !(total > T::zero()) || !total.is_finite() {
            return Err(GaError::Mixture("no positive mass".into()));
        }
        let mut w: Vec<T> = raw.iter().map(|&x| (x.max(T::zero()) / total).max(floor)).collect();
        let s: T = w.iter().copied().sum();
        w.iter_mut().for_each(|x| *x /= s);
        Self::new(w)
    }

    pub fn uniform(k: usize) -> Self {
        Self { w: vec![T::one() / T::from_count(k); k] }
    }

    /// The real-data mixture `n0 / N0`, floored.
    pub fn proportional(n0: &[usize]) -> Result<Self, GaError> {
        Self::from_unnormalized(&n0.iter().map(|&c| T::from_count(c)).collect::<Vec<_>>())
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn log(&self) -> Vec<T> {
        let floor = T::lit(MIXTURE_FLOOR);
        self.w.iter().map(|&x| x.max(floor).ln()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams<T = f64> {
    pub beta: Vec<T>,
    pub gamma: T,
    pub lambda_reg: T,
}

/// One regression row: the change of cluster `cluster`'s score between two rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample<T = f64> {
    pub cluster: usize,
    /// Rounds `(a, b)` with `a < b`; deltas are `b − a`.
    pub rounds: (usize, usize),
    pub delta_logw: Vec<T>,
    pub delta_r: Vec<T>,
    pub target: T,
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainVector<T = f64> {
    pub alpha: Vec<T>,
}

/// Mixture and per-cluster calibration scores observed in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundObservation<T = f64> {
    pub w: MixtureVector<T>,
    pub s_bar: Vec<Option<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairWeighting {
    #[default]
    Uniform,
    /// `exp(−(t_latest − max(a, b)) / tau)`.
    Recency { tau: f64 },
}

fn check_len<T>(what: &str, v: &[T], k: usize) -> Result<(), GaError> {
    if v.len() == k {
        Ok(())
    } else {
        Err(GaError::Shape(format!("{what} has length {}, expected {k}", v.len())))
    }
}

/// `r_j = max(0, 1 − n0_j / (w_j·N))` with `w_j` floored.
pub fn synthetic_ratio<T: Scalar>(w: &[T], n0: &[usize], n_total: usize) -> Vec<T> {
    assert!(n_total > 0, "n_total must be positive");
    let n = T::from_count(n_total);
    let floor = T::lit(MIXTURE_FLOOR);
    w.iter()
        .zip(n0)
        .map(|(&wj, &c)| (T::one() - T::from_count(c) / (wj.max(floor) * n)).max(T::zero()))
        .collect()
}

/// One row per unordered round pair per cluster observed in both rounds.
pub fn build_pairs<T: Scalar>(
    history: &[RoundObservation<T>],
    n0: &[usize],
    n_total: usize,
    weighting: PairWeighting,
) -> Result<Vec<PairSample<T>>, GaError> {
    if history.len() < 2 {
        return Err(GaError::TooFewRounds { needed: 2, got: history.len() });
    }
    let k = n0.len();
    for h in history {
        check_len("mixture", &h.w.w, k)?;
        check_len("scores", &h.s_bar, k)?;
    }
    let logs: Vec<Vec<T>> = history.iter().map(|h| h.w.log()).collect();
    let ratios: Vec<Vec<T>> = history.iter().map(|h| synthetic_ratio(&h.w.w, n0, n_total)).collect();
    let latest = history.len() - 1;
    let mut out = Vec::new();
    for a in 0..history.len() {
        for b in a + 1..history.len() {
            let delta_logw: Vec<T> = logs[b].iter().zip(&logs[a]).map(|(&x, &y)| x - y).collect();
            let delta_r: Vec<T> = ratios[b].iter().zip(&ratios[a]).map(|(&x, &y)| x - y).collect();
            let weight = match weighting {
                PairWeighting::Uniform => T::one(),
                PairWeighting::Recency { tau } => T::lit((-((latest - b) as f64) / tau).exp()),
            };
            for c in 0..k {
                if let (Some(sb), Some(sa)) = (history[b].s_bar[c], history[a].s_bar[c]) {
                    out.push(PairSample {
                        cluster: c,
                        rounds: (a, b),
                        delta_logw: delta_logw.clone(),
                        delta_r: delta_r.clone(),
                        target: sb - sa,
                        weight,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Regressor row for target cluster `k`: `[R_kj·Δlog w_j]_j ++ [Σ_j R_kj·Δr_j]`.
pub fn feature_row<T: Scalar>(r: &Mat<T>, k: usize, delta_logw: &[T], delta_r: &[T]) -> Vec<T> {
    let rk = r.row(k);
    let mut x: Vec<T> = rk.iter().zip(delta_logw).map(|(&a, &b)| a * b).collect();
    x.push(dot(rk, delta_r));
    x
}

/// Weighted ridge regression `φ = (XᵀWX + λI)⁻¹ XᵀW y` via Cholesky.
pub fn fit_predictor<T: Scalar>(pairs: &[PairSample<T>], r: &Mat<T>, lambda_reg: T) -> Result<PredictorParams<T>, GaError> {
    if pairs.is_empty() {
        return Err(GaError::NoRows);
    }
    let k = r.rows();
    let p = k + 1;
    let mut xtwx = Mat::zeros(p, p);
    let mut xtwy = vec![T::zero(); p];
    for s in pairs {
        check_len("delta_logw", &s.delta_logw, k)?;
        check_len("delta_r", &s.delta_r, k)?;
        let x = feature_row(r, s.cluster, &s.delta_logw, &s.delta_r);
        for i in 0..p {
            let wx = s.weight * x[i];
            xtwy[i] += wx * s.target;
            for j in 0..p {
                xtwx[(i, j)] += wx * x[j];
            }
        }
    }
    for i in 0..p {
        xtwx[(i, i)] += lambda_reg;
    }
    let phi = Cholesky::new(&xtwx)?.solve(&xtwy);
    Ok(PredictorParams { beta: phi[..k].to_vec(), gamma: phi[k], lambda_reg })
}

/// `Δŝ_k = Σ_j R_kj β_j Δlog w_j + γ Σ_j R_kj Δr_j`.
pub fn predict_delta<T: Scalar>(
    p: &PredictorParams<T>,
    r: &Mat<T>,
    w_from: &MixtureVector<T>,
    w_to: &MixtureVector<T>,
    n0: &[usize],
    n_total: usize,
) -> Vec<T> {
    let dlog: Vec<T> = w_to.log().iter().zip(w_from.log()).map(|(&b, a)| b - a).collect();
    let dr: Vec<T> = synthetic_ratio(&w_to.w, n0, n_total)
        .iter()
        .zip(synthetic_ratio(&w_from.w, n0, n_total))
        .map(|(&b, a)| b - a)
        .collect();
    predict_from_deltas(p, r, &dlog, &dr)
}

pub fn predict_from_deltas<T: Scalar>(p: &PredictorParams<T>, r: &Mat<T>, dlog: &[T], dr: &[T]) -> Vec<T> {
    let bdl: Vec<T> = p.beta.iter().zip(dlog).map(|(&b, &d)| b * d).collect();
    let a = r.mat_vec(&bdl);
    let g = r.mat_vec(dr);
    a.iter().zip(&g).map(|(&x, &y)| x + p.gamma * y).collect()
}

/// `g_j = (πᵀR)_j · (β_j + γ·n0_j / (w_j·N))`.
///
/// Differentiates the surrogate with respect to `log w_j` holding the other
/// coordinates fixed, without the clamp in the synthetic ratio.
pub fn gradient<T: Scalar>(
    p: &PredictorParams<T>,
    r: &Mat<T>,
    pi: &[T],
    w: &MixtureVector<T>,
    n0: &[usize],
    n_total: usize,
) -> Vec<T> {
    let pr = r.t_mat_vec(pi);
    let n = T::from_count(n_total);
    let floor = T::lit(MIXTURE_FLOOR);
    (0..w.k())
        .map(|j| pr[j] * (p.beta[j] + p.gamma * T::from_count(n0[j]) / (w.w[j].max(floor) * n)))
        .collect()
}

/// `ε_t = ε_max·½(1 + cos(π(t−2)/(T−1)))` for `2 ≤ t ≤ T`.
pub fn half_cosine_schedule(t: usize, total: usize, eps_max: f64) -> Result<f64, GaError> {
    if total < 2 || t < 2 || t > total {
        return Err(GaError::Schedule { t, total });
    }
    let x = (t - 2) as f64 / (total - 1) as f64;
    Ok(eps_max * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgStep<T> {
    pub w: MixtureVector<T>,
    pub eta: T,
    /// False when even `η` at the cap cannot move `ε_t`.
    pub reached: bool,
}

fn eg_point<T: Scalar>(logw: &[T], g: &[T], eta: T) -> Vec<T> {
    let z: Vec<T> = logw.iter().zip(g).map(|(&l, &gk)| l + eta * gk).collect();
    let lse = log_sum_exp(&z);
    z.iter().map(|&x| (x - lse).exp()).collect()
}

fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// `w ∝ w_prev ⊙ exp(η g)` with `η` bisected so that `‖w − w_prev‖₂ = ε`.
pub fn eg_update<T: Scalar>(w_prev: &MixtureVector<T>, g: &[T], eps: T) -> Result<EgStep<T>, GaError> {
    check_len("gradient", g, w_prev.k())?;
    let gmax = g.iter().copied().fold(T::neg_infinity(), T::max);
    let gmin = g.iter().copied().fold(T::infinity(), T::min);
    if !(gmax > gmin) || !(eps > T::zero()) {
        return Ok(EgStep { w: w_prev.clone(), eta: T::zero(), reached: eps <= T::zero() || gmax == gmin });
    }
    let logw: Vec<T> = w_prev.w.iter().map(|x| x.ln()).collect();
    let at = |eta: T| eg_point(&logw, g, eta);
    let cap = T::lit(ETA_CAP);
    let far = at(cap);
    if dist(&far, &w_prev.w) < eps {
        log::warn!("eg_update: step {eps} unreachable within eta <= {ETA_CAP}");
        return Ok(EgStep { w: MixtureVector::from_unnormalized(&far)?, eta: cap, reached: false });
    }
    let (mut lo, mut hi) = (T::zero(), cap);
    for _ in 0..ETA_ITERS {
        let mid = (lo + hi) / T::lit(2.0);
        if dist(&at(mid), &w_prev.w) < eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eta = (lo + hi) / T::lit(2.0);
    let w = at(eta);
    let w = if w.iter().all(|&x| x >= T::lit(MIXTURE_FLOOR)) { MixtureVector::new(w)? } else { MixtureVector::from_unnormalized(&w)? };
    Ok(EgStep { w, eta, reached: true })
}

/// Box constraints on the mixture: `lower_k ≤ w_k ≤ upper_k` and `Σ w = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet<T = f64> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> FeasibleSet<T> {
    /// Real data is kept (`w_k N ≥ n0_k`) and synthetic demand fits the
    /// pool (`w_k N − n0_k ≤ pool_k`).
    pub fn new(n0: &[usize], pool: &[usize], n_total: usize) -> Result<Self, GaError> {
        check_len("pool", pool, n0.len())?;
        let n = T::from_count(n_total);
        let floor = T::lit(MIXTURE_FLOOR);
        let lower: Vec<T> = n0.iter().map(|&c| (T::from_count(c) / n).max(floor)).collect();
        let upper: Vec<T> = n0.iter().zip(pool).map(|(&c, &p)| (T::from_count(c + p) / n).max(floor)).collect();
        let (sl, su): (T, T) = (lower.iter().copied().sum(), upper.iter().copied().sum());
        if sl > T::one() + T::lit(1e-9) || su < T::one() - T::lit(1e-9) {
            return Err(GaError::Infeasible(format!("bounds sum to [{sl}, {su}]")));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, w: &[T]) -> bool {
        let tol = T::lit(1e-12);
        w.iter().zip(&self.lower).zip(&self.upper).all(|((&x, &lo), &hi)| x >= lo - tol && x <= hi + tol)
    }

    /// `clip(c·w, lower, upper)` with the scalar `c` bisected so the result sums to one.
    pub fn project(&self, w: &[T]) -> Vec<T> {
        let w: Vec<T> = w.iter().map(|&x| x.max(T::zero())).collect();
        let clip = |c: T| -> Vec<T> { w.iter().zip(&self.lower).zip(&self.upper).map(|((&x, &lo), &hi)| (c * x).max(lo).min(hi)).collect() };
        let sum = |v: &[T]| v.iter().copied().sum::<T>();
        let (mut lo, mut hi) = (T::zero(), T::one());
        while sum(&clip(hi)) < T::one() && hi < T::lit(1e300) {
            hi = hi * T::lit(2.0);
        }
        if sum(&clip(hi)) < T::one() {
            // zero-mass directions: fill free capacity in proportion to it
            let base = clip(T::zero());
            let room: Vec<T> = base.iter().zip(&self.upper).map(|(&b, &u)| u - b).collect();
            let need = T::one() - sum(&base);
            let total_room = sum(&room);
            return base.iter().zip(&room).map(|(&b, &r)| b + need * r / total_room).collect();
        }
        for _ in 0..200 {
            let mid = (lo + hi) / T::lit(2.0);
            if sum(&clip(mid)) < T::one() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut v = clip(hi);
        // exact normalization; bounds hold to within rounding
        let s = sum(&v);
        v.iter_mut().for_each(|x| *x /= s);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub samples: usize,
    /// Dirichlet concentration `κ`; samples are `Dir(κ·center)`.
    pub concentration: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { samples: 64, concentration: 200.0 }
    }
}

/// Everything the surrogate needs to score a candidate mixture.
#[derive(Clone, Copy, Debug)]
pub struct Surrogate<'a, T> {
    pub params: &'a PredictorParams<T>,
    pub r: &'a Mat<T>,
    pub pi: &'a [T],
    pub n0: &'a [usize],
    pub n_total: usize,
}

impl<T: Scalar> Surrogate<'_, T> {
    /// Predicted overall gain `πᵀΔŝ` from `w_from` to `w_to`.
    pub fn overall_gain(&self, w_from: &MixtureVector<T>, w_to: &MixtureVector<T>) -> T {
        dot(self.pi, &predict_delta(self.params, self.r, w_from, w_to, self.n0, self.n_total))
    }

    pub fn gradient(&self, w: &MixtureVector<T>) -> Vec<T> {
        gradient(self.params, self.r, self.pi, w, self.n0, self.n_total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome<T> {
    pub w: MixtureVector<T>,
    pub how: SearchResolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchResolution {
    Candidate,
    Perturbation,
    Projection,
}

/// Returns the candidate when feasible, else the best feasible Dirichlet
/// perturbation around its clipped renormalization, else the projection.
pub fn feasible_search<T: Scalar>(
    candidate: &MixtureVector<T>,
    w_prev: &MixtureVector<T>,
    set: &FeasibleSet<T>,
    surrogate: &Surrogate<'_, T>,
    seed: u64,
    cfg: &SearchConfig,
) -> Result<SearchOutcome<T>, GaError> {
    check_len("candidate", &candidate.w, set.lower.len())?;
    if set.contains(&candidate.w) {
        return Ok(SearchOutcome { w: candidate.clone(), how: SearchResolution::Candidate });
    }
    let clipped: Vec<T> = candidate.w.iter().zip(&set.lower).zip(&set.upper).map(|((&x, &lo), &hi)| x.max(lo).min(hi)).collect();
    let s: T = clipped.iter().copied().sum();
    let center: Vec<f64> = clipped.iter().map(|&x| (x / s).as_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(T, MixtureVector<T>)> = None;
    for _ in 0..cfg.samples {
        let draws: Vec<f64> = center
            .iter()
            .map(|&c| Gamma::new((cfg.concentration * c).max(1e-3), 1.0).expect("positive shape").sample(&mut rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            continue;
        }
        let w: Vec<T> = draws.iter().map(|&x| T::lit(x / total)).collect();
        if !set.contains(&w) {
            continue;
        }
        let Ok(w) = MixtureVector::from_unnormalized(&w) else { continue };
        if !set.contains(&w.w) {
            continue;
        }
        let gain = surrogate.overall_gain(w_prev, &w);
        if best.as_ref().is_none_or(|(b, _)| gain > *b) {
            best = Some((gain, w));
        }
    }
    if let Some((_, w)) = best {
        return Ok(SearchOutcome { w, how: SearchResolution::Perturbation });
    }
    let projected = MixtureVector::new(set.project(&candidate.w))?;
    Ok(SearchOutcome { w: projected, how: SearchResolution::Projection })
}

/// `δ_k = max(⌊w_k N⌉ − n0_k, 0)` with round-half-to-even, then corrected by
/// largest remainder so that `Σ δ = N − Σ n0`.
pub fn augmentation_sizes<T: Scalar>(w: &MixtureVector<T>, n0: &[usize], n_total: usize) -> Vec<usize> {
    augmentation_sizes_capped(w, n0, n_total, None)
}

/// As [`augmentation_sizes`], never raising any `δ_k` above `caps[k]` during
/// the correction pass.
pub fn augmentation_sizes_capped<T: Scalar>(w: &MixtureVector<T>, n0: &[usize], n_total: usize, caps: Option<&[usize]>) -> Vec<usize> {
    let real: usize = n0.iter().sum();
    assert!(n_total >= real, "N below the real token count");
    let budget = n_total - real;
    let n = T::from_count(n_total);
    let ideal: Vec<f64> = w.w.iter().zip(n0).map(|(&wk, &c)| (wk * n).as_f64() - c as f64).collect();
    let mut delta: Vec<usize> = w
        .w
        .iter()
        .zip(n0)
        .map(|(&wk, &c)| (round_half_even(wk * n).as_f64() as i64 - c as i64).max(0) as usize)
        .collect();
    let cap = |k: usize| caps.map_or(usize::MAX, |c| c[k]);
    let mut total: usize = delta.iter().sum();
    while total != budget {
        let pick = if total < budget {
            (0..delta.len()).filter(|&k| delta[k] < cap(k)).max_by(|&a, &b| {
                (ideal[a] - delta[a] as f64).total_cmp(&(ideal[b] - delta[b] as f64)).then(b.cmp(&a))
            })
        } else {
            (0..delta.len()).filter(|&k| delta[k] > 0).min_by(|&a, &b| {
                (ideal[a] - delta[a] as f64).total_cmp(&(ideal[b] - delta[b] as f64)).then(a.cmp(&b))
            })
        };
        let Some(k) = pick else { break };
        if total < budget {
            delta[k] += 1;
            total += 1;
        } else {
            delta[k] -= 1;
            total -= 1;
        }
    }
    delta
}

/// `α_k = max(Δŝ_k, 0) / max_j Δŝ_j`, or zero when no prediction is positive.
pub fn gains_from_delta<T: Scalar>(delta: &[T]) -> GainVector<T> {
    let top = delta.iter().copied().fold(T::neg_infinity(), T::max);
    let alpha = if top > T::zero() { delta.iter().map(|&d| d.max(T::zero()) / top).collect() } else { vec![T::zero(); delta.len()] };
    GainVector { alpha }
}

pub fn gains<T: Scalar>(
    p: &PredictorParams<T>,
    r: &Mat<T>,
    w_prev: &MixtureVector<T>,
    w_new: &MixtureVector<T>,
    n0: &[usize],
    n_total: usize,
) -> GainVector<T> {
    gains_from_delta(&predict_delta(p, r, w_prev, w_new, n0, n_total))
}

/// Euclidean distance between two mixtures.
pub fn step_length<T: Scalar>(a: &MixtureVector<T>, b: &MixtureVector<T>) -> T {
    let d: Vec<T> = a.w.iter().zip(&b.w).map(|(&x, &y)| x - y).collect();
    norm2(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mv(w: &[f64]) -> MixtureVector<f64> {
        MixtureVector::new(w.to_vec()).unwrap()
    }

    fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> MixtureVector<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        MixtureVector::from_unnormalized(&raw).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, k: usize) -> Mat<f64> {
        let mut r = Mat::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 });
        for i in 0..k {
            for j in i + 1..k {
                let v = rng.random_range(0.0..0.6);
                r[(i, j)] = v;
                r[(j, i)] = v;
            }
        }
        r
    }

    #[test]
    fn synthetic_ratio_examples() {
        let r = synthetic_ratio::<f64>(&[0.4, 0.4, 0.2], &[40, 20, 30], 100);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.5).abs() < 1e-15);
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn pair_counts() {
        let k = 3;
        let obs = |w: &[f64], s: f64| RoundObservation { w: mv(w), s_bar: vec![Some(s); k] };
        let h = vec![obs(&[0.2, 0.3, 0.5], 0.5), obs(&[0.3, 0.3, 0.4], 0.6)];
        assert_eq!(build_pairs(&h, &[1, 1, 1], 10, PairWeighting::Uniform).unwrap().len(), k);
        let mut h3 = h.clone();
        h3.push(obs(&[0.4, 0.3, 0.3], 0.7));
        assert_eq!(build_pairs(&h3, &[1, 1, 1], 10, PairWeighting::Uniform).unwrap().len(), 3 * k);
        h3[1].s_bar[2] = None;
        assert_eq!(build_pairs(&h3, &[1, 1, 1], 10, PairWeighting::Uniform).unwrap().len(), 3 * k - 2);
        let same = vec![obs(&[0.2, 0.3, 0.5], 0.5), obs(&[0.2, 0.3, 0.5], 0.52)];
        let p = build_pairs(&same, &[1, 1, 1], 10, PairWeighting::Uniform).unwrap();
        assert!(p.iter().all(|s| s.delta_logw.iter().chain(&s.delta_r).all(|&x| x == 0.0)));
        assert!(build_pairs(&h[..1], &[1, 1, 1], 10, PairWeighting::Uniform).is_err());
        let rec = build_pairs(&h3, &[1, 1, 1], 10, PairWeighting::Recency { tau: 2.0 }).unwrap();
        let first = rec.iter().find(|s| s.rounds == (0, 1)).unwrap();
        assert!((first.weight - (-0.5f64).exp()).abs() < 1e-15);
    }

    /// Generates noiseless targets from planted `(β*, γ*)` and checks recovery.
    #[test]
    fn ridge_recovers_planted_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 4;
        let r = random_kernel(&mut rng, k);
        let n0 = [30, 20, 25, 25];
        let n_total = 160;
        let truth = PredictorParams { beta: vec![0.3, -0.2, 0.5, 0.1], gamma: 0.7, lambda_reg: 0.0 };
        let history: Vec<RoundObservation<f64>> = (0..8)
            .map(|_| {
                let w = random_mixture(&mut rng, k);
                // per-cluster level chosen so that differences follow the model exactly
                let lw = w.log();
                let rr = synthetic_ratio(&w.w, &n0, n_total);
                let s: Vec<Option<f64>> = (0..k)
                    .map(|c| {
                        let x = feature_row(&r, c, &lw, &rr);
                        Some(x[..k].iter().zip(&truth.beta).map(|(a, b)| a * b).sum::<f64>() + truth.gamma * x[k])
                    })
                    .collect();
                RoundObservation { w, s_bar: s }
            })
            .collect();
        let pairs = build_pairs(&history, &n0, n_total, PairWeighting::Uniform).unwrap();
        let fit = fit_predictor(&pairs, &r, 1e-8).unwrap();
        for (a, b) in fit.beta.iter().zip(&truth.beta) {
            assert!((a - b).abs() < 1e-3, "{:?}", fit);
        }
        assert!((fit.gamma - truth.gamma).abs() < 1e-3);

        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let refit = fit_predictor(&shuffled, &r, 1e-8).unwrap();
        for (a, b) in refit.beta.iter().zip(&fit.beta) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ridge_with_zero_targets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = random_kernel(&mut rng, 3);
        let history: Vec<_> =
            (0..4).map(|_| RoundObservation { w: random_mixture(&mut rng, 3), s_bar: vec![Some(0.5); 3] }).collect();
        let pairs = build_pairs(&history, &[5, 5, 5], 30, PairWeighting::Uniform).unwrap();
        let fit = fit_predictor(&pairs, &r, 1.0).unwrap();
        assert!(fit.beta.iter().all(|&b| b == 0.0) && fit.gamma == 0.0);
        assert!(matches!(fit_predictor::<f64>(&[], &r, 1.0), Err(GaError::NoRows)));
    }

    #[test]
    fn predict_delta_examples() {
        let k = 3;
        let r = Mat::<f64>::identity(k);
        let p = PredictorParams { beta: vec![1.0, 0.0, 0.0], gamma: 0.0, lambda_reg: 1.0 };
        let dl = [0.1, 0.2, -0.3];
        assert_eq!(predict_from_deltas(&p, &r, &dl, &[0.0; 3]), vec![0.1, 0.0, 0.0]);
        let w = mv(&[0.2, 0.3, 0.5]);
        assert_eq!(predict_delta(&p, &r, &w, &w, &[1, 1, 1], 10), vec![0.0; 3]);
        let p2 = PredictorParams { beta: vec![0.4, -0.3, 0.2], gamma: 0.6, lambda_reg: 1.0 };
        let dr = [0.05, -0.02, 0.01];
        let one = predict_from_deltas(&p2, &r, &dl, &dr);
        let two = predict_from_deltas(&p2, &r, &dl.map(|x| 2.0 * x), &dr.map(|x| 2.0 * x));
        for (a, b) in one.iter().zip(&two) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_examples() {
        let k = 3;
        let r = Mat::<f64>::identity(k);
        let p = PredictorParams { beta: vec![0.2, -0.4, 0.6], gamma: 0.5, lambda_reg: 1.0 };
        let w = mv(&[0.2, 0.3, 0.5]);
        let n0 = [10, 20, 30];
        let g = gradient(&p, &r, &[0.0, 1.0, 0.0], &w, &n0, 100);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - (-0.4 + 0.5 * 20.0 / 30.0)).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
        let p0 = PredictorParams { gamma: 0.0, ..p.clone() };
        let g = gradient(&p0, &r, &[1.0 / 3.0; 3], &w, &n0, 100);
        for j in 0..k {
            assert!((g[j] - p.beta[j] / 3.0).abs() < 1e-15);
        }
    }

    /// Central differences of `πᵀ Δŝ` in unnormalized log-mixture coordinates.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 5;
        let r = random_kernel(&mut rng, k);
        let p = PredictorParams { beta: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(), gamma: 0.8, lambda_reg: 1.0 };
        let pi = MixtureVector::<f64>::from_unnormalized(&(0..k).map(|_| rng.random_range(0.1..1.0)).collect::<Vec<_>>()).unwrap().w;
        let w = mv(&[0.3, 0.2, 0.15, 0.2, 0.15]);
        let n0 = [20, 10, 5, 15, 10];
        let n_total = 100;
        let g = gradient(&p, &r, &pi, &w, &n0, n_total);
        let objective = |j: usize, e: f64| {
            let mut dl = vec![0.0; k];
            dl[j] = e;
            let mut wj = w.w.clone();
            wj[j] *= e.exp();
            let r1 = synthetic_ratio(&wj, &n0, n_total);
            let r0 = synthetic_ratio(&w.w, &n0, n_total);
            let dr: Vec<f64> = r1.iter().zip(&r0).map(|(a, b)| a - b).collect();
            dot(&pi, &predict_from_deltas(&p, &r, &dl, &dr))
        };
        let h = 1e-5;
        for j in 0..k {
            let fd = (objective(j, h) - objective(j, -h)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "j={j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn schedule_values() {
        assert!((half_cosine_schedule(2, 5, 0.1).unwrap() - 0.1).abs() < 1e-15);
        let e5 = half_cosine_schedule(5, 5, 0.1).unwrap();
        assert!((e5 - 0.1 * 0.5 * (1.0 + (3.0 * std::f64::consts::PI / 4.0).cos())).abs() < 1e-15);
        assert!((e5 - 0.01464).abs() < 1e-5);
        let seq: Vec<f64> = (2..=10).map(|t| half_cosine_schedule(t, 10, 0.1).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
        assert!(half_cosine_schedule(1, 5, 0.1).is_err());
        assert!(half_cosine_schedule(2, 1, 0.1).is_err());
    }

    #[test]
    fn eg_update_examples() {
        let w = mv(&[0.2, 0.3, 0.5]);
        assert_eq!(eg_update(&w, &[0.0; 3], 0.1).unwrap().w, w);
        assert_eq!(eg_update(&w, &[0.7; 3], 0.1).unwrap().w, w);
        let half = mv(&[0.5, 0.5]);
        let step = eg_update(&half, &[1.0, 0.0], 0.1).unwrap();
        assert!(step.reached);
        assert!((step_length(&step.w, &half) - 0.1).abs() < 1e-8);
        assert!(step.w.w[0] > 0.5);
        // the point (1, 0) is only 0.707 away
        let far = eg_update(&half, &[1.0, 0.0], 0.9).unwrap();
        assert!(!far.reached);
        assert_eq!(far.eta, ETA_CAP);
    }

    #[test]
    fn feasible_search_cases() {
        let n0 = [40, 10, 30];
        let pool = [50, 50, 50];
        let n_total = 100;
        let set = FeasibleSet::<f64>::new(&n0, &pool, n_total).unwrap();
        let r = Mat::identity(3);
        let p = PredictorParams { beta: vec![0.1, 0.3, -0.2], gamma: 0.2, lambda_reg: 1.0 };
        let pi = [0.3, 0.4, 0.3];
        let sur = Surrogate { params: &p, r: &r, pi: &pi, n0: &n0, n_total };
        let prev = mv(&[0.45, 0.2, 0.35]);
        let ok = mv(&[0.45, 0.2, 0.35]);
        let out = feasible_search(&ok, &prev, &set, &sur, 0, &SearchConfig::default()).unwrap();
        assert_eq!((out.w.clone(), out.how), (ok, SearchResolution::Candidate));
        let bad = mv(&[0.2, 0.5, 0.3]);
        let a = feasible_search(&bad, &prev, &set, &sur, 5, &SearchConfig::default()).unwrap();
        assert!(a.w.w[0] * 100.0 >= 40.0 - 1e-9);
        assert!(set.contains(&a.w.w));
        let b = feasible_search(&bad, &prev, &set, &sur, 5, &SearchConfig::default()).unwrap();
        assert_eq!(a, b);
        let none = feasible_search(&bad, &prev, &set, &sur, 5, &SearchConfig { samples: 0, ..SearchConfig::default() }).unwrap();
        assert_eq!(none.how, SearchResolution::Projection);
        assert!(set.contains(&none.w.w));
        assert!(FeasibleSet::<f64>::new(&n0, &[1, 1, 1], n_total).is_err());
    }

    #[test]
    fn augmentation_size_examples() {
        assert_eq!(augmentation_sizes(&mv(&[0.55, 0.45]), &[40, 40], 100), vec![15, 5]);
        assert_eq!(augmentation_sizes(&mv(&[0.5, 0.5]), &[40, 40], 80), vec![0, 0]);
        // 0.125·100 = 12.5 rounds to 12 under half-to-even
        assert_eq!(augmentation_sizes(&mv(&[0.125, 0.875]), &[0, 0], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn gains_examples() {
        assert_eq!(gains_from_delta(&[0.2, -0.1, 0.1]).alpha, vec![1.0, 0.0, 0.5]);
        assert_eq!(gains_from_delta(&[0.3, 0.3]).alpha, vec![1.0, 1.0]);
        assert_eq!(gains_from_delta(&[-0.3, 0.0]).alpha, vec![0.0, 0.0]);
    }

    fn mixture_strategy(k: usize) -> impl Strategy<Value = MixtureVector<f64>> {
        proptest::collection::vec(0.05..1.0f64, k).prop_map(|raw| MixtureVector::from_unnormalized(&raw).unwrap())
    }

    proptest! {
        #[test]
        fn budget_is_met_exactly(w in mixture_strategy(5), n0 in proptest::collection::vec(0usize..40, 5), extra in 0usize..300) {
            let real: usize = n0.iter().sum();
            let n_total = real + extra;
            prop_assume!(n_total > 0);
            let delta = augmentation_sizes(&w, &n0, n_total);
            prop_assert_eq!(delta.iter().sum::<usize>(), extra);
        }

        #[test]
        fn eg_invariants(w in mixture_strategy(4), g in proptest::collection::vec(-2.0..2.0f64, 4), shift in -5.0..5.0f64, eps in 0.001..0.05f64) {
            let step = eg_update(&w, &g, eps).unwrap();
            prop_assert!(step.w.w.iter().all(|&x| x > 0.0));
            prop_assert!((step.w.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if step.reached && step.eta > 0.0 {
                prop_assert!((step_length(&step.w, &w) - eps).abs() < 1e-8);
            }
            let shifted: Vec<f64> = g.iter().map(|x| x + shift).collect();
            let other = eg_update(&w, &shifted, eps).unwrap();
            for (a, b) in other.w.w.iter().zip(&step.w.w) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn gains_scale_covariant(d in proptest::collection::vec(-1.0..1.0f64, 5), c in 0.01..100.0f64) {
            let a = gains_from_delta(&d);
            let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
            let b = gains_from_delta(&scaled);
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(x));
            }
        }

        #[test]
        fn search_output_is_feasible(w in mixture_strategy(4), seed in 0u64..1000) {
            let n0 = [30, 10, 20, 5];
            let pool = [40, 40, 5, 40];
            let set = FeasibleSet::<f64>::new(&n0, &pool, 100).unwrap();
            let r = Mat::identity(4);
            let p = PredictorParams { beta: vec![0.1, 0.2, 0.3, 0.4], gamma: 0.1, lambda_reg: 1.0 };
            let pi = [0.25; 4];
            let sur = Surrogate { params: &p, r: &r, pi: &pi, n0: &n0, n_total: 100 };
            let out = feasible_search(&w, &w, &set, &sur, seed, &SearchConfig::default()).unwrap();
            prop_assert!(set.contains(&out.w.w));
            prop_assert!((out.w.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
