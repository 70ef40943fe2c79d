//! Round loop: train on real plus selected synthetic tokens, score the
//! calibration set, fit the mixture surrogate and retrieve the next
//! selection.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{aggregate_scores, AnalyticsError, ClusterConfig, ClusterModel, GmmConfig};
use crate::baselines::{chameleon_select, iwr_select, nearest_centroid, uniform_select, BaselineError, IwrConfig};
use crate::cluster_ga::{
    augmentation_sizes_capped, build_pairs, eg_update, feasible_search, fit_predictor, gains, gradient,
    half_cosine_schedule, synthetic_ratio, FeasibleSet, GaError, GainVector, MixtureVector, PairSample, PairWeighting,
    PredictorParams, RoundObservation, SearchConfig, SearchResolution, Surrogate,
};
use crate::linalg::Mat;
use crate::metrics::jaccard;
use crate::retrieval::{retrieve, select_anchors, AnchorConfig, CalibrationScene, SelectionRecord};
use crate::scalar::{normalized, Scalar};

/// Version written into every round record.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("token {0} does not belong to this oracle's world")]
    UnknownToken(String),
    #[error("oracle failed: {0}")]
    Failed(String),
}

/// Trains a policy on a token set and scores calibration scenes with it.
pub trait PolicyOracle {
    type Handle;

    fn train(&self, training: &[String]) -> Result<Self::Handle, OracleError>;

    /// One score in `[0, 1]` per calibration id, in order. Deterministic for a
    /// fixed handle.
    fn evaluate(&self, handle: &Self::Handle, calibration: &[String]) -> Result<Vec<f64>, OracleError>;
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("invalid inputs: {0}")]
    Input(String),
    #[error("round {round}: {source}")]
    Oracle { round: usize, source: OracleError },
    #[error("round log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("insufficient history: {got} logged round(s), at least {needed} needed")]
    InsufficientHistory { got: usize, needed: usize },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Ga(#[from] GaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Autoscale,
    Uniform,
    Iwr,
    Chameleon,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Autoscale => "autoscale",
            Method::Uniform => "uniform",
            Method::Iwr => "iwr",
            Method::Chameleon => "chameleon",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "autoscale" => Ok(Method::Autoscale),
            "uniform" => Ok(Method::Uniform),
            "iwr" => Ok(Method::Iwr),
            "chameleon" => Ok(Method::Chameleon),
            other => Err(format!("unknown method {other:?} (expected autoscale, uniform, iwr or chameleon)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Synthetic budget B.
    pub budget: usize,
    /// Optimization rounds T.
    pub rounds: usize,
    /// Cluster count K.
    pub clusters: usize,
    /// RBF bandwidth of the cluster similarity.
    pub sigma: f64,
    pub lambda_reg: f64,
    pub eps_max: f64,
    pub seed: u64,
    pub method: Method,
    pub pca_dim: Option<usize>,
    pub anchors: AnchorConfig,
    pub search: SearchConfig,
    pub gmm: GmmConfig,
    pub pair_weighting: PairWeighting,
    /// Kernel ridge λ of the Chameleon baseline.
    pub chameleon_lambda: f64,
    pub iwr: IwrConfig,
    /// Writes wall-clock seconds into each record; breaks byte-identical logs.
    pub record_timing: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            budget: 500,
            rounds: 5,
            clusters: 8,
            sigma: 0.5,
            lambda_reg: 1.0,
            eps_max: 0.1,
            seed: 0,
            method: Method::Autoscale,
            pca_dim: Some(64),
            anchors: AnchorConfig::default(),
            search: SearchConfig::default(),
            gmm: GmmConfig::default(),
            pair_weighting: PairWeighting::default(),
            chameleon_lambda: 0.1,
            iwr: IwrConfig::default(),
            record_timing: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad("lambda_reg must be nonnegative");
        }
        if !(self.eps_max >= 0.0 && self.eps_max.is_finite()) {
            return bad("eps_max must be nonnegative");
        }
        if !(self.chameleon_lambda > 0.0) {
            return bad("chameleon_lambda must be positive");
        }
        if self.pca_dim == Some(0) {
            return bad("pca_dim must be positive when set");
        }
        Ok(())
    }

    /// Index of the last round this config runs.
    pub fn final_round(&self) -> usize {
        match self.method {
            Method::Autoscale => self.rounds,
            _ => 1,
        }
    }
}

/// Token ids and unit-norm embeddings of the three pools, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Pools<T = f64> {
    pub real_ids: Vec<String>,
    pub real_emb: Vec<Vec<T>>,
    pub pool_ids: Vec<String>,
    pub pool_emb: Vec<Vec<T>>,
    pub cal_ids: Vec<String>,
    pub cal_emb: Vec<Vec<T>>,
}

impl<T: Scalar> Pools<T> {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Input(m));
        for (name, ids, emb) in [
            ("real", &self.real_ids, &self.real_emb),
            ("synthetic", &self.pool_ids, &self.pool_emb),
            ("calibration", &self.cal_ids, &self.cal_emb),
        ] {
            if ids.is_empty() {
                return bad(format!("{name} pool is empty"));
            }
            if ids.len() != emb.len() {
                return bad(format!("{name}: {} ids but {} embeddings", ids.len(), emb.len()));
            }
        }
        let d = self.real_emb[0].len();
        if d == 0 {
            return bad("embeddings are empty".into());
        }
        for (name, emb) in [("real", &self.real_emb), ("synthetic", &self.pool_emb), ("calibration", &self.cal_emb)] {
            if let Some(i) = emb.iter().position(|v| v.len() != d) {
                return bad(format!("{name} embedding {i} has width {} (expected {d})", emb[i].len()));
            }
        }
        let mut seen = BTreeSet::new();
        for id in self.real_ids.iter().chain(&self.pool_ids).chain(&self.cal_ids) {
            if !seen.insert(id.as_str()) {
                return bad(format!("token {id} appears twice across the pools"));
            }
        }
        Ok(())
    }
}

/// Clustering and per-pool assignments shared by every round.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<T = f64> {
    pub model: ClusterModel<T>,
    pub r: Mat<T>,
    pub real_clusters: Vec<usize>,
    pub pool_clusters: Vec<usize>,
    pub cal_clusters: Vec<usize>,
    /// Synthetic pool tokens per cluster.
    pub pool_counts: Vec<usize>,
    /// `N = N0 + B`.
    pub n_total: usize,
    pool_unit: Vec<Vec<T>>,
    cal_unit: Vec<Vec<T>>,
}

/// Independent seed for `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_CLUSTER: u64 = 1;
const STREAM_ROUND: u64 = 1 << 32;

fn unit_all<T: Scalar>(name: &str, vs: &[Vec<T>]) -> Result<Vec<Vec<T>>, EngineError> {
    vs.iter()
        .enumerate()
        .map(|(i, v)| normalized(v).ok_or_else(|| EngineError::Input(format!("{name} embedding {i} has zero norm"))))
        .collect()
}

pub fn cluster_config(cfg: &EngineConfig) -> ClusterConfig {
    ClusterConfig { k: cfg.clusters, pca_dim: cfg.pca_dim, seed: derive_seed(cfg.seed, STREAM_CLUSTER), gmm: cfg.gmm }
}

/// Fits the clustering on the real embeddings and assigns every pool.
pub fn prepare<T: Scalar>(pools: &Pools<T>, cfg: &EngineConfig) -> Result<Prepared<T>, EngineError> {
    cfg.validate()?;
    pools.validate()?;
    let model = ClusterModel::fit(&pools.real_emb, &pools.cal_emb, &cluster_config(cfg))?;
    prepare_with(model, pools, cfg)
}

/// As [`prepare`] with an already fitted clustering.
pub fn prepare_with<T: Scalar>(model: ClusterModel<T>, pools: &Pools<T>, cfg: &EngineConfig) -> Result<Prepared<T>, EngineError> {
    pools.validate()?;
    let r = model.similarity(T::lit(cfg.sigma))?.r;
    let real_clusters = model.assign_all(&pools.real_emb)?;
    let pool_clusters = model.assign_all(&pools.pool_emb)?;
    let cal_clusters = model.assign_all(&pools.cal_emb)?;
    let mut pool_counts = vec![0; model.k];
    for &c in &pool_clusters {
        pool_counts[c] += 1;
    }
    Ok(Prepared {
        n_total: pools.real_ids.len() + cfg.budget,
        r,
        real_clusters,
        pool_clusters,
        cal_clusters,
        pool_counts,
        pool_unit: unit_all("synthetic", &pools.pool_emb)?,
        cal_unit: unit_all("calibration", &pools.cal_emb)?,
        model,
    })
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub method: Method,
    pub round: usize,
    /// Realized mixture of real plus selected tokens.
    pub mixture: Vec<f64>,
    pub cluster_scores: Vec<Option<f64>>,
    pub overall: f64,
    pub selected: Vec<String>,
    /// Selected tokens per cluster.
    pub selected_counts: Vec<usize>,
    /// `r_k` of the realized mixture.
    pub synthetic_ratio: Vec<f64>,
    pub predictor: Option<PredictorParams<f64>>,
    pub gains: Option<GainVector<f64>>,
    /// Round whose mixture warm-started this one.
    pub warm_start: Option<usize>,
    /// Optimizer mixture after the feasibility search.
    pub target_mixture: Option<Vec<f64>>,
    pub resolution: Option<SearchResolution>,
    pub delta: Option<Vec<usize>>,
    pub eta: Option<f64>,
    /// Per-calibration-scene scores, in calibration order.
    pub scene_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_s: Option<f64>,
}

impl RoundRecord {
    pub fn observation<T: Scalar>(&self) -> Result<RoundObservation<T>, GaError> {
        let w = MixtureVector::from_unnormalized(&self.mixture.iter().map(|&x| T::lit(x)).collect::<Vec<_>>())?;
        Ok(RoundObservation { w, s_bar: self.cluster_scores.iter().map(|s| s.map(T::lit)).collect() })
    }
}

pub fn write_record<W: Write>(mut w: W, rec: &RoundRecord) -> Result<(), EngineError> {
    serde_json::to_writer(&mut w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parses a JSONL round log; line numbers in errors are 1-based.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<RoundRecord>, EngineError> {
    let mut out: Vec<RoundRecord> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord =
            serde_json::from_str(&line).map_err(|e| EngineError::Log { line: n, message: e.to_string() })?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(EngineError::Log {
                line: n,
                message: format!("schema version {} (this engine writes {SCHEMA_VERSION})", rec.schema_version),
            });
        }
        if rec.round != out.len() {
            return Err(EngineError::Log { line: n, message: format!("round {} where {} was expected", rec.round, out.len()) });
        }
        if let Some(first) = out.first() {
            if first.method != rec.method {
                return Err(EngineError::Log { line: n, message: "method changes within the log".into() });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_log_file(path: &std::path::Path) -> Result<Vec<RoundRecord>, EngineError> {
    read_log(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Earliest round with the highest overall score.
pub fn best_round(records: &[RoundRecord]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for r in records {
        if best.is_none_or(|(s, _)| r.overall > s) {
            best = Some((r.overall, r.round));
        }
    }
    best.map(|b| b.1)
}

/// Surrogate pair samples of a finished log.
pub fn history_pairs(records: &[RoundRecord], prep: &Prepared<f64>, weighting: PairWeighting) -> Result<Vec<PairSample<f64>>, EngineError> {
    let obs = records.iter().map(|r| r.observation()).collect::<Result<Vec<_>, _>>()?;
    Ok(build_pairs(&obs, &prep.model.n0, prep.n_total, weighting)?)
}

struct Plan<T> {
    selected: Vec<usize>,
    rows: Vec<SelectionRecord>,
    predictor: Option<PredictorParams<T>>,
    gains: Option<GainVector<T>>,
    warm_start: Option<usize>,
    target: Option<MixtureVector<T>>,
    resolution: Option<SearchResolution>,
    delta: Option<Vec<usize>>,
    eta: Option<T>,
}

impl<T> Plan<T> {
    fn select(selected: Vec<usize>, rows: Vec<SelectionRecord>) -> Self {
        Self {
            selected,
            rows,
            predictor: None,
            gains: None,
            warm_start: None,
            target: None,
            resolution: None,
            delta: None,
            eta: None,
        }
    }
}

struct GaStep<T> {
    predictor: PredictorParams<T>,
    gradient: Vec<T>,
    eps: f64,
    eta: T,
    target: MixtureVector<T>,
    resolution: SearchResolution,
    gains: GainVector<T>,
    delta: Vec<usize>,
}

/// Predictor fit, gradient, EG step, feasible search, gains and δ for round
/// `t` from `w_prev`. `None` when the history yields no pair rows.
fn ga_step<T: Scalar>(
    prep: &Prepared<T>,
    cfg: &EngineConfig,
    records: &[RoundRecord],
    w_prev: &MixtureVector<T>,
    t: usize,
    seed: u64,
) -> Result<Option<GaStep<T>>, EngineError> {
    let n0 = &prep.model.n0;
    let history = records.iter().map(|r| r.observation()).collect::<Result<Vec<RoundObservation<T>>, _>>()?;
    let fitted = build_pairs(&history, n0, prep.n_total, cfg.pair_weighting)
        .and_then(|pairs| fit_predictor(&pairs, &prep.r, T::lit(cfg.lambda_reg)));
    let p = match fitted {
        Err(GaError::NoRows) => return Ok(None),
        Err(e) => return Err(e.into()),
        Ok(p) => p,
    };
    let g = gradient(&p, &prep.r, &prep.model.pi, w_prev, n0, prep.n_total);
    let eps = half_cosine_schedule(t, cfg.rounds, cfg.eps_max)?;
    let step = eg_update(w_prev, &g, T::lit(eps))?;
    let set = FeasibleSet::new(n0, &prep.pool_counts, prep.n_total)?;
    let surrogate = Surrogate { params: &p, r: &prep.r, pi: &prep.model.pi, n0, n_total: prep.n_total };
    let found = feasible_search(&step.w, w_prev, &set, &surrogate, derive_seed(seed, 1), &cfg.search)?;
    let gv = gains(&p, &prep.r, w_prev, &found.w, n0, prep.n_total);
    let delta = augmentation_sizes_capped(&found.w, n0, prep.n_total, Some(&prep.pool_counts));
    Ok(Some(GaStep {
        predictor: p,
        gradient: g,
        eps,
        eta: step.eta,
        target: found.w,
        resolution: found.how,
        gains: gv,
        delta,
    }))
}

fn plan_autoscale<T: Scalar>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    cfg: &EngineConfig,
    records: &[RoundRecord],
    t: usize,
    seed: u64,
) -> Result<Plan<T>, EngineError> {
    let k = prep.model.k;
    let t_star = best_round(records).expect("round 0 precedes every optimization round");
    let prev = &records[t_star];
    let scores: Vec<T> = prev.scene_scores.iter().map(|&s| T::lit(s)).collect();
    let scenes: Vec<CalibrationScene<'_, T>> = (0..pools.cal_ids.len())
        .map(|i| CalibrationScene {
            token_id: &pools.cal_ids[i],
            cluster: prep.cal_clusters[i],
            score: scores[i],
            embedding: &prep.cal_unit[i],
        })
        .collect();
    let anchors = select_anchors(&scenes, &cfg.anchors);
    let w_prev: MixtureVector<T> = prev.observation()?.w;
    let mut plan = Plan::select(Vec::new(), Vec::new());
    plan.warm_start = Some(t_star);
    let mut alpha = vec![T::zero(); k];
    if t >= 2 {
        match ga_step(prep, cfg, records, &w_prev, t, seed)? {
            None => log::warn!("round {t}: no pair rows; retrieving without gains"),
            Some(step) => {
                alpha.clone_from(&step.gains.alpha);
                plan.delta = Some(step.delta);
                plan.eta = Some(step.eta);
                plan.resolution = Some(step.resolution);
                plan.target = Some(step.target);
                plan.gains = Some(step.gains);
                plan.predictor = Some(step.predictor);
            }
        }
    }
    let got = retrieve(&anchors, &pools.pool_ids, &prep.pool_unit, &alpha, cfg.budget, derive_seed(seed, 2));
    if got.shortfall > 0 {
        log::warn!("round {t}: pool short of the budget by {}", got.shortfall);
    }
    plan.selected = got.indices();
    plan.rows = SelectionRecord::from_retrieval(&got, &anchors);
    Ok(plan)
}

fn plan_baseline<T: Scalar>(prep: &Prepared<T>, pools: &Pools<T>, cfg: &EngineConfig, seed: u64) -> Result<Plan<T>, EngineError> {
    let (indices, priorities) = match cfg.method {
        Method::Uniform => (uniform_select(pools.pool_ids.len(), cfg.budget, seed).indices, None),
        Method::Iwr => {
            let res = iwr_select(&pools.real_emb, &pools.pool_emb, &pools.pool_ids, cfg.budget, &cfg.iwr)?;
            (res.selection.indices, Some(f64s(&res.log_weights)))
        }
        Method::Chameleon => {
            let nearest: Vec<usize> = pools
                .pool_emb
                .iter()
                .map(|v| nearest_centroid(&prep.model.centroids, &prep.model.project(v).expect("validated embedding")))
                .collect();
            let res = chameleon_select(&prep.model.centroids, &nearest, cfg.budget, T::lit(cfg.chameleon_lambda), seed)?;
            (res.selection.indices, None)
        }
        Method::Autoscale => unreachable!("autoscale is planned by plan_autoscale"),
    };
    let rows = SelectionRecord::from_indices(cfg.method.name(), &indices, &pools.pool_ids, priorities.as_deref());
    Ok(Plan::select(indices, rows))
}

fn plan_round<T: Scalar>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    cfg: &EngineConfig,
    records: &[RoundRecord],
    t: usize,
) -> Result<Plan<T>, EngineError> {
    let seed = derive_seed(cfg.seed, STREAM_ROUND + t as u64);
    match (t, cfg.method) {
        (0, _) => Ok(Plan::select(Vec::new(), Vec::new())),
        (_, Method::Autoscale) => plan_autoscale(prep, pools, cfg, records, t, seed),
        _ => plan_baseline(prep, pools, cfg, seed),
    }
}

fn check_open(records: &[RoundRecord], cfg: &EngineConfig) -> Result<(), EngineError> {
    if records.len() > cfg.final_round() {
        return Err(EngineError::Config(format!(
            "log already holds rounds 0..={}; raise `rounds` to plan round {}",
            cfg.final_round(),
            records.len()
        )));
    }
    Ok(())
}

/// Cluster-GA quantities for the round after `records`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub round: usize,
    pub warm_start: usize,
    pub predictor: PredictorParams<f64>,
    pub gradient: Vec<f64>,
    pub eps: f64,
    pub eta: f64,
    pub target_mixture: Vec<f64>,
    pub resolution: SearchResolution,
    pub gains: Vec<f64>,
    pub delta: Vec<usize>,
}

/// The optimization step the engine would take after `records`; needs at
/// least two logged rounds.
pub fn optimize_step<T: Scalar>(prep: &Prepared<T>, cfg: &EngineConfig, records: &[RoundRecord]) -> Result<OptimizeReport, EngineError> {
    cfg.validate()?;
    check_history(records, cfg)?;
    if records.len() < 2 {
        return Err(EngineError::InsufficientHistory { got: records.len(), needed: 2 });
    }
    check_open(records, cfg)?;
    let t = records.len();
    let t_star = best_round(records).expect("non-empty history");
    let w_prev: MixtureVector<T> = records[t_star].observation()?.w;
    let step = ga_step(prep, cfg, records, &w_prev, t, derive_seed(cfg.seed, STREAM_ROUND + t as u64))?
        .ok_or(EngineError::Ga(GaError::NoRows))?;
    Ok(OptimizeReport {
        round: t,
        warm_start: t_star,
        predictor: PredictorParams {
            beta: f64s(&step.predictor.beta),
            gamma: step.predictor.gamma.as_f64(),
            lambda_reg: step.predictor.lambda_reg.as_f64(),
        },
        gradient: f64s(&step.gradient),
        eps: step.eps,
        eta: step.eta.as_f64(),
        target_mixture: f64s(&step.target.w),
        resolution: step.resolution,
        gains: f64s(&step.gains.alpha),
        delta: step.delta,
    })
}

/// Selection the engine would make for the round after `records`. Baselines
/// ignore the history; AutoScale needs the real-only round.
pub fn next_selection<T: Scalar>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    cfg: &EngineConfig,
    records: &[RoundRecord],
) -> Result<Vec<SelectionRecord>, EngineError> {
    cfg.validate()?;
    check_history(records, cfg)?;
    let t = records.len().max(1);
    if cfg.method == Method::Autoscale && records.is_empty() {
        return Err(EngineError::InsufficientHistory { got: 0, needed: 1 });
    }
    check_open(records, cfg)?;
    Ok(plan_round(prep, pools, cfg, records, t)?.rows)
}

fn f64s<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Trains on `real ∪ selected` and scores the calibration set.
fn evaluate_selection<T: Scalar, O: PolicyOracle>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    oracle: &O,
    selected: &[usize],
    round: usize,
) -> Result<(Vec<f64>, crate::analytics::ClusterScores<T>, T), EngineError> {
    let mut training = pools.real_ids.clone();
    training.extend(selected.iter().map(|&i| pools.pool_ids[i].clone()));
    let handle = oracle.train(&training).map_err(|source| EngineError::Oracle { round, source })?;
    let scores = oracle.evaluate(&handle, &pools.cal_ids).map_err(|source| EngineError::Oracle { round, source })?;
    if scores.len() != pools.cal_ids.len() {
        let msg = format!("{} scores for {} calibration scenes", scores.len(), pools.cal_ids.len());
        return Err(EngineError::Oracle { round, source: OracleError::Failed(msg) });
    }
    if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        let msg = format!("score {} of scene {} outside [0, 1]", scores[i], pools.cal_ids[i]);
        return Err(EngineError::Oracle { round, source: OracleError::Failed(msg) });
    }
    let st: Vec<T> = scores.iter().map(|&s| T::lit(s)).collect();
    let cs = aggregate_scores(&st, &prep.cal_clusters, prep.model.k)?;
    let overall = cs.overall(&prep.model.pi);
    Ok((scores, cs, overall))
}

fn execute_round<T: Scalar, O: PolicyOracle>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    oracle: &O,
    cfg: &EngineConfig,
    records: &[RoundRecord],
    t: usize,
) -> Result<RoundRecord, EngineError> {
    let clock = Instant::now();
    let plan = plan_round(prep, pools, cfg, records, t)?;
    let k = prep.model.k;
    let mut selected_counts = vec![0; k];
    for &i in &plan.selected {
        selected_counts[prep.pool_clusters[i]] += 1;
    }
    let counts: Vec<T> = prep.model.n0.iter().zip(&selected_counts).map(|(&a, &b)| T::from_count(a + b)).collect();
    let mixture = MixtureVector::from_unnormalized(&counts)?;
    let ratio = synthetic_ratio(&mixture.w, &prep.model.n0, prep.n_total);
    let (scene_scores, cs, overall) = evaluate_selection(prep, pools, oracle, &plan.selected, t)?;
    log::info!("round {t} ({}): overall {:.6}", cfg.method.name(), overall.as_f64());
    Ok(RoundRecord {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        round: t,
        mixture: f64s(&mixture.w),
        cluster_scores: cs.s_bar.iter().map(|s| s.map(|x| x.as_f64())).collect(),
        overall: overall.as_f64(),
        selected: plan.selected.iter().map(|&i| pools.pool_ids[i].clone()).collect(),
        selected_counts,
        synthetic_ratio: f64s(&ratio),
        predictor: plan.predictor.map(|p| PredictorParams {
            beta: f64s(&p.beta),
            gamma: p.gamma.as_f64(),
            lambda_reg: p.lambda_reg.as_f64(),
        }),
        gains: plan.gains.map(|g| GainVector { alpha: f64s(&g.alpha) }),
        warm_start: plan.warm_start,
        target_mixture: plan.target.map(|w| f64s(&w.w)),
        resolution: plan.resolution,
        delta: plan.delta,
        eta: plan.eta.map(|e| e.as_f64()),
        scene_scores,
        timing_s: cfg.record_timing.then(|| clock.elapsed().as_secs_f64()),
    })
}

/// Runs every round from scratch; `sink` sees each record as it completes.
pub fn run<T: Scalar, O: PolicyOracle>(
    pools: &Pools<T>,
    oracle: &O,
    cfg: &EngineConfig,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<(), EngineError>,
) -> Result<Vec<RoundRecord>, EngineError> {
    let prep = prepare(pools, cfg)?;
    run_prepared(&prep, pools, oracle, cfg, Vec::new(), sink)
}

/// [`run`] without a sink.
pub fn run_collect<T: Scalar, O: PolicyOracle>(pools: &Pools<T>, oracle: &O, cfg: &EngineConfig) -> Result<Vec<RoundRecord>, EngineError> {
    run(pools, oracle, cfg, &mut |_| Ok(()))
}

/// Continues a partial log; a complete log is returned unchanged.
pub fn resume<T: Scalar, O: PolicyOracle>(
    pools: &Pools<T>,
    oracle: &O,
    cfg: &EngineConfig,
    records: Vec<RoundRecord>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<(), EngineError>,
) -> Result<Vec<RoundRecord>, EngineError> {
    check_history(&records, cfg)?;
    if records.len() > cfg.final_round() {
        return Ok(records);
    }
    let prep = prepare(pools, cfg)?;
    run_prepared(&prep, pools, oracle, cfg, records, sink)
}

fn check_history(records: &[RoundRecord], cfg: &EngineConfig) -> Result<(), EngineError> {
    for (i, r) in records.iter().enumerate() {
        if r.schema_version != SCHEMA_VERSION {
            return Err(EngineError::Resume(format!("record {i} has schema version {}", r.schema_version)));
        }
        if r.method != cfg.method {
            return Err(EngineError::Resume(format!("log method {} differs from config {}", r.method.name(), cfg.method.name())));
        }
        if r.round != i {
            return Err(EngineError::Resume(format!("record {i} is round {}", r.round)));
        }
        if r.mixture.len() != cfg.clusters {
            return Err(EngineError::Resume(format!("record {i} has {} clusters, config {}", r.mixture.len(), cfg.clusters)));
        }
    }
    if records.len() > cfg.final_round() + 1 {
        return Err(EngineError::Resume(format!("log has {} rounds, config stops at {}", records.len(), cfg.final_round())));
    }
    Ok(())
}

/// Round loop over an existing preparation, continuing after `records`.
pub fn run_prepared<T: Scalar, O: PolicyOracle>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    oracle: &O,
    cfg: &EngineConfig,
    mut records: Vec<RoundRecord>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<(), EngineError>,
) -> Result<Vec<RoundRecord>, EngineError> {
    cfg.validate()?;
    check_history(&records, cfg)?;
    if prep.model.k != cfg.clusters {
        return Err(EngineError::Config(format!("clustering has {} clusters, config {}", prep.model.k, cfg.clusters)));
    }
    while records.len() <= cfg.final_round() {
        let rec = execute_round(prep, pools, oracle, cfg, &records, records.len())?;
        sink(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Self/cross outcome of running the engine under two oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    /// Jaccard similarity of the two final selections.
    pub jaccard: f64,
    /// `table[i][j]`: overall score of oracle `i` trained on selection `j`.
    pub table: [[f64; 2]; 2],
    pub selections: [Vec<String>; 2],
}

impl SwapReport {
    /// Whether each oracle scores at least as well on its own selection.
    pub fn self_dominates(&self) -> bool {
        self.table[0][0] >= self.table[0][1] && self.table[1][1] >= self.table[1][0]
    }
}

pub fn swap_experiment<T: Scalar, A: PolicyOracle, B: PolicyOracle>(
    prep: &Prepared<T>,
    pools: &Pools<T>,
    oracle_a: &A,
    oracle_b: &B,
    cfg: &EngineConfig,
) -> Result<SwapReport, EngineError> {
    let sink = &mut |_: &RoundRecord| Ok(());
    let ra = run_prepared(prep, pools, oracle_a, cfg, Vec::new(), sink)?;
    let rb = run_prepared(prep, pools, oracle_b, cfg, Vec::new(), sink)?;
    let index: std::collections::HashMap<&str, usize> =
        pools.pool_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let sel = |r: &[RoundRecord]| -> Vec<usize> {
        r.last().expect("at least one round").selected.iter().map(|id| index[id.as_str()]).collect()
    };
    let (sa, sb) = (sel(&ra), sel(&rb));
    let cross = cfg.final_round();
    let eval_a = |s: &[usize]| evaluate_selection(prep, pools, oracle_a, s, cross).map(|x| x.2.as_f64());
    let eval_b = |s: &[usize]| evaluate_selection(prep, pools, oracle_b, s, cross).map(|x| x.2.as_f64());
    let table = [[eval_a(&sa)?, eval_a(&sb)?], [eval_b(&sa)?, eval_b(&sb)?]];
    let selections = [ra.last().unwrap().selected.clone(), rb.last().unwrap().selected.clone()];
    let j = jaccard(selections[0].iter(), selections[1].iter());
    let report = SwapReport { jaccard: j.value, table, selections };
    if !report.self_dominates() {
        log::info!("swap experiment: self scores do not dominate cross scores: {table:?}");
    }
    Ok(report)
}
