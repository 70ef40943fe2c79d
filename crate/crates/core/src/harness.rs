//! Desk-scale closed loop: procedural driving scenes and a ground-truth
//! mixture-response oracle standing in for planner training and evaluation.
//!
//! The archetype of each token is private to [`World`] and
//! [`GroundTruthOracle`]; engine-facing data carries only ids, graphs,
//! labels and embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::adjusted_rand_index;
use crate::baselines::integer_budget;
use crate::engine::{OracleError, Pools, PolicyOracle};
use crate::graph_rae::{embed_scenes, train, GraphRaeConfig, GraphRaeDims, GraphRaeError};
use crate::metrics::SubscoreVector;
use crate::scalar::Scalar;
use crate::scene::{
    split_calibration, wrap_angle, Command, Dataset, DirectedEdge, EdgeKind, Node, NodeKind, Provenance, SceneError,
    SceneGraph, SceneToken, SemanticLabels,
};

/// Simulation step in seconds.
pub const DT: f64 = 0.5;
const LANE_HALF: f64 = 1.75;
const LANE: f64 = 3.5;
const OVERLAP_RADIUS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    GraphRae(#[from] GraphRaeError),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Cruise,
    LeftTurn,
    RightTurn,
    StopAtCrossing,
    Following,
    LaneChange,
    Roundabout,
    Highway,
}

impl Maneuver {
    pub fn command(self) -> Command {
        match self {
            Maneuver::Cruise | Maneuver::Highway => Command::Straight,
            Maneuver::LeftTurn | Maneuver::Roundabout => Command::Left,
            Maneuver::RightTurn | Maneuver::LaneChange => Command::Right,
            Maneuver::StopAtCrossing | Maneuver::Following => Command::Stop,
        }
    }
}

/// Mixture-response parameters of one archetype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    /// Base score.
    pub a: f64,
    /// Data-return coefficient.
    pub b: f64,
    /// Reference count of the log term.
    pub m_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub name: String,
    pub maneuver: Maneuver,
    /// Share of the real set.
    pub real_share: f64,
    /// Share of the synthetic pool (calibration included).
    pub pool_share: f64,
    pub response: Response,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub archetypes: Vec<Archetype>,
    /// Row k gives how strongly data of archetype j moves archetype k.
    pub hidden_transfer: Vec<Vec<f64>>,
    /// Synthetic-ratio coefficient.
    pub g: f64,
    /// Per-scene score noise.
    pub noise: f64,
    /// Noisy evaluation draws averaged per scene.
    pub eval_draws: usize,
    pub n_real: usize,
    pub n_pool: usize,
    pub n_cal: usize,
    pub t_hist: usize,
    pub t_fut: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let rows: [(&str, Maneuver, f64, f64, f64); 8] = [
            ("cruise", Maneuver::Cruise, 0.30, 0.82, 0.04),
            ("left_turn", Maneuver::LeftTurn, 0.06, 0.34, 0.12),
            ("right_turn", Maneuver::RightTurn, 0.06, 0.42, 0.10),
            ("stop_at_crossing", Maneuver::StopAtCrossing, 0.05, 0.30, 0.13),
            ("following", Maneuver::Following, 0.20, 0.68, 0.06),
            ("lane_change", Maneuver::LaneChange, 0.08, 0.46, 0.09),
            ("roundabout", Maneuver::Roundabout, 0.05, 0.30, 0.13),
            ("highway", Maneuver::Highway, 0.20, 0.80, 0.04),
        ];
        let archetypes = rows
            .iter()
            .map(|&(name, maneuver, real_share, a, b)| Archetype {
                name: name.to_string(),
                maneuver,
                real_share,
                pool_share: 1.0 / 8.0,
                response: Response { a, b, m_ref: 100.0 },
            })
            .collect();
        Self {
            archetypes,
            hidden_transfer: paired_transfer(8, 0.5, 0.02),
            g: -0.05,
            noise: 0.1,
            eval_draws: 10,
            n_real: 800,
            n_pool: 4000,
            n_cal: 400,
            t_hist: 8,
            t_fut: 4,
            seed: 0,
        }
    }
}

/// Transfer matrix with unit diagonal, `partner` between archetypes `2i`
/// and `2i+1` of [`Default`]'s behavioral pairs, `background` elsewhere.
///
/// Pairs share a driving command: cruise/highway, left turn/roundabout,
/// right turn/lane change, stop at crossing/following.
pub fn paired_transfer(k: usize, partner: f64, background: f64) -> Vec<Vec<f64>> {
    let pair_of = |i: usize| -> Option<usize> {
        match (i, k) {
            (0, 8) => Some(7),
            (7, 8) => Some(0),
            (1, 8) => Some(6),
            (6, 8) => Some(1),
            (2, 8) => Some(5),
            (5, 8) => Some(2),
            (3, 8) => Some(4),
            (4, 8) => Some(3),
            _ => None,
        }
    };
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if pair_of(i) == Some(j) {
                        partner
                    } else {
                        background
                    }
                })
                .collect()
        })
        .collect()
}

impl WorldSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn k(&self) -> usize {
        self.archetypes.len()
    }

    pub fn t_len(&self) -> usize {
        self.t_hist + self.t_fut
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: WorldSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("world spec serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Spec(m));
        let k = self.k();
        if k == 0 {
            return err("at least one archetype is required".into());
        }
        if self.t_hist == 0 || self.t_fut == 0 {
            return err("t_hist and t_fut must be positive".into());
        }
        if self.n_real == 0 || self.n_pool == 0 || self.n_cal == 0 {
            return err("n_real, n_pool and n_cal must be positive".into());
        }
        if self.eval_draws == 0 {
            return err("eval_draws must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.g.is_finite() {
            return err("noise must be finite and nonnegative, g finite".into());
        }
        for a in &self.archetypes {
            let r = a.response;
            if !(0.0..=1.0).contains(&r.a) {
                return err(format!("archetype {}: a = {} outside [0, 1]", a.name, r.a));
            }
            if !(r.b.is_finite() && r.m_ref > 0.0 && r.m_ref.is_finite()) {
                return err(format!("archetype {}: b must be finite and m_ref positive", a.name));
            }
            if !(a.real_share >= 0.0 && a.pool_share > 0.0) {
                return err(format!("archetype {}: real_share must be >= 0 and pool_share > 0", a.name));
            }
        }
        if self.archetypes.iter().map(|a| a.real_share).sum::<f64>() <= 0.0 {
            return err("real shares sum to zero".into());
        }
        if self.hidden_transfer.len() != k || self.hidden_transfer.iter().any(|r| r.len() != k) {
            return err(format!("hidden_transfer must be {k}x{k}"));
        }
        for (i, row) in self.hidden_transfer.iter().enumerate() {
            if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return err(format!("hidden_transfer row {i} has a negative or non-finite entry"));
            }
            if row.iter().enumerate().any(|(j, &x)| j != i && x >= row[i]) {
                return err(format!("hidden_transfer row {i} is not diagonal dominant"));
            }
        }
        Ok(())
    }

    fn shares(&self, f: impl Fn(&Archetype) -> f64) -> Vec<f64> {
        let raw: Vec<f64> = self.archetypes.iter().map(f).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }
}

/// Generated datasets plus the private archetype of every token.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub real: Dataset,
    pub syn_pool: Dataset,
    pub cal: Dataset,
    archetype: HashMap<String, usize>,
}

/// Per-archetype scene and label statistics with no token-level mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldCensus {
    pub real: Vec<usize>,
    pub pool: Vec<usize>,
    pub cal: Vec<usize>,
}

impl World {
    pub fn census(&self) -> WorldCensus {
        let count = |d: &Dataset| {
            let mut c = vec![0; self.spec.k()];
            for id in d.ids() {
                c[self.archetype[id]] += 1;
            }
            c
        };
        WorldCensus { real: count(&self.real), pool: count(&self.syn_pool), cal: count(&self.cal) }
    }

    /// Adjusted Rand index between cluster ids and hidden archetypes.
    pub fn cluster_agreement(&self, ids: &[String], clusters: &[usize]) -> Result<f64, HarnessError> {
        let truth = ids
            .iter()
            .map(|id| self.archetype.get(id).copied().ok_or_else(|| HarnessError::Spec(format!("unknown token {id}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(adjusted_rand_index(&truth, clusters))
    }

    /// Hidden archetype of a token.
    pub fn archetype_of(&self, id: &str) -> Option<usize> {
        self.archetype.get(id).copied()
    }

    /// Transfer that decays with scene similarity between archetypes:
    /// `T_kj = exp(−D²_kj / (2 (scale·ℓ)²))` with `T_kk = 1`, where `D` is the
    /// distance between archetype means of standardized real-scene
    /// descriptors (ego sequence plus node-kind counts) and `ℓ` the median
    /// off-diagonal distance.
    pub fn similarity_transfer(&self, scale: f64) -> Vec<Vec<f64>> {
        let k = self.spec.k();
        let rows: Vec<(usize, Vec<f64>)> = self
            .real
            .ids()
            .map(|id| (self.archetype[id], scene_descriptor(self.real.graph(id).expect("generated graph"))))
            .collect();
        let dim = rows.iter().map(|(_, d)| d.len()).min().unwrap_or(0);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for (_, d) in &rows {
            for j in 0..dim {
                mean[j] += d[j] / n;
            }
        }
        for (_, d) in &rows {
            for j in 0..dim {
                var[j] += (d[j] - mean[j]).powi(2) / n;
            }
        }
        let mut centroid = vec![vec![0.0; dim]; k];
        let mut count = vec![0usize; k];
        for (a, d) in &rows {
            count[*a] += 1;
            for j in 0..dim {
                if var[j] > 0.0 {
                    centroid[*a][j] += (d[j] - mean[j]) / var[j].sqrt();
                }
            }
        }
        for (c, &m) in centroid.iter_mut().zip(&count) {
            c.iter_mut().for_each(|x| *x /= m.max(1) as f64);
        }
        let dist = |a: usize, b: usize| centroid[a].iter().zip(&centroid[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut off: Vec<f64> = (0..k).flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| dist(a, b)).collect();
        off.sort_by(f64::total_cmp);
        let ell = scale * off.get(off.len() / 2).copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
        (0..k)
            .map(|a| (0..k).map(|b| if a == b { 1.0 } else { (-dist(a, b).powi(2) / (2.0 * ell * ell)).exp() }).collect())
            .collect()
    }

    /// Oracle with the world's own response parameters.
    pub fn oracle(&self) -> GroundTruthOracle {
        let responses = self.spec.archetypes.iter().map(|a| a.response).collect();
        GroundTruthOracle::new(self, responses)
    }

    /// Ids of the three pools in dataset order.
    pub fn ids(&self) -> (Vec<String>, Vec<String>, Vec<String>) {
        let own = |d: &Dataset| d.ids().map(str::to_string).collect();
        (own(&self.real), own(&self.syn_pool), own(&self.cal))
    }

    /// Embeds all three pools with a Graph-RAE trained on the real set.
    /// The encoder runs in `S`; embeddings are widened to `f64`.
    pub fn embed<S: Scalar>(&self, cfg: &GraphRaeConfig) -> Result<Pools<f64>, HarnessError> {
        let model = train::<S>(&self.real, cfg)?;
        let embed = |d: &Dataset| -> Result<Vec<Vec<f64>>, HarnessError> {
            let graphs: Vec<&SceneGraph> = d.ids().map(|id| d.graph(id).expect("generated graph")).collect();
            Ok(embed_scenes(&graphs, &model.params, 64)?
                .into_iter()
                .map(|e| e.v.iter().map(|x| x.as_f64()).collect())
                .collect())
        };
        let (real_ids, pool_ids, cal_ids) = self.ids();
        Ok(Pools {
            real_emb: embed(&self.real)?,
            pool_emb: embed(&self.syn_pool)?,
            cal_emb: embed(&self.cal)?,
            real_ids,
            pool_ids,
            cal_ids,
        })
    }
}

/// Flattened ego sequence followed by per-kind node counts.
fn scene_descriptor(g: &SceneGraph) -> Vec<f64> {
    let mut d: Vec<f64> = g.ego_index().map(|i| g.nodes[i].sequence.concat()).unwrap_or_default();
    d.extend(NodeKind::ALL.iter().map(|&kind| g.nodes.iter().filter(|n| n.kind == kind).count() as f64));
    d
}

/// Graph-RAE configuration used for harness worlds.
pub fn harness_graph_rae(spec: &WorldSpec) -> GraphRaeConfig {
    GraphRaeConfig {
        dims: GraphRaeDims { d: 32, heads: 4, layers: 2, t_len: spec.t_len() },
        steps: 150,
        batch_size: 16,
        seed: spec.seed ^ 0x9e37_79b9_7f4a_7c15,
        ..GraphRaeConfig::default()
    }
}

fn token_id(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let id = format!("{:016x}", rng.next_u64());
        if used.insert(id.clone()) {
            return id;
        }
    }
}

/// Procedural real, synthetic-pool and calibration sets.
///
/// Calibration is split off a pool of `n_pool + n_cal` scenes stratified by
/// archetype.
pub fn generate_world(spec: &WorldSpec) -> Result<World, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let real_counts = integer_budget(&spec.shares(|a| a.real_share), spec.n_real);
    let pool_counts = integer_budget(&spec.shares(|a| a.pool_share), spec.n_pool + spec.n_cal);
    let mut used = BTreeSet::new();
    let mut archetype = HashMap::new();
    let mut build = |counts: &[usize], prov: Provenance, rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
        order.shuffle(rng);
        let mut d = Dataset::new();
        for k in order {
            let id = token_id(rng, &mut used);
            let a = &spec.archetypes[k];
            let scene = generate_scene(a.maneuver, spec.t_hist, spec.t_fut, rng);
            let metrics = (prov == Provenance::Real).then(|| synth_subscores(&scene, rng));
            archetype.insert(id.clone(), k);
            d.push(SceneToken::new(id, prov), scene.graph, scene.labels, metrics);
        }
        d
    };
    let real = build(&real_counts, Provenance::Real, &mut rng);
    let pool = build(&pool_counts, Provenance::Synthetic, &mut rng);
    let strata: BTreeMap<String, usize> = pool.ids().map(|id| (id.to_string(), archetype[id])).collect();
    let fraction = spec.n_cal as f64 / (spec.n_pool + spec.n_cal) as f64;
    let (mut cal, syn_pool) = split_calibration(&pool, fraction, &strata, rng.next_u64())?;
    let cal_ids: Vec<String> = cal.ids().map(str::to_string).collect();
    for id in cal_ids {
        let g = cal.graph(&id).expect("split keeps graphs").clone();
        let labels = *cal.labels(&id).expect("split keeps labels");
        let m = synth_subscores(&Scene { graph: g, labels }, &mut rng);
        cal.set_metrics(&id, m);
    }
    Ok(World { spec: spec.clone(), real, syn_pool, cal, archetype })
}

struct Scene {
    graph: SceneGraph,
    labels: SemanticLabels,
}

/// Dynamic rows `[x, y, θ, κ, ν]` from per-step speed and curvature.
fn integrate(x0: f64, y0: f64, th0: f64, speed: &[f64], kappa: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(speed.len());
    let (mut x, mut y, mut th) = (x0, y0, th0);
    for t in 0..speed.len() {
        if t > 0 {
            let v = speed[t - 1];
            let mid = th + 0.5 * kappa[t - 1] * v * DT;
            x += v * DT * mid.cos();
            y += v * DT * mid.sin();
            th += kappa[t - 1] * v * DT;
        }
        out.push(vec![x, y, wrap_angle(th), kappa[t], speed[t]]);
    }
    out
}

/// Polyline of `n` points offset laterally from a path; rows `[x, y, θ, κ]`.
fn offset_polyline(path: &[Vec<f64>], lateral: f64) -> Vec<Vec<f64>> {
    path.iter()
        .map(|r| {
            let (s, c) = r[2].sin_cos();
            let k = r[3] / (1.0 - r[3] * lateral).max(0.1);
            vec![r[0] - s * lateral, r[1] + c * lateral, r[2], k]
        })
        .collect()
}

/// Straight polyline of `n` points from `start` along `heading`.
fn straight(n: usize, x: f64, y: f64, heading: f64, spacing: f64) -> Vec<Vec<f64>> {
    let (s, c) = heading.sin_cos();
    (0..n).map(|i| vec![x + c * spacing * i as f64, y + s * spacing * i as f64, wrap_angle(heading), 0.0]).collect()
}

fn const_agent(n: usize, x: f64, y: f64, heading: f64, v: f64, kappa: f64) -> Vec<Vec<f64>> {
    integrate(x, y, heading, &vec![v; n], &vec![kappa; n])
}

fn generate_scene(m: Maneuver, t_hist: usize, t_fut: usize, rng: &mut ChaCha8Rng) -> Scene {
    let n = t_hist + t_fut;
    let now = t_hist - 1;
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    let speed;
    let mut kappa = vec![0.0; n];
    let mut agents: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut crossing: Option<f64> = None;
    let mut lanes_left = 1usize;
    let mut lanes_right = 1usize;
    match m {
        Maneuver::Cruise => {
            let v = u(rng, 8.0, 12.0);
            let k0: f64 = 0.002 * rng.sample::<f64, _>(StandardNormal);
            speed = (0..n).map(|t| (v + 0.1 * t as f64 * u(rng, -1.0, 1.0)).max(0.5)).collect();
            kappa.iter_mut().for_each(|x| *x = k0);
            for _ in 0..rng.random_range(1..=2) {
                let side = if rng.random_bool(0.5) { LANE } else { -LANE };
                agents.push(const_agent(n, u(rng, -30.0, 40.0), side, 0.0, v + u(rng, -2.0, 2.0), k0));
            }
        }
        Maneuver::Highway => {
            let v = u(rng, 22.0, 28.0);
            let k0: f64 = 0.0008 * rng.sample::<f64, _>(StandardNormal);
            speed = vec![v; n];
            kappa.iter_mut().for_each(|x| *x = k0);
            lanes_left = 2;
            lanes_right = 2;
            for _ in 0..rng.random_range(2..=4) {
                let lane = [-2.0, -1.0, 1.0, 2.0][rng.random_range(0..4)] * LANE;
                agents.push(const_agent(n, u(rng, -60.0, 80.0), lane, 0.0, v + u(rng, -4.0, 4.0), k0));
            }
        }
        Maneuver::LeftTurn | Maneuver::RightTurn => {
            let left = m == Maneuver::LeftTurn;
            let v = if left { u(rng, 4.0, 7.0) } else { u(rng, 3.5, 6.0) };
            let radius = if left { u(rng, 9.0, 14.0) } else { u(rng, 6.0, 10.0) };
            let start = rng.random_range(now.saturating_sub(3)..=now);
            speed = vec![v; n];
            for (t, k) in kappa.iter_mut().enumerate() {
                let ramp = ((t as f64 - start as f64 + 1.0) / 2.0).clamp(0.0, 1.0);
                *k = ramp * if left { 1.0 / radius } else { -1.0 / radius };
            }
            if left {
                for _ in 0..rng.random_range(1..=2) {
                    agents.push(const_agent(n, u(rng, 25.0, 50.0), LANE, std::f64::consts::PI, u(rng, 6.0, 11.0), 0.0));
                }
            } else if rng.random_bool(0.6) {
                let x = u(rng, 6.0, 12.0);
                agents.push(const_agent(n, x, -u(rng, 6.0, 9.0), std::f64::consts::FRAC_PI_2, u(rng, 1.0, 1.6), 0.0));
            }
        }
        Maneuver::Roundabout => {
            let v = u(rng, 5.0, 8.0);
            let radius = u(rng, 14.0, 20.0);
            speed = vec![v; n];
            kappa.iter_mut().for_each(|k| *k = 1.0 / radius);
            for _ in 0..rng.random_range(1..=3) {
                let lead = u(rng, 8.0, 25.0) * if rng.random_bool(0.7) { 1.0 } else { -1.0 };
                let phase = lead / radius;
                let (x, y) = (radius * phase.sin(), radius * (1.0 - phase.cos()));
                agents.push(const_agent(n, x, y, phase, u(rng, 4.5, 8.5), 1.0 / radius));
            }
        }
        Maneuver::LaneChange => {
            let v = u(rng, 10.0, 14.0);
            let amp = u(rng, 0.012, 0.022);
            let start = rng.random_range(now.saturating_sub(2)..=now);
            speed = vec![v; n];
            for (t, k) in kappa.iter_mut().enumerate() {
                let phase = (t as f64 - start as f64) / 8.0;
                if (0.0..1.0).contains(&phase) {
                    *k = -amp * (2.0 * std::f64::consts::PI * phase).sin();
                }
            }
            lanes_right = 2;
            agents.push(const_agent(n, u(rng, -25.0, -8.0), -LANE, 0.0, v + u(rng, 0.0, 3.0), 0.0));
            if rng.random_bool(0.5) {
                agents.push(const_agent(n, u(rng, 15.0, 35.0), 0.0, 0.0, v - u(rng, 1.0, 4.0), 0.0));
            }
        }
        Maneuver::StopAtCrossing => {
            let v0 = u(rng, 6.0, 9.0);
            let decel = v0 / ((n as f64 - 2.0) * DT) * u(rng, 0.9, 1.1);
            speed = (0..n).map(|t| (v0 - decel * t as f64 * DT).max(0.0)).collect();
            let travelled: f64 = speed.iter().map(|v| v * DT).sum();
            let cx = travelled + u(rng, 2.0, 5.0);
            crossing = Some(cx);
            for _ in 0..rng.random_range(1..=3) {
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let y0 = -dir * u(rng, 2.0, 8.0);
                let x = cx + u(rng, -1.5, 1.5);
                agents.push(const_agent(n, x, y0, dir * std::f64::consts::FRAC_PI_2, u(rng, 1.0, 1.6), 0.0));
            }
        }
        Maneuver::Following => {
            let v0 = u(rng, 6.0, 10.0);
            let decel = u(rng, 1.2, 2.2);
            speed = (0..n).map(|t| (v0 - decel * t as f64 * DT).max(0.0)).collect();
            let gap = u(rng, 7.0, 13.0);
            let lead: Vec<f64> = speed.iter().map(|v| (v - 0.3).max(0.0)).collect();
            agents.push(integrate(gap, 0.0, 0.0, &lead, &vec![0.0; n]));
            if rng.random_bool(0.5) {
                agents.push(const_agent(n, u(rng, -20.0, 20.0), LANE, 0.0, u(rng, 5.0, 11.0), 0.0));
            }
        }
    }
    let ego = integrate(0.0, 0.0, 0.0, &speed, &kappa);
    // Map polylines follow the ego path geometry at a fixed arc spacing.
    let spacing: Vec<f64> = vec![3.0 / DT; n];
    let start = &ego[0];
    let center = integrate(start[0] - 6.0 * start[2].cos(), start[1] - 6.0 * start[2].sin(), start[2], &spacing, &kappa);
    let mut map: Vec<(NodeKind, Vec<Vec<f64>>)> = Vec::new();
    for i in 0..lanes_left {
        map.push((NodeKind::MapDivider, offset_polyline(&center, LANE_HALF + LANE * i as f64)));
    }
    for i in 0..lanes_right {
        map.push((NodeKind::MapDivider, offset_polyline(&center, -LANE_HALF - LANE * i as f64)));
    }
    map.push((NodeKind::MapBoundary, offset_polyline(&center, LANE_HALF + LANE * lanes_left as f64)));
    map.push((NodeKind::MapBoundary, offset_polyline(&center, -LANE_HALF - LANE * lanes_right as f64)));
    if let Some(cx) = crossing {
        let half = LANE_HALF + LANE * lanes_right as f64;
        let pts = straight(n, cx, -half, std::f64::consts::FRAC_PI_2, 2.0 * half / (n as f64 - 1.0));
        map.push((NodeKind::MapPedCrossing, pts));
    }
    let overlap = ego[now + 1..].iter().enumerate().any(|(i, e)| {
        let t = now + 1 + i;
        agents.iter().any(|a| (a[t][0] - e[0]).hypot(a[t][1] - e[1]) < OVERLAP_RADIUS)
    }) || crossing.is_some_and(|cx| ego[now + 1..].iter().any(|e| (e[0] - cx).abs() < 1.5));
    let labels = SemanticLabels { command: m.command(), overlap };
    let graph = assemble(ego, agents, map, t_hist, t_fut);
    let pose = &graph.nodes[0].sequence[now];
    let (x, y, th) = (pose[0], pose[1], pose[2]);
    let (s, c) = (-th).sin_cos();
    let graph = graph.rigid_transform(-th, -(c * x - s * y), -(s * x + c * y));
    Scene { graph, labels }
}

fn assemble(
    ego: Vec<Vec<f64>>,
    agents: Vec<Vec<Vec<f64>>>,
    map: Vec<(NodeKind, Vec<Vec<f64>>)>,
    t_hist: usize,
    t_fut: usize,
) -> SceneGraph {
    let mut nodes = vec![Node { kind: NodeKind::Ego, sequence: ego }];
    nodes.extend(agents.into_iter().map(|s| Node { kind: NodeKind::DynamicAgent, sequence: s }));
    let n_dyn = nodes.len();
    nodes.extend(map.into_iter().map(|(kind, s)| Node { kind, sequence: s }));
    let mut edges = Vec::new();
    let mut edge = |kind, src: usize, dst: usize, nodes: &[Node]| {
        edges.push(DirectedEdge { kind, src, dst, sequence: SceneGraph::relative_features(&nodes[src], &nodes[dst]) });
    };
    for src in 1..nodes.len() {
        edge(EdgeKind::AllToEgo, src, 0, &nodes);
    }
    for dst in 1..n_dyn {
        for src in 0..n_dyn {
            if src != dst {
                edge(EdgeKind::DynamicToDynamic, src, dst, &nodes);
            }
        }
        for src in n_dyn..nodes.len() {
            edge(EdgeKind::MapToDynamic, src, dst, &nodes);
        }
    }
    SceneGraph { nodes, edges, t_len: t_hist + t_fut, t_hist, t_fut }
}

/// Subscores loosely tied to scene geometry; gates fail mostly on overlap.
fn synth_subscores(scene: &Scene, rng: &mut ChaCha8Rng) -> SubscoreVector {
    let risky = scene.labels.overlap;
    let gate = |rng: &mut ChaCha8Rng, p_fail: f64| if rng.random_bool(p_fail) { 0.0 } else { 1.0 };
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let ep = u(0.5, 1.0);
    let ttc = if risky { u(0.0, 1.0) } else { 1.0 };
    let (lk, hc, ec, comf) = (u(0.7, 1.0), u(0.7, 1.0), u(0.5, 1.0), u(0.7, 1.0));
    SubscoreVector {
        nc: gate(rng, if risky { 0.2 } else { 0.02 }),
        dac: gate(rng, 0.03),
        ddc: gate(rng, 0.02),
        tlc: gate(rng, 0.02),
        ep,
        ttc,
        lk,
        hc,
        ec,
        comf,
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8], state: u64) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Ground-truth response of a policy trained on a token set.
///
/// Per archetype `k` with training count `m_j` per archetype and synthetic
/// share `r_k`:
/// `s̄_k = clip(a_k + Σ_j T_kj b_j ln(1 + m_j / m⁰_j) + g r_k, 0, 1)`.
/// A scene's score averages `eval_draws` clipped draws of `s̄_k + N(0, σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthOracle {
    archetype: HashMap<String, usize>,
    synthetic: BTreeSet<String>,
    responses: Vec<Response>,
    transfer: Vec<Vec<f64>>,
    g: f64,
    noise: f64,
    draws: usize,
    seed: u64,
}

/// Training-set summary held by a trained oracle policy.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleHandle {
    counts: Vec<usize>,
    synthetic: Vec<usize>,
    fingerprint: u64,
}

impl OracleHandle {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn size(&self) -> usize {
        self.counts.iter().sum()
    }
}

impl GroundTruthOracle {
    pub fn new(world: &World, responses: Vec<Response>) -> Self {
        assert_eq!(responses.len(), world.spec.k(), "one response per archetype");
        Self {
            archetype: world.archetype.clone(),
            synthetic: world.syn_pool.ids().map(str::to_string).collect(),
            responses,
            transfer: world.spec.hidden_transfer.clone(),
            g: world.spec.g,
            noise: world.spec.noise,
            draws: world.spec.eval_draws,
            seed: world.spec.seed,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_g(mut self, g: f64) -> Self {
        self.g = g;
        self
    }

    pub fn with_transfer(mut self, transfer: Vec<Vec<f64>>) -> Self {
        self.transfer = transfer;
        self
    }

    pub fn with_responses(mut self, responses: Vec<Response>) -> Self {
        assert_eq!(responses.len(), self.responses.len());
        self.responses = responses;
        self
    }

    fn archetype_of(&self, id: &str) -> Result<usize, OracleError> {
        self.archetype.get(id).copied().ok_or_else(|| OracleError::UnknownToken(id.to_string()))
    }

    /// Noise-free per-archetype score for a training summary.
    pub fn expected_scores(&self, h: &OracleHandle) -> Vec<f64> {
        let gain: Vec<f64> =
            self.responses.iter().zip(&h.counts).map(|(r, &m)| r.b * (m as f64 / r.m_ref).ln_1p()).collect();
        (0..self.responses.len())
            .map(|k| {
                let ratio = if h.counts[k] > 0 { h.synthetic[k] as f64 / h.counts[k] as f64 } else { 0.0 };
                let s = self.responses[k].a
                    + self.transfer[k].iter().zip(&gain).map(|(t, g)| t * g).sum::<f64>()
                    + self.g * ratio;
                s.clamp(0.0, 1.0)
            })
            .collect()
    }
}

impl PolicyOracle for GroundTruthOracle {
    type Handle = OracleHandle;

    fn train(&self, training: &[String]) -> Result<OracleHandle, OracleError> {
        let k = self.responses.len();
        let mut counts = vec![0; k];
        let mut synthetic = vec![0; k];
        let mut sorted: Vec<&str> = training.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut fingerprint = FNV_OFFSET;
        for id in sorted {
            let a = self.archetype_of(id)?;
            counts[a] += 1;
            if self.synthetic.contains(id) {
                synthetic[a] += 1;
            }
            fingerprint = fnv1a(id.as_bytes(), fingerprint);
            fingerprint = fnv1a(&[0], fingerprint);
        }
        Ok(OracleHandle { counts, synthetic, fingerprint })
    }

    fn evaluate(&self, h: &OracleHandle, calibration: &[String]) -> Result<Vec<f64>, OracleError> {
        let expected = self.expected_scores(h);
        let normal = Normal::new(0.0, self.noise).map_err(|e| OracleError::Failed(e.to_string()))?;
        calibration
            .iter()
            .map(|id| {
                let k = self.archetype_of(id)?;
                if self.noise == 0.0 {
                    return Ok(expected[k]);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(id.as_bytes(), self.seed ^ h.fingerprint));
                let sum: f64 =
                    (0..self.draws).map(|_| (expected[k] + normal.sample(&mut rng)).clamp(0.0, 1.0)).sum();
                Ok(sum / self.draws as f64)
            })
            .collect()
    }
}

/// Weak/strong base-score levels assigned by [`oracle_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub weak_a: Vec<usize>,
    pub weak_b: Vec<usize>,
    pub weak_level: f64,
    pub strong_level: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self { weak_a: vec![1, 3, 6], weak_b: vec![2, 5, 7], weak_level: 0.3, strong_level: 0.75 }
    }
}

/// Two oracles over one world whose weak archetypes are disjoint.
///
/// Each oracle keeps the world's `b`, `m_ref`, transfer and noise; its base
/// score is `weak_level` on its weak set and `strong_level` elsewhere.
pub fn oracle_pair(world: &World, pair: &PairSpec) -> Result<(GroundTruthOracle, GroundTruthOracle), HarnessError> {
    let k = world.spec.k();
    if k < 2 {
        return Err(HarnessError::Spec(format!("oracle_pair needs at least 2 archetypes, world has {k}")));
    }
    let a: BTreeSet<usize> = pair.weak_a.iter().copied().collect();
    let b: BTreeSet<usize> = pair.weak_b.iter().copied().collect();
    if a.is_empty() || b.is_empty() || a.iter().chain(&b).any(|&i| i >= k) {
        return Err(HarnessError::Spec(format!("weak sets must be nonempty archetype indices below {k}")));
    }
    if !a.is_disjoint(&b) {
        return Err(HarnessError::Spec("weak sets of an oracle pair must be disjoint".into()));
    }
    if !(0.0..=1.0).contains(&pair.weak_level) || !(0.0..=1.0).contains(&pair.strong_level) {
        return Err(HarnessError::Spec("pair levels must lie in [0, 1]".into()));
    }
    let make = |weak: &BTreeSet<usize>| {
        let responses = world
            .spec
            .archetypes
            .iter()
            .enumerate()
            .map(|(i, arch)| Response {
                a: if weak.contains(&i) { pair.weak_level } else { pair.strong_level },
                ..arch.response
            })
            .collect();
        GroundTruthOracle::new(world, responses)
    };
    Ok((make(&a), make(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{validate_dataset, validate_pools};

    fn small(seed: u64) -> WorldSpec {
        WorldSpec { n_real: 80, n_pool: 160, n_cal: 40, seed, ..WorldSpec::default() }
    }

    fn ids_of(world: &World, d: &Dataset, k: usize, n: usize) -> Vec<String> {
        d.ids().filter(|id| world.archetype[*id] == k).take(n).map(str::to_string).collect()
    }

    #[test]
    fn default_spec_is_valid_and_round_trips_toml() {
        let s = WorldSpec::default();
        s.validate().unwrap();
        assert_eq!(WorldSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn spec_rejects_bad_transfer_and_scores() {
        let mut s = WorldSpec::default();
        s.hidden_transfer[0][1] = 1.5;
        assert!(matches!(s.validate(), Err(HarnessError::Spec(_))));
        let mut s = WorldSpec::default();
        s.archetypes[2].response.a = 1.2;
        assert!(s.validate().is_err());
        assert!(WorldSpec::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn counts_are_honored_and_graphs_validate() {
        let w = generate_world(&small(3)).unwrap();
        assert_eq!((w.real.len(), w.syn_pool.len(), w.cal.len()), (80, 160, 40));
        for d in [&w.real, &w.syn_pool, &w.cal] {
            let rep = validate_dataset(d);
            assert!(rep.is_valid(), "{:?}", rep.violations.first());
        }
        assert!(validate_pools(&w.real, &w.syn_pool, &w.cal).is_valid());
        let c = w.census();
        assert!(c.pool.iter().all(|&n| n > 0));
        assert_eq!(c.cal, vec![5; 8]);
        assert!(c.real[0] > 3 * c.real[3], "real set is imbalanced: {:?}", c.real);
        assert!(w.real.ids().all(|id| w.real.metrics(id).is_some()));
        assert!(w.cal.ids().all(|id| w.cal.metrics(id).is_some()));
    }

    #[test]
    fn seeds_change_ids_not_schema() {
        let a = generate_world(&small(1)).unwrap();
        let b = generate_world(&small(2)).unwrap();
        let ia: BTreeSet<&str> = a.real.ids().collect();
        assert!(b.real.ids().all(|id| !ia.contains(id)));
        assert_eq!(a.real.len(), b.real.len());
        let again = generate_world(&small(1)).unwrap();
        assert_eq!(a.ids(), again.ids());
    }

    #[test]
    fn ego_is_centered_at_the_current_step() {
        let w = generate_world(&small(5)).unwrap();
        for id in w.syn_pool.ids().take(30) {
            let g = w.syn_pool.graph(id).unwrap();
            let r = &g.nodes[0].sequence[g.t_hist - 1];
            assert!(r[0].abs() < 1e-9 && r[1].abs() < 1e-9 && r[2].abs() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn labels_follow_maneuvers() {
        let w = generate_world(&small(6)).unwrap();
        for d in [&w.real, &w.syn_pool] {
            for id in d.ids() {
                let m = w.spec.archetypes[w.archetype[id]].maneuver;
                assert_eq!(d.labels(id).unwrap().command, m.command());
            }
        }
    }

    #[test]
    fn identity_transfer_is_monotone_in_own_count() {
        let mut spec = small(7);
        spec.hidden_transfer = paired_transfer(8, 0.0, 0.0);
        let w = generate_world(&spec).unwrap();
        let o = w.oracle().with_noise(0.0).with_g(0.0);
        let (real, _, _) = w.ids();
        let base = o.expected_scores(&o.train(&real).unwrap());
        for k in 0..8 {
            let mut more = real.clone();
            more.extend(ids_of(&w, &w.syn_pool, k, 10));
            let s = o.expected_scores(&o.train(&more).unwrap());
            assert!(s[k] > base[k] || base[k] == 1.0, "archetype {k}");
            for j in (0..8).filter(|&j| j != k) {
                assert_eq!(s[j], base[j]);
            }
        }
    }

    #[test]
    fn zero_noise_is_deterministic_and_noisy_scores_are_seeded() {
        let w = generate_world(&small(8)).unwrap();
        let (real, _, cal) = w.ids();
        let o = w.oracle().with_noise(0.0);
        let a = o.evaluate(&o.train(&real).unwrap(), &cal).unwrap();
        let b = o.evaluate(&o.train(&real).unwrap(), &cal).unwrap();
        assert_eq!(a, b);
        let noisy = w.oracle();
        let h = noisy.train(&real).unwrap();
        let x = noisy.evaluate(&h, &cal).unwrap();
        assert_eq!(x, noisy.evaluate(&h, &cal).unwrap());
        assert_ne!(x, a);
        assert!(x.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn no_returns_gives_constant_base_scores() {
        let w = generate_world(&small(9)).unwrap();
        let responses: Vec<Response> =
            w.spec.archetypes.iter().map(|a| Response { b: 0.0, ..a.response }).collect();
        let o = w.oracle().with_responses(responses).with_g(0.0).with_noise(0.0);
        let (real, pool, cal) = w.ids();
        let mut mixed = real.clone();
        mixed.extend(pool.iter().take(100).cloned());
        for set in [&real, &mixed] {
            let s = o.evaluate(&o.train(set).unwrap(), &cal).unwrap();
            for (id, v) in cal.iter().zip(s) {
                assert_eq!(v, w.spec.archetypes[w.archetype[id]].response.a);
            }
        }
    }

    #[test]
    fn foreign_tokens_are_rejected() {
        let w = generate_world(&small(10)).unwrap();
        let o = w.oracle();
        assert!(matches!(o.train(&["nope".to_string()]), Err(OracleError::UnknownToken(_))));
        let h = o.train(&[]).unwrap();
        assert!(o.evaluate(&h, &["nope".to_string()]).is_err());
    }

    #[test]
    fn oracle_pair_has_disjoint_weak_sets() {
        let w = generate_world(&small(11)).unwrap();
        let pair = PairSpec::default();
        let (a, b) = oracle_pair(&w, &pair).unwrap();
        let argmin = |o: &GroundTruthOracle| {
            (0..8).min_by(|&i, &j| o.responses[i].a.total_cmp(&o.responses[j].a)).unwrap()
        };
        assert_ne!(argmin(&a), argmin(&b));
        let (a2, _) = oracle_pair(&w, &pair).unwrap();
        assert_eq!(a, a2);
        let bad = PairSpec { weak_b: vec![1], ..PairSpec::default() };
        assert!(oracle_pair(&w, &bad).is_err());
    }
}
