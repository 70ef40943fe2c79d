//! Scene tokens, heterogeneous spatio-temporal scene graphs and datasets.
//!
//! Node features are ego-centric: the ego vehicle sits at the origin heading
//! along +x at the last history step. Headings are stored wrapped to
//! (−π, π].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::SubscoreVector;

pub const DYNAMIC_WIDTH: usize = 5;
pub const MAP_WIDTH: usize = 4;
pub const EDGE_WIDTH: usize = 4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("calibration fraction {0} is outside (0, 1)")]
    Fraction(f64),
    #[error("token {0} has no cluster id")]
    MissingCluster(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate token id {0}")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
    Calibration,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneToken {
    id: String,
    provenance: Provenance,
}

impl SceneToken {
    pub fn new(id: impl Into<String>, provenance: Provenance) -> Self {
        Self { id: id.into(), provenance }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Ego,
    DynamicAgent,
    MapPedCrossing,
    MapDivider,
    MapBoundary,
}

impl NodeKind {
    pub const ALL: [NodeKind; 5] =
        [NodeKind::Ego, NodeKind::DynamicAgent, NodeKind::MapPedCrossing, NodeKind::MapDivider, NodeKind::MapBoundary];

    pub fn is_dynamic(self) -> bool {
        matches!(self, NodeKind::Ego | NodeKind::DynamicAgent)
    }

    pub fn row_width(self) -> usize {
        if self.is_dynamic() {
            DYNAMIC_WIDTH
        } else {
            MAP_WIDTH
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One graph node: a `t_len`-step feature sequence.
/// Dynamic rows are `[x, y, θ, κ, ν]`, map rows `[x, y, θ, κ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub sequence: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    MapToDynamic,
    DynamicToDynamic,
    AllToEgo,
}

impl EdgeKind {
    /// Whether `src -> dst` is a legal endpoint pairing for this kind.
    pub fn admits(self, src: NodeKind, dst: NodeKind) -> bool {
        match self {
            EdgeKind::MapToDynamic => !src.is_dynamic() && dst == NodeKind::DynamicAgent,
            EdgeKind::DynamicToDynamic => src.is_dynamic() && dst == NodeKind::DynamicAgent,
            EdgeKind::AllToEgo => src != NodeKind::Ego && dst == NodeKind::Ego,
        }
    }
}

/// Directed edge with per-step relative features `[Δx, Δy, Δθ, Δκ]`
/// expressed in the destination node's heading frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub kind: EdgeKind,
    pub src: usize,
    pub dst: usize,
    pub sequence: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<DirectedEdge>,
    pub t_len: usize,
    pub t_hist: usize,
    pub t_fut: usize,
}

impl SceneGraph {
    pub fn ego_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeKind::Ego)
    }

    /// Relative edge feature sequence for `src -> dst`.
    pub fn relative_features(src: &Node, dst: &Node) -> Vec<Vec<f64>> {
        src.sequence
            .iter()
            .zip(&dst.sequence)
            .map(|(s, d)| {
                let (dx, dy) = (s[0] - d[0], s[1] - d[1]);
                let (sin, cos) = d[2].sin_cos();
                vec![cos * dx + sin * dy, -sin * dx + cos * dy, wrap_angle(s[2] - d[2]), s[3] - d[3]]
            })
            .collect()
    }

    /// Applies a rigid transform (rotation about the origin, then translation)
    /// to every node; edge features are recomputed.
    pub fn rigid_transform(&self, rotation: f64, tx: f64, ty: f64) -> SceneGraph {
        let (sin, cos) = rotation.sin_cos();
        let nodes: Vec<Node> = self
            .nodes
            .iter()
            .map(|n| Node {
                kind: n.kind,
                sequence: n
                    .sequence
                    .iter()
                    .map(|r| {
                        let mut out = r.clone();
                        out[0] = cos * r[0] - sin * r[1] + tx;
                        out[1] = sin * r[0] + cos * r[1] + ty;
                        out[2] = wrap_angle(r[2] + rotation);
                        out
                    })
                    .collect(),
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| DirectedEdge {
                kind: e.kind,
                src: e.src,
                dst: e.dst,
                sequence: Self::relative_features(&nodes[e.src], &nodes[e.dst]),
            })
            .collect();
        SceneGraph { nodes, edges, t_len: self.t_len, t_hist: self.t_hist, t_fut: self.t_fut }
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Straight,
    Left,
    Right,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticLabels {
    pub command: Command,
    pub overlap: bool,
}

impl SemanticLabels {
    /// Joint (command, overlap) label used by the supervised contrastive term.
    pub fn joint(&self) -> usize {
        self.command as usize * 2 + usize::from(self.overlap)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    tokens: Vec<SceneToken>,
    graphs: BTreeMap<String, SceneGraph>,
    labels: BTreeMap<String, SemanticLabels>,
    metrics: BTreeMap<String, SubscoreVector>,
}

/// One JSONL record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub provenance: Provenance,
    pub t_len: usize,
    pub t_hist: usize,
    pub t_fut: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<DirectedEdge>,
    pub labels: SemanticLabels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<SubscoreVector>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        token: SceneToken,
        graph: SceneGraph,
        labels: SemanticLabels,
        metrics: Option<SubscoreVector>,
    ) {
        let id = token.id().to_string();
        self.tokens.push(token);
        self.graphs.insert(id.clone(), graph);
        self.labels.insert(id.clone(), labels);
        if let Some(m) = metrics {
            self.metrics.insert(id, m);
        }
    }

    /// Adds a token without a graph. Only useful for building invalid
    /// datasets in validation tests.
    pub fn push_token_only(&mut self, token: SceneToken) {
        self.tokens.push(token);
    }

    pub fn tokens(&self) -> &[SceneToken] {
        &self.tokens
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.id())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn graph(&self, id: &str) -> Option<&SceneGraph> {
        self.graphs.get(id)
    }

    pub fn graph_mut(&mut self, id: &str) -> Option<&mut SceneGraph> {
        self.graphs.get_mut(id)
    }

    pub fn labels(&self, id: &str) -> Option<&SemanticLabels> {
        self.labels.get(id)
    }

    pub fn metrics(&self, id: &str) -> Option<&SubscoreVector> {
        self.metrics.get(id)
    }

    /// Attaches subscores to an existing token; returns false for unknown ids.
    pub fn set_metrics(&mut self, id: &str, m: SubscoreVector) -> bool {
        if !self.graphs.contains_key(id) {
            return false;
        }
        self.metrics.insert(id.to_string(), m);
        true
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tokens.iter().any(|t| t.id() == id)
    }

    /// Count of tokens with `Real` provenance (N0).
    pub fn n_real(&self) -> usize {
        self.tokens.iter().filter(|t| t.provenance() == Provenance::Real).count()
    }

    pub fn record(&self, token: &SceneToken) -> Option<SceneRecord> {
        let g = self.graphs.get(token.id())?;
        Some(SceneRecord {
            id: token.id().to_string(),
            provenance: token.provenance(),
            t_len: g.t_len,
            t_hist: g.t_hist,
            t_fut: g.t_fut,
            nodes: g.nodes.clone(),
            edges: g.edges.clone(),
            labels: *self.labels.get(token.id())?,
            metrics: self.metrics.get(token.id()).copied(),
        })
    }

    fn push_record(&mut self, rec: SceneRecord) {
        let graph =
            SceneGraph { nodes: rec.nodes, edges: rec.edges, t_len: rec.t_len, t_hist: rec.t_hist, t_fut: rec.t_fut };
        self.push(SceneToken::new(rec.id, rec.provenance), graph, rec.labels, rec.metrics);
    }

    /// Copy of the records whose ids are in `keep`, in this dataset's order,
    /// with provenance replaced when `relabel` is set.
    pub fn subset(&self, keep: &BTreeSet<&str>, relabel: Option<Provenance>) -> Dataset {
        let mut out = Dataset::new();
        for t in &self.tokens {
            if keep.contains(t.id()) {
                if let Some(mut rec) = self.record(t) {
                    if let Some(p) = relabel {
                        rec.provenance = p;
                    }
                    out.push_record(rec);
                }
            }
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SceneError> {
        for t in &self.tokens {
            if let Some(rec) = self.record(t) {
                let line = serde_json::to_string(&rec).map_err(|e| SceneError::Parse { line: 0, message: e.to_string() })?;
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset, SceneError> {
        let mut out = Dataset::new();
        let mut seen = BTreeSet::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SceneRecord =
                serde_json::from_str(&line).map_err(|e| SceneError::Parse { line: i + 1, message: e.to_string() })?;
            if !seen.insert(rec.id.clone()) {
                return Err(SceneError::Duplicate(rec.id));
            }
            out.push_record(rec);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SceneError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset, SceneError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_jsonl(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    b: usize,
    n_total: usize,
}

impl Budget {
    pub fn new(n_real: usize, b: usize) -> Self {
        Self { b, n_total: n_real + b }
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_real(&self) -> usize {
        self.n_total - self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    MissingGraph { token: String },
    MissingLabels { token: String },
    DuplicateId { token: String },
    CrossPoolOverlap { token: String, first: Provenance, second: Provenance },
    Horizon { token: String, t_len: usize, t_hist: usize, t_fut: usize },
    EgoCount { token: String, count: usize },
    RowWidth { token: String, node: usize, step: usize, expected: usize, found: usize },
    NodeLength { token: String, node: usize, expected: usize, found: usize },
    EdgeEndpoint { token: String, edge: usize },
    EdgeKindMismatch { token: String, edge: usize },
    EdgeRow { token: String, edge: usize, step: usize },
    EdgeLength { token: String, edge: usize, expected: usize, found: usize },
    NonFinite { token: String, location: String },
    UnwrappedHeading { token: String, location: String, value: f64 },
    MetricsOutOfRange { token: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingGraph { token } => write!(f, "{token}: no scene graph"),
            Violation::MissingLabels { token } => write!(f, "{token}: no semantic labels"),
            Violation::DuplicateId { token } => write!(f, "{token}: duplicate id"),
            Violation::CrossPoolOverlap { token, first, second } => {
                write!(f, "{token}: appears in both {first:?} and {second:?} pools")
            }
            Violation::Horizon { token, t_len, t_hist, t_fut } => {
                write!(f, "{token}: t_hist {t_hist} + t_fut {t_fut} != t_len {t_len}")
            }
            Violation::EgoCount { token, count } => write!(f, "{token}: {count} ego nodes (expected 1)"),
            Violation::RowWidth { token, node, step, expected, found } => {
                write!(f, "{token}: node {node} step {step} has width {found}, expected {expected}")
            }
            Violation::NodeLength { token, node, expected, found } => {
                write!(f, "{token}: node {node} has {found} steps, expected {expected}")
            }
            Violation::EdgeEndpoint { token, edge } => write!(f, "{token}: edge {edge} endpoint out of range"),
            Violation::EdgeKindMismatch { token, edge } => {
                write!(f, "{token}: edge {edge} kind inconsistent with endpoint kinds")
            }
            Violation::EdgeRow { token, edge, step } => write!(f, "{token}: edge {edge} step {step} is not 4 wide"),
            Violation::EdgeLength { token, edge, expected, found } => {
                write!(f, "{token}: edge {edge} has {found} steps, expected {expected}")
            }
            Violation::NonFinite { token, location } => write!(f, "{token}: non-finite value at {location}"),
            Violation::UnwrappedHeading { token, location, value } => {
                write!(f, "{token}: heading {value} at {location} not in (-pi, pi]")
            }
            Violation::MetricsOutOfRange { token } => write!(f, "{token}: subscore outside [0, 1]"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn heading_ok(theta: f64) -> bool {
    use std::f64::consts::PI;
    theta > -PI && theta <= PI
}

fn check_graph(id: &str, g: &SceneGraph, out: &mut Vec<Violation>) {
    let token = || id.to_string();
    if g.t_hist + g.t_fut != g.t_len {
        out.push(Violation::Horizon { token: token(), t_len: g.t_len, t_hist: g.t_hist, t_fut: g.t_fut });
    }
    let egos = g.nodes.iter().filter(|n| n.kind == NodeKind::Ego).count();
    if egos != 1 {
        out.push(Violation::EgoCount { token: token(), count: egos });
    }
    for (ni, n) in g.nodes.iter().enumerate() {
        if n.sequence.len() != g.t_len {
            out.push(Violation::NodeLength { token: token(), node: ni, expected: g.t_len, found: n.sequence.len() });
        }
        for (t, row) in n.sequence.iter().enumerate() {
            if row.len() != n.kind.row_width() {
                out.push(Violation::RowWidth {
                    token: token(),
                    node: ni,
                    step: t,
                    expected: n.kind.row_width(),
                    found: row.len(),
                });
                continue;
            }
            if row.iter().any(|x| !x.is_finite()) {
                out.push(Violation::NonFinite { token: token(), location: format!("node {ni} step {t}") });
            } else if !heading_ok(row[2]) {
                out.push(Violation::UnwrappedHeading {
                    token: token(),
                    location: format!("node {ni} step {t}"),
                    value: row[2],
                });
            }
        }
    }
    for (ei, e) in g.edges.iter().enumerate() {
        if e.src >= g.nodes.len() || e.dst >= g.nodes.len() || e.src == e.dst {
            out.push(Violation::EdgeEndpoint { token: token(), edge: ei });
            continue;
        }
        if !e.kind.admits(g.nodes[e.src].kind, g.nodes[e.dst].kind) {
            out.push(Violation::EdgeKindMismatch { token: token(), edge: ei });
        }
        if e.sequence.len() != g.t_len {
            out.push(Violation::EdgeLength { token: token(), edge: ei, expected: g.t_len, found: e.sequence.len() });
        }
        for (t, row) in e.sequence.iter().enumerate() {
            if row.len() != EDGE_WIDTH {
                out.push(Violation::EdgeRow { token: token(), edge: ei, step: t });
            } else if row.iter().any(|x| !x.is_finite()) {
                out.push(Violation::NonFinite { token: token(), location: format!("edge {ei} step {t}") });
            } else if !heading_ok(row[2]) {
                out.push(Violation::UnwrappedHeading {
                    token: token(),
                    location: format!("edge {ei} step {t}"),
                    value: row[2],
                });
            }
        }
    }
}

/// Lists every invariant violation; an empty report means the dataset is valid.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen: BTreeMap<&str, Provenance> = BTreeMap::new();
    for t in d.tokens() {
        match seen.get(t.id()) {
            Some(&p) if p == t.provenance() => violations.push(Violation::DuplicateId { token: t.id().to_string() }),
            Some(&p) => violations.push(Violation::CrossPoolOverlap {
                token: t.id().to_string(),
                first: p,
                second: t.provenance(),
            }),
            None => {
                seen.insert(t.id(), t.provenance());
            }
        }
    }
    for (id, _) in seen {
        match d.graph(id) {
            None => violations.push(Violation::MissingGraph { token: id.to_string() }),
            Some(g) => check_graph(id, g, &mut violations),
        }
        if d.labels(id).is_none() {
            violations.push(Violation::MissingLabels { token: id.to_string() });
        }
        if let Some(m) = d.metrics(id) {
            if m.validate().is_err() {
                violations.push(Violation::MetricsOutOfRange { token: id.to_string() });
            }
        }
    }
    ValidationReport { violations }
}

/// Validates three pools together (real, synthetic, calibration), which also
/// checks their pairwise disjointness.
pub fn validate_pools(real: &Dataset, syn: &Dataset, cal: &Dataset) -> ValidationReport {
    let mut all = Dataset::new();
    for d in [real, syn, cal] {
        for t in d.tokens() {
            match d.record(t) {
                Some(rec) => all.push_record(rec),
                None => all.push_token_only(t.clone()),
            }
        }
    }
    validate_dataset(&all)
}

/// Per-cluster calibration quota: floor of `fraction × size`, then the
/// remaining global quota goes to the largest fractional remainders (ties by
/// cluster index).
pub fn stratified_quotas(sizes: &BTreeMap<usize, usize>, fraction: f64) -> BTreeMap<usize, usize> {
    let total: usize = sizes.values().sum();
    let target = (fraction * total as f64).round() as usize;
    let mut quotas: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rems: Vec<(f64, usize)> = Vec::new();
    for (&c, &n) in sizes {
        let exact = fraction * n as f64;
        let q = exact.floor() as usize;
        quotas.insert(c, q.min(n));
        rems.push((exact - q as f64, c));
    }
    let assigned: usize = quotas.values().sum();
    rems.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut left = target.saturating_sub(assigned);
    for (_, c) in rems {
        if left == 0 {
            break;
        }
        if quotas[&c] < sizes[&c] {
            *quotas.get_mut(&c).expect("cluster present") += 1;
            left -= 1;
        }
    }
    quotas
}

/// Cluster-stratified calibration split. Calibration tokens are re-issued with
/// `Calibration` provenance; the remainder keeps the pool's provenance.
pub fn split_calibration(
    pool: &Dataset,
    fraction: f64,
    cluster_ids: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<(Dataset, Dataset), SceneError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SceneError::Fraction(fraction));
    }
    let mut members: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for id in pool.ids() {
        let c = *cluster_ids.get(id).ok_or_else(|| SceneError::MissingCluster(id.to_string()))?;
        members.entry(c).or_default().push(id);
    }
    let sizes = members.iter().map(|(&c, v)| (c, v.len())).collect();
    let quotas = stratified_quotas(&sizes, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    for (c, ids) in members.iter_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        chosen.extend(ids.iter().take(quotas[c]));
    }
    let rest: BTreeSet<&str> = pool.ids().filter(|id| !chosen.contains(id)).collect();
    Ok((pool.subset(&chosen, Some(Provenance::Calibration)), pool.subset(&rest, None)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_graph() -> SceneGraph {
        let ego = Node { kind: NodeKind::Ego, sequence: vec![vec![0.0, 0.0, 0.0, 0.0, 5.0]; 2] };
        let agent = Node { kind: NodeKind::DynamicAgent, sequence: vec![vec![3.0, 1.0, 0.2, 0.0, 4.0]; 2] };
        let lane = Node { kind: NodeKind::MapDivider, sequence: vec![vec![0.0, 2.0, 0.0, 0.0]; 2] };
        let edges = vec![
            DirectedEdge {
                kind: EdgeKind::AllToEgo,
                src: 1,
                dst: 0,
                sequence: SceneGraph::relative_features(&agent, &ego),
            },
            DirectedEdge {
                kind: EdgeKind::MapToDynamic,
                src: 2,
                dst: 1,
                sequence: SceneGraph::relative_features(&lane, &agent),
            },
        ];
        SceneGraph { nodes: vec![ego, agent, lane], edges, t_len: 2, t_hist: 1, t_fut: 1 }
    }

    fn labels() -> SemanticLabels {
        SemanticLabels { command: Command::Straight, overlap: false }
    }

    fn dataset(n: usize, prov: Provenance) -> Dataset {
        let mut d = Dataset::new();
        for i in 0..n {
            d.push(SceneToken::new(format!("t{i:03}"), prov), tiny_graph(), labels(), None);
        }
        d
    }

    #[test]
    fn valid_dataset_has_empty_report() {
        assert!(validate_dataset(&dataset(3, Provenance::Real)).is_valid());
    }

    #[test]
    fn narrow_dynamic_row_is_reported() {
        let mut d = dataset(2, Provenance::Real);
        d.graph_mut("t001").unwrap().nodes[1].sequence[0].pop();
        let r = validate_dataset(&d);
        assert_eq!(r.violations.len(), 1);
        assert!(matches!(&r.violations[0], Violation::RowWidth { token, node: 1, expected: 5, found: 4, .. } if token == "t001"));
    }

    #[test]
    fn calibration_overlap_is_reported_once() {
        let mut d = dataset(2, Provenance::Synthetic);
        d.push(SceneToken::new("t000", Provenance::Calibration), tiny_graph(), labels(), None);
        let r = validate_dataset(&d);
        assert_eq!(r.violations.len(), 1);
        assert!(matches!(r.violations[0], Violation::CrossPoolOverlap { .. }));
    }

    #[test]
    fn other_violations_detected() {
        let mut d = dataset(1, Provenance::Real);
        d.push_token_only(SceneToken::new("lonely", Provenance::Real));
        {
            let g = d.graph_mut("t000").unwrap();
            g.nodes[0].kind = NodeKind::DynamicAgent;
            g.nodes[1].sequence[1][3] = f64::NAN;
            g.edges[0].dst = 9;
        }
        let r = validate_dataset(&d);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::EgoCount { count: 0, .. })));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::NonFinite { .. })));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::EdgeEndpoint { edge: 0, .. })));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::MissingGraph { token } if token == "lonely")));
    }

    #[test]
    fn unwrapped_heading_reported() {
        let mut d = dataset(1, Provenance::Real);
        d.graph_mut("t000").unwrap().nodes[2].sequence[0][2] = -std::f64::consts::PI;
        let r = validate_dataset(&d);
        assert!(matches!(r.violations[..], [Violation::UnwrappedHeading { .. }]));
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25)).eq(&0.25));
    }

    #[test]
    fn stratified_counts() {
        let pool = dataset(100, Provenance::Synthetic);
        let clusters: BTreeMap<String, usize> = pool.ids().enumerate().map(|(i, id)| (id.to_string(), i % 2)).collect();
        let (cal, rest) = split_calibration(&pool, 0.2, &clusters, 7).unwrap();
        assert_eq!(cal.len(), 20);
        assert_eq!(rest.len(), 80);
        let per: Vec<usize> = (0..2).map(|c| cal.ids().filter(|id| clusters[*id] == c).count()).collect();
        assert_eq!(per, vec![10, 10]);
        assert!(cal.tokens().iter().all(|t| t.provenance() == Provenance::Calibration));
        let (cal2, _) = split_calibration(&pool, 0.2, &clusters, 7).unwrap();
        assert_eq!(cal, cal2);
    }

    #[test]
    fn singleton_cluster_rounds_to_remainder() {
        let sizes = BTreeMap::from([(0, 1)]);
        assert_eq!(stratified_quotas(&sizes, 0.2)[&0], 0);
        let pool = dataset(1, Provenance::Synthetic);
        let clusters = BTreeMap::from([("t000".to_string(), 0)]);
        let (cal, rest) = split_calibration(&pool, 0.2, &clusters, 1).unwrap();
        assert!(cal.is_empty());
        assert_eq!(rest.len(), 1);
    }

    #[test]
    fn bad_fraction_and_missing_cluster() {
        let pool = dataset(3, Provenance::Synthetic);
        let clusters = BTreeMap::new();
        assert!(matches!(split_calibration(&pool, 1.0, &clusters, 0), Err(SceneError::Fraction(_))));
        assert!(matches!(split_calibration(&pool, 0.5, &clusters, 0), Err(SceneError::MissingCluster(_))));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let mut d = dataset(2, Provenance::Real);
        d.graph_mut("t000").unwrap().nodes[1].sequence[0][0] = 0.1 + 0.2;
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn jsonl_parse_error_names_line() {
        let mut buf = Vec::new();
        dataset(1, Provenance::Real).write_jsonl(&mut buf).unwrap();
        buf.extend_from_slice(b"{\"id\": \"broken\"\n");
        match Dataset::read_jsonl(buf.as_slice()) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rigid_transform_preserves_edges() {
        let g = tiny_graph();
        let moved = g.rigid_transform(0.4, 1.5, -2.0);
        for (a, b) in g.edges.iter().zip(&moved.edges) {
            for (ra, rb) in a.sequence.iter().zip(&b.sequence) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_partition(n in 1usize..120, k in 1usize..6, frac in 0.01f64..0.99, seed in 0u64..1000) {
                let pool = dataset(n, Provenance::Synthetic);
                let clusters: BTreeMap<String, usize> = pool.ids().enumerate().map(|(i, id)| (id.to_string(), (i * 7) % k)).collect();
                let (cal, rest) = split_calibration(&pool, frac, &clusters, seed).unwrap();
                prop_assert_eq!(cal.len() + rest.len(), n);
                let a: BTreeSet<&str> = cal.ids().collect();
                let b: BTreeSet<&str> = rest.ids().collect();
                prop_assert!(a.is_disjoint(&b));
                prop_assert_eq!(a.len() + b.len(), n);
                for c in 0..k {
                    let size = clusters.values().filter(|&&v| v == c).count() as f64;
                    let got = cal.ids().filter(|id| clusters[*id] == c).count() as f64;
                    prop_assert!((got - frac * size).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
