//! Forward pass on a tape. A batch of scenes is encoded as one disjoint-union
//! graph, so every op runs once per batch rather than once per scene.

use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::scene::{SceneGraph, DYNAMIC_WIDTH, EDGE_WIDTH, MAP_WIDTH};

use super::params::{GraphRaeDims, LayerParams, Mlp, ParamSet};
use super::tape::{Tape, Var};
use super::GraphRaeError;

/// Positions and edge offsets are divided by this (metres).
pub const POSITION_SCALE: f64 = 20.0;
/// Speeds are divided by this (m/s).
pub const SPEED_SCALE: f64 = 10.0;
/// Curvatures are multiplied by this (1/m).
pub const CURVATURE_GAIN: f64 = 10.0;

/// Maps a raw `[x, y, θ, κ, (ν)]` or `[Δx, Δy, Δθ, Δκ]` row to model units.
pub fn normalize_row(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    out[0] /= POSITION_SCALE;
    out[1] /= POSITION_SCALE;
    out[2] /= std::f64::consts::PI;
    out[3] *= CURVATURE_GAIN;
    if out.len() > 4 {
        out[4] /= SPEED_SCALE;
    }
    out
}

/// Inverse of [`normalize_row`].
pub fn denormalize_row(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    out[0] *= POSITION_SCALE;
    out[1] *= POSITION_SCALE;
    out[2] *= std::f64::consts::PI;
    out[3] /= CURVATURE_GAIN;
    if out.len() > 4 {
        out[4] *= SPEED_SCALE;
    }
    out
}

/// Per-step rows of one node family, flattened across the batch.
pub(crate) struct Rows<T> {
    pub x: Mat<T>,
    /// Owning node (or edge) index for each row.
    pub seg: Vec<usize>,
    /// Step index for each row.
    pub step: Vec<usize>,
}

impl<T: Scalar> Rows<T> {
    fn new(width: usize) -> Self {
        Self { x: Mat::zeros(0, width), seg: Vec::new(), step: Vec::new() }
    }

    fn is_empty(&self) -> bool {
        self.seg.is_empty()
    }
}

pub(crate) struct Batch<T> {
    pub n_nodes: usize,
    pub dyn_rows: Rows<T>,
    pub map_rows: Rows<T>,
    pub edge_rows: Rows<T>,
    pub n_edges: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub node_kind: Vec<usize>,
    /// Global ego node per scene.
    pub ego: Vec<usize>,
    pub dyn_nodes: Vec<usize>,
    pub map_nodes: Vec<usize>,
    /// Normalized flattened sequences, one row per entry of `dyn_nodes`.
    pub dyn_target: Mat<T>,
    pub map_target: Mat<T>,
    /// Owning scene per node.
    pub node_scene: Vec<usize>,
    /// First global node index per scene.
    pub scene_offset: Vec<usize>,
}

fn check_rows(rows: &[Vec<f64>], t_len: usize, width: usize, what: &str) -> Result<(), GraphRaeError> {
    if rows.len() != t_len {
        return Err(GraphRaeError::Dimension(format!("{what} has {} steps, params expect {t_len}", rows.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(GraphRaeError::Dimension(format!("{what} has a {}-wide row, expected {width}", r.len())));
    }
    Ok(())
}

impl<T: Scalar> Batch<T> {
    pub fn build(graphs: &[&SceneGraph], dims: &GraphRaeDims) -> Result<Self, GraphRaeError> {
        let t_len = dims.t_len;
        let mut dyn_data = Vec::new();
        let mut map_data = Vec::new();
        let mut edge_data = Vec::new();
        let mut dyn_rows = Rows::<T>::new(DYNAMIC_WIDTH);
        let mut map_rows = Rows::<T>::new(MAP_WIDTH);
        let mut edge_rows = Rows::<T>::new(EDGE_WIDTH);
        let (mut dyn_target, mut map_target) = (Vec::new(), Vec::new());
        let mut b = Batch {
            n_nodes: 0,
            dyn_rows: Rows::new(DYNAMIC_WIDTH),
            map_rows: Rows::new(MAP_WIDTH),
            edge_rows: Rows::new(EDGE_WIDTH),
            n_edges: 0,
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            node_kind: Vec::new(),
            ego: Vec::new(),
            dyn_nodes: Vec::new(),
            map_nodes: Vec::new(),
            dyn_target: Mat::zeros(0, 0),
            map_target: Mat::zeros(0, 0),
            node_scene: Vec::new(),
            scene_offset: Vec::new(),
        };
        for (s, g) in graphs.iter().enumerate() {
            let off = b.n_nodes;
            b.scene_offset.push(off);
            let ego = g.ego_index().ok_or_else(|| GraphRaeError::Dimension(format!("scene {s} has no ego node")))?;
            b.ego.push(off + ego);
            for (i, n) in g.nodes.iter().enumerate() {
                let gi = off + i;
                let width = n.kind.row_width();
                check_rows(&n.sequence, t_len, width, &format!("scene {s} node {i}"))?;
                let (rows, data, target, list) = if n.kind.is_dynamic() {
                    (&mut dyn_rows, &mut dyn_data, &mut dyn_target, &mut b.dyn_nodes)
                } else {
                    (&mut map_rows, &mut map_data, &mut map_target, &mut b.map_nodes)
                };
                list.push(gi);
                for (t, r) in n.sequence.iter().enumerate() {
                    let nr = normalize_row(r);
                    data.extend(nr.iter().map(|&v| T::lit(v)));
                    target.extend(nr.iter().map(|&v| T::lit(v)));
                    rows.seg.push(gi);
                    rows.step.push(t);
                }
                b.node_kind.push(n.kind.index());
                b.node_scene.push(s);
            }
            for (k, e) in g.edges.iter().enumerate() {
                if e.src >= g.nodes.len() || e.dst >= g.nodes.len() {
                    return Err(GraphRaeError::Dimension(format!("scene {s} edge {k} points outside the graph")));
                }
                check_rows(&e.sequence, t_len, EDGE_WIDTH, &format!("scene {s} edge {k}"))?;
                let ge = b.n_edges + k;
                for (t, r) in e.sequence.iter().enumerate() {
                    edge_data.extend(normalize_row(r).iter().map(|&v| T::lit(v)));
                    edge_rows.seg.push(ge);
                    edge_rows.step.push(t);
                }
                b.edge_src.push(off + e.src);
                b.edge_dst.push(off + e.dst);
            }
            b.n_edges += g.edges.len();
            b.n_nodes += g.nodes.len();
        }
        let mat = |n: usize, w: usize, data: Vec<T>| Mat::from_vec(n, w, data).expect("row-major fill");
        dyn_rows.x = mat(dyn_rows.seg.len(), DYNAMIC_WIDTH, dyn_data);
        map_rows.x = mat(map_rows.seg.len(), MAP_WIDTH, map_data);
        edge_rows.x = mat(edge_rows.seg.len(), EDGE_WIDTH, edge_data);
        b.dyn_target = mat(b.dyn_nodes.len(), t_len * DYNAMIC_WIDTH, dyn_target);
        b.map_target = mat(b.map_nodes.len(), t_len * MAP_WIDTH, map_target);
        b.dyn_rows = dyn_rows;
        b.map_rows = map_rows;
        b.edge_rows = edge_rows;
        Ok(b)
    }
}

pub(crate) type Bound = ParamSet<Var>;

pub(crate) fn bind<T: Scalar>(tape: &mut Tape<T>, p: &ParamSet<Mat<T>>) -> Bound {
    p.map(|_, m| tape.leaf(m.clone()))
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, m: &Mlp<Var>) -> Var {
    let h = tape.matmul(x, m.w1);
    let h = tape.add_row(h, m.b1);
    let h = tape.tanh(h);
    let o = tape.matmul(h, m.w2);
    tape.add_row(o, m.b2)
}

/// Per-step MLP plus positional embedding, averaged into `n_segments` rows.
fn encode_rows<T: Scalar>(tape: &mut Tape<T>, rows: &Rows<T>, proj: &Mlp<Var>, pos: Var, n_segments: usize) -> Var {
    let x = tape.leaf(rows.x.clone());
    let h = mlp(tape, x, proj);
    let pe = tape.gather(pos, rows.step.clone());
    let h = tape.add(h, pe);
    tape.segment_mean(h, rows.seg.clone(), n_segments)
}

/// Returns `(node_states, edge_states)`; `edge_states` is `None` for a batch
/// without edges.
pub(crate) fn encode<T: Scalar>(tape: &mut Tape<T>, b: &Batch<T>, p: &Bound, d: usize) -> (Var, Option<Var>) {
    let sem = tape.gather(p.sem_emb, b.node_kind.clone());
    let mut h = sem;
    if !b.dyn_rows.is_empty() {
        let e = encode_rows(tape, &b.dyn_rows, &p.node_proj_dyn, p.pos_emb, b.n_nodes);
        h = tape.add(h, e);
    }
    if !b.map_rows.is_empty() {
        let e = encode_rows(tape, &b.map_rows, &p.node_proj_map, p.pos_emb, b.n_nodes);
        h = tape.add(h, e);
    }
    let e = (!b.edge_rows.is_empty()).then(|| encode_rows(tape, &b.edge_rows, &p.edge_proj, p.pos_emb, b.n_edges));
    debug_assert_eq!(tape.value(h).cols(), d);
    (h, e)
}

/// `h + σ(g) ⊙ F(MHA(h, neighbours))` with `F(m) = m + tanh(m·W1)·W2`.
pub(crate) fn layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    e: Option<Var>,
    src: &[usize],
    dst: &[usize],
    lp: &LayerParams<Var>,
    heads: usize,
) -> Var {
    let Some(e) = e else { return h };
    let q = tape.matmul(h, lp.wq);
    let hs = tape.gather(h, src.to_vec());
    let kv = tape.concat_cols(hs, e);
    let k = tape.matmul(kv, lp.wk);
    let v = tape.matmul(kv, lp.wv);
    let a = tape.attention(q, k, v, dst.to_vec(), heads);
    let m = tape.matmul(a, lp.wo);
    let f = tape.matmul(m, lp.ffn_w1);
    let f = tape.tanh(f);
    let f = tape.matmul(f, lp.ffn_w2);
    let f = tape.add(m, f);
    let gate = tape.sigmoid(lp.gate);
    let upd = tape.mul_row(f, gate);
    tape.add(h, upd)
}

pub(crate) struct Forward {
    pub h: Var,
    /// Unit-norm ego rows, one per scene.
    pub z: Var,
}

pub(crate) fn forward<T: Scalar>(tape: &mut Tape<T>, b: &Batch<T>, p: &Bound, dims: &GraphRaeDims) -> Result<Forward, GraphRaeError> {
    let (mut h, e) = encode(tape, b, p, dims.d);
    for lp in &p.layers {
        h = layer(tape, h, e, &b.edge_src, &b.edge_dst, lp, dims.heads);
    }
    let ego = tape.gather(h, b.ego.clone());
    let ev = tape.value(ego);
    for s in 0..ev.rows() {
        let n = crate::scalar::norm2(ev.row(s));
        if !(n > T::lit(1e-12)) || !n.is_finite() {
            return Err(GraphRaeError::DegenerateEmbedding { scene: s, norm: n.as_f64() });
        }
    }
    let z = tape.row_normalize(ego);
    Ok(Forward { h, z })
}

/// Decoder outputs `(dyn_pred, map_pred)` in normalized units.
pub(crate) fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    h: Var,
    dyn_nodes: &[usize],
    map_nodes: &[usize],
) -> (Option<Var>, Option<Var>) {
    let dh = tape.matmul(h, p.decoder.w1);
    let dh = tape.add_row(dh, p.decoder.b1);
    let dh = tape.tanh(dh);
    let mut head = |nodes: &[usize], w: Var, bias: Var| {
        if nodes.is_empty() {
            return None;
        }
        let x = tape.gather(dh, nodes.to_vec());
        let y = tape.matmul(x, w);
        Some(tape.add_row(y, bias))
    };
    let dyn_pred = head(dyn_nodes, p.decoder.w_dyn, p.decoder.b_dyn);
    let map_pred = head(map_nodes, p.decoder.w_map, p.decoder.b_map);
    (dyn_pred, map_pred)
}

/// Metric-head predictions for pairs `(i, j)` of rows of `z`.
pub(crate) fn metric_pairs<T: Scalar>(tape: &mut Tape<T>, z: Var, pairs: &[(usize, usize)], head: &Mlp<Var>) -> Var {
    let zi = tape.gather(z, pairs.iter().map(|p| p.0).collect());
    let zj = tape.gather(z, pairs.iter().map(|p| p.1).collect());
    let diff = tape.sub(zi, zj);
    let diff = tape.abs(diff);
    mlp(tape, diff, head)
}
