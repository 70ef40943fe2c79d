//! Parameter containers. `ParamSet<M>` is generic over the block type so the
//! same layout holds values (`Mat<T>`), gradients (`Mat<T>`) and tape handles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Mat;
use crate::metrics::SubscoreVector;
use crate::scalar::Scalar;
use crate::scene::{NodeKind, DYNAMIC_WIDTH, EDGE_WIDTH, MAP_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRaeDims {
    /// Hidden width.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Transformer layers.
    pub layers: usize,
    /// Steps per node sequence.
    pub t_len: usize,
}

impl Default for GraphRaeDims {
    fn default() -> Self {
        Self { d: 128, heads: 4, layers: 2, t_len: 12 }
    }
}

impl GraphRaeDims {
    pub fn metric_dim(&self) -> usize {
        SubscoreVector::<f64>::LEN
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.heads == 0 || self.t_len == 0 {
            return Err(format!("degenerate dims {self:?}"));
        }
        if self.d % self.heads != 0 {
            return Err(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        Ok(())
    }
}

/// Two-layer perceptron `tanh(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<M> {
    pub w1: M,
    pub b1: M,
    pub w2: M,
    pub b2: M,
}

/// Gated attention layer. Keys and values are projected from the neighbor
/// state concatenated with the edge state, hence `wk`, `wv` are `2d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<M> {
    pub wq: M,
    pub wk: M,
    pub wv: M,
    pub wo: M,
    pub gate: M,
    pub ffn_w1: M,
    pub ffn_w2: M,
}

/// Shared hidden layer followed by per-family output heads producing a whole
/// flattened sequence (`t_len·width`) per node.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<M> {
    pub w1: M,
    pub b1: M,
    pub w_dyn: M,
    pub b_dyn: M,
    pub w_map: M,
    pub b_map: M,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<M> {
    pub dims: GraphRaeDims,
    pub node_proj_dyn: Mlp<M>,
    pub node_proj_map: Mlp<M>,
    pub edge_proj: Mlp<M>,
    /// One row per `NodeKind`.
    pub sem_emb: M,
    /// One row per step.
    pub pos_emb: M,
    pub layers: Vec<LayerParams<M>>,
    pub decoder: Decoder<M>,
    pub metric_head: Mlp<M>,
}

pub type GraphRaeParams<T> = ParamSet<Mat<T>>;
/// Gradient with the same layout as the parameters.
pub type GraphRaeGradient<T> = ParamSet<Mat<T>>;

impl<M> Mlp<M> {
    fn map<N>(&self, p: &str, f: &mut impl FnMut(&str, &M) -> N) -> Mlp<N> {
        Mlp {
            w1: f(&format!("{p}.w1"), &self.w1),
            b1: f(&format!("{p}.b1"), &self.b1),
            w2: f(&format!("{p}.w2"), &self.w2),
            b2: f(&format!("{p}.b2"), &self.b2),
        }
    }

    fn refs<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a M)>) {
        out.push((format!("{p}.w1"), &self.w1));
        out.push((format!("{p}.b1"), &self.b1));
        out.push((format!("{p}.w2"), &self.w2));
        out.push((format!("{p}.b2"), &self.b2));
    }

    fn refs_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut M)>) {
        out.push((format!("{p}.w1"), &mut self.w1));
        out.push((format!("{p}.b1"), &mut self.b1));
        out.push((format!("{p}.w2"), &mut self.w2));
        out.push((format!("{p}.b2"), &mut self.b2));
    }
}

impl<M> LayerParams<M> {
    pub fn map_ref<N>(&self, mut f: impl FnMut(&M) -> N) -> LayerParams<N> {
        self.map("", &mut |_, m| f(m))
    }

    fn map<N>(&self, p: &str, f: &mut impl FnMut(&str, &M) -> N) -> LayerParams<N> {
        LayerParams {
            wq: f(&format!("{p}.wq"), &self.wq),
            wk: f(&format!("{p}.wk"), &self.wk),
            wv: f(&format!("{p}.wv"), &self.wv),
            wo: f(&format!("{p}.wo"), &self.wo),
            gate: f(&format!("{p}.gate"), &self.gate),
            ffn_w1: f(&format!("{p}.ffn_w1"), &self.ffn_w1),
            ffn_w2: f(&format!("{p}.ffn_w2"), &self.ffn_w2),
        }
    }

    fn refs<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a M)>) {
        for (n, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("gate", &self.gate),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_w2", &self.ffn_w2),
        ] {
            out.push((format!("{p}.{n}"), m));
        }
    }

    fn refs_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut M)>) {
        for (n, m) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("gate", &mut self.gate),
            ("ffn_w1", &mut self.ffn_w1),
            ("ffn_w2", &mut self.ffn_w2),
        ] {
            out.push((format!("{p}.{n}"), m));
        }
    }
}

impl<M> Decoder<M> {
    fn map<N>(&self, p: &str, f: &mut impl FnMut(&str, &M) -> N) -> Decoder<N> {
        Decoder {
            w1: f(&format!("{p}.w1"), &self.w1),
            b1: f(&format!("{p}.b1"), &self.b1),
            w_dyn: f(&format!("{p}.w_dyn"), &self.w_dyn),
            b_dyn: f(&format!("{p}.b_dyn"), &self.b_dyn),
            w_map: f(&format!("{p}.w_map"), &self.w_map),
            b_map: f(&format!("{p}.b_map"), &self.b_map),
        }
    }

    fn refs<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a M)>) {
        for (n, m) in [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w_dyn", &self.w_dyn),
            ("b_dyn", &self.b_dyn),
            ("w_map", &self.w_map),
            ("b_map", &self.b_map),
        ] {
            out.push((format!("{p}.{n}"), m));
        }
    }

    fn refs_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut M)>) {
        for (n, m) in [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w_dyn", &mut self.w_dyn),
            ("b_dyn", &mut self.b_dyn),
            ("w_map", &mut self.w_map),
            ("b_map", &mut self.b_map),
        ] {
            out.push((format!("{p}.{n}"), m));
        }
    }
}

impl<M> ParamSet<M> {
    /// Applies `f` to every block, keeping the layout. Blocks are visited in
    /// the order of [`ParamSet::blocks`].
    pub fn map<N>(&self, mut f: impl FnMut(&str, &M) -> N) -> ParamSet<N> {
        let f = &mut f;
        ParamSet {
            dims: self.dims,
            node_proj_dyn: self.node_proj_dyn.map("node_proj_dyn", f),
            node_proj_map: self.node_proj_map.map("node_proj_map", f),
            edge_proj: self.edge_proj.map("edge_proj", f),
            sem_emb: f("sem_emb", &self.sem_emb),
            pos_emb: f("pos_emb", &self.pos_emb),
            layers: self.layers.iter().enumerate().map(|(i, l)| l.map(&format!("layers.{i}"), f)).collect(),
            decoder: self.decoder.map("decoder", f),
            metric_head: self.metric_head.map("metric_head", f),
        }
    }

    /// Named blocks in serialization order.
    pub fn blocks(&self) -> Vec<(String, &M)> {
        let mut out = Vec::new();
        self.node_proj_dyn.refs("node_proj_dyn", &mut out);
        self.node_proj_map.refs("node_proj_map", &mut out);
        self.edge_proj.refs("edge_proj", &mut out);
        out.push(("sem_emb".into(), &self.sem_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            l.refs(&format!("layers.{i}"), &mut out);
        }
        self.decoder.refs("decoder", &mut out);
        self.metric_head.refs("metric_head", &mut out);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut M)> {
        let mut out = Vec::new();
        self.node_proj_dyn.refs_mut("node_proj_dyn", &mut out);
        self.node_proj_map.refs_mut("node_proj_map", &mut out);
        self.edge_proj.refs_mut("edge_proj", &mut out);
        out.push(("sem_emb".into(), &mut self.sem_emb));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.refs_mut(&format!("layers.{i}"), &mut out);
        }
        self.decoder.refs_mut("decoder", &mut out);
        self.metric_head.refs_mut("metric_head", &mut out);
        out
    }
}

/// Expected `(rows, cols)` of every block, in [`ParamSet::blocks`] order.
pub fn block_shapes(dims: &GraphRaeDims) -> ParamSet<(usize, usize)> {
    let d = dims.d;
    let mlp = |inp: usize, out: usize| Mlp { w1: (inp, d), b1: (1, d), w2: (d, out), b2: (1, out) };
    ParamSet {
        dims: *dims,
        node_proj_dyn: mlp(DYNAMIC_WIDTH, d),
        node_proj_map: mlp(MAP_WIDTH, d),
        edge_proj: mlp(EDGE_WIDTH, d),
        sem_emb: (NodeKind::ALL.len(), d),
        pos_emb: (dims.t_len, d),
        layers: (0..dims.layers)
            .map(|_| LayerParams {
                wq: (d, d),
                wk: (2 * d, d),
                wv: (2 * d, d),
                wo: (d, d),
                gate: (1, d),
                ffn_w1: (d, d),
                ffn_w2: (d, d),
            })
            .collect(),
        decoder: Decoder {
            w1: (d, d),
            b1: (1, d),
            w_dyn: (d, dims.t_len * DYNAMIC_WIDTH),
            b_dyn: (1, dims.t_len * DYNAMIC_WIDTH),
            w_map: (d, dims.t_len * MAP_WIDTH),
            b_map: (1, dims.t_len * MAP_WIDTH),
        },
        metric_head: mlp(d, dims.metric_dim()),
    }
}

impl<T: Scalar> GraphRaeParams<T> {
    /// Glorot-uniform weights, zero biases and gates, small uniform
    /// embeddings. Deterministic in `seed`.
    pub fn init(dims: GraphRaeDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        block_shapes(&dims).map(|name, &(r, c)| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let bound = if leaf.starts_with('b') || leaf == "gate" {
                0.0
            } else if leaf.ends_with("emb") {
                0.1
            } else {
                (6.0 / (r + c) as f64).sqrt()
            };
            Mat::from_fn(r, c, |_, _| if bound == 0.0 { T::zero() } else { T::lit(rng.random_range(-bound..bound)) })
        })
    }

    pub fn zeros(dims: GraphRaeDims) -> Self {
        block_shapes(&dims).map(|_, &(r, c)| Mat::zeros(r, c))
    }

    /// Rebuilds parameters from blocks listed in [`ParamSet::blocks`] order.
    pub fn from_blocks(dims: GraphRaeDims, blocks: Vec<Mat<T>>) -> Result<Self, String> {
        let shapes = block_shapes(&dims);
        let expected = shapes.blocks();
        if expected.len() != blocks.len() {
            return Err(format!("expected {} blocks, got {}", expected.len(), blocks.len()));
        }
        for ((name, &shape), b) in expected.iter().zip(&blocks) {
            if b.shape() != shape {
                return Err(format!("block {name} has shape {:?}, expected {shape:?}", b.shape()));
            }
        }
        let mut it = blocks.into_iter();
        Ok(shapes.map(|_, _| it.next().expect("count checked")))
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Name of the first block with a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.blocks().into_iter().find(|(_, m)| !m.is_finite()).map(|(n, _)| n)
    }

    /// Checks dims and that every block has its expected shape.
    pub fn check_shapes(&self) -> Result<(), String> {
        self.dims.validate()?;
        let shapes = block_shapes(&self.dims);
        let expected = shapes.blocks();
        let actual = self.blocks();
        if expected.len() != actual.len() {
            return Err(format!("expected {} blocks, got {}", expected.len(), actual.len()));
        }
        for ((name, &shape), (_, m)) in expected.iter().zip(&actual) {
            if m.shape() != shape {
                return Err(format!("block {name} has shape {:?}, expected {shape:?}", m.shape()));
            }
        }
        Ok(())
    }

    /// `self += s·other`, blockwise.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        let others = other.blocks();
        for ((_, m), (_, o)) in self.blocks_mut().into_iter().zip(others) {
            m.add_scaled(o, s);
        }
    }

    pub fn convert<U: Scalar>(&self) -> GraphRaeParams<U> {
        self.map(|_, m| m.convert())
    }
}
