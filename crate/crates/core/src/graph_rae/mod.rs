//! Graph Regularized AutoEncoder: a gated graph transformer over scene
//! graphs whose ego state, ℓ2-normalized, is the scene embedding.
//!
//! Node and edge rows are scaled to model units before encoding (see
//! [`normalize_row`]); the reconstruction loss is measured in those units and
//! [`reconstruct`] maps predictions back to raw units.

mod io;
mod losses;
mod model;
mod params;
pub mod tape;
mod train;

use thiserror::Error;

use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::scene::{SceneGraph, DYNAMIC_WIDTH, MAP_WIDTH};

pub use io::{read_embeddings_csv, read_params, write_embeddings_csv, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use losses::{huber, loss_metric, loss_recon, loss_simclr, loss_supcon, MetricLoss};
pub use model::{denormalize_row, normalize_row, CURVATURE_GAIN, POSITION_SCALE, SPEED_SCALE};
pub use params::{block_shapes, Decoder, GraphRaeDims, GraphRaeGradient, GraphRaeParams, LayerParams, Mlp, ParamSet};
pub use train::{loss_gradient, total_loss, train, Augmenter, GraphRaeConfig, LossBreakdown, TrainedModel, TrainingScene};

use model::{bind, Batch};
use tape::Tape;

#[derive(Debug, Error)]
pub enum GraphRaeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("ego state of scene {scene} has degenerate norm {norm}")]
    DegenerateEmbedding { scene: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: String },
    #[error("training diverged at step {step} (loss {loss}); try a smaller step size")]
    Divergence { step: usize, loss: f64 },
    #[error("no trainable scenes in dataset")]
    EmptyDataset,
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Unit-norm scene embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEmbedding<T = f64> {
    pub v: Vec<T>,
}

impl<T: Scalar> SceneEmbedding<T> {
    pub fn cosine(&self, other: &Self) -> T {
        crate::scalar::dot(&self.v, &other.v)
    }
}

fn checked<T: Scalar>(p: &GraphRaeParams<T>) -> Result<(), GraphRaeError> {
    p.check_shapes().map_err(GraphRaeError::Dimension)
}

/// Initial node states (`n×d`) and edge states (`m×d`) of one scene.
pub fn encode_features<T: Scalar>(g: &SceneGraph, p: &GraphRaeParams<T>) -> Result<(Mat<T>, Mat<T>), GraphRaeError> {
    checked(p)?;
    let b = Batch::build(&[g], &p.dims)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, p);
    let (h, e) = model::encode(&mut tape, &b, &bound, p.dims.d);
    let e = e.map_or_else(|| Mat::zeros(0, p.dims.d), |e| tape.value(e).clone());
    Ok((tape.value(h).clone(), e))
}

/// One gated attention layer applied to the states of `g`.
pub fn transformer_layer<T: Scalar>(
    node_states: &Mat<T>,
    edge_states: &Mat<T>,
    g: &SceneGraph,
    layer: &LayerParams<Mat<T>>,
    heads: usize,
) -> Result<Mat<T>, GraphRaeError> {
    let d = node_states.cols();
    if heads == 0 || d % heads != 0 {
        return Err(GraphRaeError::Dimension(format!("d = {d} is not divisible by heads = {heads}")));
    }
    if node_states.rows() != g.nodes.len() || edge_states.rows() != g.edges.len() {
        return Err(GraphRaeError::Dimension("state rows do not match the graph".into()));
    }
    if edge_states.cols() != d && !g.edges.is_empty() {
        return Err(GraphRaeError::Dimension("edge state width differs from node state width".into()));
    }
    let shapes = [
        (&layer.wq, (d, d)),
        (&layer.wk, (2 * d, d)),
        (&layer.wv, (2 * d, d)),
        (&layer.wo, (d, d)),
        (&layer.gate, (1, d)),
        (&layer.ffn_w1, (d, d)),
        (&layer.ffn_w2, (d, d)),
    ];
    if let Some((m, s)) = shapes.iter().find(|(m, s)| m.shape() != *s) {
        return Err(GraphRaeError::Dimension(format!("layer block has shape {:?}, expected {s:?}", m.shape())));
    }
    let mut tape = Tape::new();
    let h = tape.leaf(node_states.clone());
    let e = (!g.edges.is_empty()).then(|| tape.leaf(edge_states.clone()));
    let lp = layer.map_ref(|m| tape.leaf(m.clone()));
    let src: Vec<usize> = g.edges.iter().map(|e| e.src).collect();
    let dst: Vec<usize> = g.edges.iter().map(|e| e.dst).collect();
    let out = model::layer(&mut tape, h, e, &src, &dst, &lp, heads);
    Ok(tape.value(out).clone())
}

/// Embeddings for a list of scenes, evaluated `batch_size` scenes at a time.
pub fn embed_scenes<T: Scalar>(
    graphs: &[&SceneGraph],
    p: &GraphRaeParams<T>,
    batch_size: usize,
) -> Result<Vec<SceneEmbedding<T>>, GraphRaeError> {
    checked(p)?;
    let mut out = Vec::with_capacity(graphs.len());
    for (c, chunk) in graphs.chunks(batch_size.max(1)).enumerate() {
        let b = Batch::build(chunk, &p.dims)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, p);
        let f = model::forward(&mut tape, &b, &bound, &p.dims).map_err(|e| match e {
            GraphRaeError::DegenerateEmbedding { scene, norm } => {
                GraphRaeError::DegenerateEmbedding { scene: c * batch_size.max(1) + scene, norm }
            }
            other => other,
        })?;
        let z = tape.value(f.z);
        out.extend((0..z.rows()).map(|i| SceneEmbedding { v: z.row(i).to_vec() }));
    }
    Ok(out)
}

pub fn scene_embedding<T: Scalar>(g: &SceneGraph, p: &GraphRaeParams<T>) -> Result<SceneEmbedding<T>, GraphRaeError> {
    Ok(embed_scenes(&[g], p, 1)?.remove(0))
}

/// Decoded per-node sequences in raw units, shaped like `g`'s node sequences.
pub fn reconstruct<T: Scalar>(g: &SceneGraph, p: &GraphRaeParams<T>) -> Result<Vec<Vec<Vec<T>>>, GraphRaeError> {
    checked(p)?;
    let b = Batch::build(&[g], &p.dims)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, p);
    let f = model::forward(&mut tape, &b, &bound, &p.dims)?;
    let (dyn_pred, map_pred) = model::decode(&mut tape, &bound, f.h, &b.dyn_nodes, &b.map_nodes);
    let mut out = vec![Vec::new(); g.nodes.len()];
    for (nodes, pred, width) in [(&b.dyn_nodes, dyn_pred, DYNAMIC_WIDTH), (&b.map_nodes, map_pred, MAP_WIDTH)] {
        let Some(pred) = pred else { continue };
        let pm = tape.value(pred);
        for (r, &node) in nodes.iter().enumerate() {
            out[node] = pm
                .row(r)
                .chunks(width)
                .map(|step| {
                    let raw: Vec<f64> = step.iter().map(|v| v.as_f64()).collect();
                    denormalize_row(&raw).into_iter().map(T::lit).collect()
                })
                .collect();
        }
    }
    Ok(out)
}
