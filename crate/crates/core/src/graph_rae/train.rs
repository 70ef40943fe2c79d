//! Objective assembly, gradients and the gradient-descent trainer.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::scene::{Dataset, SceneGraph};

use super::losses::{huber_grad, pair_mse_grad, simclr_grad, supcon_grad, valid_pairs};
use super::model::{bind, decode, forward, metric_pairs, Batch};
use super::params::{GraphRaeDims, GraphRaeGradient, GraphRaeParams};
use super::tape::{Tape, Var};
use super::GraphRaeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphRaeConfig {
    pub dims: GraphRaeDims,
    /// Weight of the three regularizers.
    pub lambda: f64,
    /// Temperature of both contrastive terms.
    pub tau: f64,
    pub huber_delta: f64,
    pub step_size: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Half-width of the uniform per-axis translation, metres.
    pub max_translation: f64,
    /// Half-width of the uniform rotation, radians.
    pub max_rotation: f64,
}

impl Default for GraphRaeConfig {
    fn default() -> Self {
        Self {
            dims: GraphRaeDims::default(),
            lambda: 5.0,
            tau: 0.1,
            huber_delta: 1.0,
            step_size: 1e-2,
            steps: 200,
            batch_size: 16,
            seed: 0,
            max_translation: 2.0,
            max_rotation: std::f64::consts::FRAC_PI_6,
        }
    }
}

/// Random rigid motion of all polylines of a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmenter {
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl Augmenter {
    pub fn from_config(cfg: &GraphRaeConfig) -> Self {
        Self { max_translation: cfg.max_translation, max_rotation: cfg.max_rotation }
    }

    pub fn view<R: Rng>(&self, g: &SceneGraph, rng: &mut R) -> SceneGraph {
        let sample = |rng: &mut R, w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let rot = sample(rng, self.max_rotation);
        let tx = sample(rng, self.max_translation);
        let ty = sample(rng, self.max_translation);
        g.rigid_transform(rot, tx, ty)
    }
}

/// One scene of a training batch.
#[derive(Clone, Debug)]
pub struct TrainingScene<'a> {
    pub graph: &'a SceneGraph,
    /// Joint semantic label.
    pub label: usize,
    pub metrics: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T = f64> {
    /// Mean over the batch of the per-scene reconstruction loss.
    pub recon: T,
    pub simclr: T,
    pub supcon: T,
    pub metric: T,
    pub total: T,
    pub lambda: T,
    /// Unordered pairs that fed the metric term; zero means `metric` is 0 by
    /// convention.
    pub metric_pairs: usize,
}

struct Objective<T> {
    tape: Tape<T>,
    bound: super::model::Bound,
    root: Var,
    breakdown: LossBreakdown<T>,
}

fn scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> T {
    tape.value(v)[(0, 0)]
}

/// Builds the objective for a batch. Scene `k` gets two augmented views drawn
/// from a generator seeded with `aug_seed`; reconstruction, supervised
/// contrast and metric regression use the first view.
fn objective<T: Scalar>(
    batch: &[TrainingScene],
    p: &GraphRaeParams<T>,
    cfg: &GraphRaeConfig,
    aug_seed: u64,
) -> Result<Objective<T>, GraphRaeError> {
    if batch.is_empty() {
        return Err(GraphRaeError::EmptyDataset);
    }
    if !(cfg.lambda >= 0.0) {
        return Err(GraphRaeError::Dimension(format!("lambda must be nonnegative, got {}", cfg.lambda)));
    }
    p.check_shapes().map_err(GraphRaeError::Dimension)?;
    let n = batch.len();
    let aug = Augmenter::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
    let mut views: Vec<SceneGraph> = Vec::with_capacity(2 * n);
    let mut second = Vec::with_capacity(n);
    for s in batch {
        views.push(aug.view(s.graph, &mut rng));
        second.push(aug.view(s.graph, &mut rng));
    }
    views.extend(second);
    let refs: Vec<&SceneGraph> = views.iter().collect();
    let b = Batch::<T>::build(&refs, &p.dims)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, p);
    let f = forward(&mut tape, &b, &bound, &p.dims)?;

    // Reconstruction on the first view.
    let first_view = |nodes: &[usize]| -> Vec<usize> {
        (0..nodes.len()).filter(|&r| b.node_scene[nodes[r]] < n).collect()
    };
    let dyn_rows = first_view(&b.dyn_nodes);
    let map_rows = first_view(&b.map_nodes);
    let dyn_nodes: Vec<usize> = dyn_rows.iter().map(|&r| b.dyn_nodes[r]).collect();
    let map_nodes: Vec<usize> = map_rows.iter().map(|&r| b.map_nodes[r]).collect();
    let (dyn_pred, map_pred) = decode(&mut tape, &bound, f.h, &dyn_nodes, &map_nodes);
    let delta = T::lit(cfg.huber_delta);
    let weight = T::one() / T::from_count(n);
    let mut recon_value = T::zero();
    let mut recon_inputs = Vec::new();
    let mut recon_grads = Vec::new();
    for (pred, rows, target) in [(dyn_pred, &dyn_rows, &b.dyn_target), (map_pred, &map_rows, &b.map_target)] {
        let Some(pred) = pred else { continue };
        let t = Mat::from_fn(rows.len(), target.cols(), |i, j| target[(rows[i], j)]);
        let (v, g) = huber_grad(tape.value(pred), &t, delta, weight);
        recon_value += v;
        recon_inputs.push(pred);
        recon_grads.push(g);
    }
    let recon = tape.fused(recon_value, recon_inputs, recon_grads);

    let tau = T::lit(cfg.tau);
    let za = tape.gather(f.z, (0..n).collect());
    let zb = tape.gather(f.z, (n..2 * n).collect());
    let (v, ga, gb) = simclr_grad(tape.value(za), tape.value(zb), tau)?;
    let simclr = tape.fused(v, vec![za, zb], vec![ga, gb]);
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let (v, g) = supcon_grad(tape.value(za), &labels, tau)?;
    let supcon = tape.fused(v, vec![za], vec![g]);

    let metrics: Vec<Option<Vec<T>>> =
        batch.iter().map(|s| s.metrics.as_ref().map(|m| m.iter().map(|&x| T::lit(x)).collect())).collect();
    let (pairs, targets) = valid_pairs(&metrics);
    let metric = if pairs.is_empty() {
        tape.fused(T::zero(), vec![], vec![])
    } else {
        let pred = metric_pairs(&mut tape, za, &pairs, &bound.metric_head);
        let target = Mat::from_rows(&targets).map_err(|e| GraphRaeError::Dimension(e.to_string()))?;
        if tape.value(pred).shape() != target.shape() {
            return Err(GraphRaeError::Dimension("metric vectors do not match the metric head".into()));
        }
        let (v, g) = pair_mse_grad(tape.value(pred), &target);
        tape.fused(v, vec![pred], vec![g])
    };

    let reg = tape.add(simclr, supcon);
    let reg = tape.add(reg, metric);
    let reg = tape.scale(reg, T::lit(cfg.lambda));
    let root = tape.add(recon, reg);
    let breakdown = LossBreakdown {
        recon: scalar(&tape, recon),
        simclr: scalar(&tape, simclr),
        supcon: scalar(&tape, supcon),
        metric: scalar(&tape, metric),
        total: scalar(&tape, root),
        lambda: T::lit(cfg.lambda),
        metric_pairs: pairs.len(),
    };
    Ok(Objective { tape, bound, root, breakdown })
}

/// `recon + λ(simclr + supcon + metric)` for one batch.
pub fn total_loss<T: Scalar>(
    batch: &[TrainingScene],
    p: &GraphRaeParams<T>,
    cfg: &GraphRaeConfig,
    aug_seed: u64,
) -> Result<LossBreakdown<T>, GraphRaeError> {
    objective(batch, p, cfg, aug_seed).map(|o| o.breakdown)
}

/// Loss and its gradient with respect to every parameter block.
pub fn loss_gradient<T: Scalar>(
    batch: &[TrainingScene],
    p: &GraphRaeParams<T>,
    cfg: &GraphRaeConfig,
    aug_seed: u64,
) -> Result<(LossBreakdown<T>, GraphRaeGradient<T>), GraphRaeError> {
    let o = objective(batch, p, cfg, aug_seed)?;
    let mut adj = o.tape.backward(o.root);
    let blocks: Vec<Mat<T>> = o
        .bound
        .blocks()
        .into_iter()
        .zip(p.blocks())
        .map(|((_, v), (_, m))| adj[v.0].take().unwrap_or_else(|| Mat::zeros(m.rows(), m.cols())))
        .collect();
    let grad = GraphRaeParams::from_blocks(p.dims, blocks).map_err(GraphRaeError::Dimension)?;
    if let Some(block) = grad.first_non_finite() {
        return Err(GraphRaeError::NonFiniteGradient { block });
    }
    Ok((o.breakdown, grad))
}

#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub params: GraphRaeParams<T>,
    /// Loss of the batch seen at each step, before that step's update.
    pub history: Vec<LossBreakdown<T>>,
}

/// Plain gradient descent over shuffled batches of the scenes in `ds`.
pub fn train<T: Scalar>(ds: &Dataset, cfg: &GraphRaeConfig) -> Result<TrainedModel<T>, GraphRaeError> {
    let scenes: Vec<TrainingScene> = ds
        .tokens()
        .iter()
        .filter_map(|t| {
            Some(TrainingScene {
                graph: ds.graph(t.id())?,
                label: ds.labels(t.id())?.joint(),
                metrics: ds.metrics(t.id()).map(|m| m.to_vec()),
            })
        })
        .collect();
    if scenes.is_empty() {
        return Err(GraphRaeError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = GraphRaeParams::<T>::init(cfg.dims, rng.next_u64());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let bs = cfg.batch_size.clamp(1, scenes.len());
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps);
    let step = T::lit(cfg.step_size);
    for s in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<TrainingScene> = order[cursor..cursor + bs].iter().map(|&i| scenes[i].clone()).collect();
        cursor += bs;
        let (loss, grad) = match loss_gradient(&batch, &params, cfg, rng.next_u64()) {
            Err(GraphRaeError::NonFiniteGradient { .. }) | Err(GraphRaeError::DegenerateEmbedding { .. }) if s > 0 => {
                return Err(GraphRaeError::Divergence { step: s, loss: f64::NAN })
            }
            r => r?,
        };
        if !loss.total.is_finite() {
            return Err(GraphRaeError::Divergence { step: s, loss: loss.total.as_f64() });
        }
        history.push(loss);
        params.add_scaled(&grad, -step);
        if let Some(block) = params.first_non_finite() {
            log::warn!("parameter block {block} became non-finite");
            return Err(GraphRaeError::Divergence { step: s, loss: f64::NAN });
        }
        if s % 50 == 0 {
            log::debug!("graph-rae step {s}: total {:.5}", loss.total.as_f64());
        }
    }
    Ok(TrainedModel { params, history })
}
