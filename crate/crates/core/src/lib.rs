//! Closed-loop data-mixture optimization for real/synthetic co-training of
//! driving policies.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod analytics;
pub mod baselines;
pub mod cluster_ga;
pub mod engine;
pub mod graph_rae;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod retrieval;
pub mod scalar;
pub mod scene;

pub type Mat = linalg::Mat<f64>;
pub type MixtureVector = cluster_ga::MixtureVector<f64>;
pub type PredictorParams = cluster_ga::PredictorParams<f64>;
pub type GainVector = cluster_ga::GainVector<f64>;
pub type ClusterModel = analytics::ClusterModel<f64>;
pub type ClusterScores = analytics::ClusterScores<f64>;
pub type Anchor = retrieval::Anchor<f64>;
pub type GraphRaeParams = graph_rae::GraphRaeParams<f64>;
pub type SceneEmbedding = graph_rae::SceneEmbedding<f64>;
pub type Pools = engine::Pools<f64>;
pub type Prepared = engine::Prepared<f64>;
