//! Token-level retrieval of synthetic scenes around underperforming
//! calibration anchors, plus the selection CSV shared with the baselines.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{dot, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Anchors kept per cluster.
    pub per_cluster: usize,
    /// Only scenes scoring at or below this are anchors.
    pub threshold: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { per_cluster: 32, threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor<T = f64> {
    pub token_id: String,
    pub cluster: usize,
    pub score: T,
    /// Unit norm.
    pub embedding: Vec<T>,
}

/// Calibration scene view consumed by [`select_anchors`].
#[derive(Clone, Copy, Debug)]
pub struct CalibrationScene<'a, T> {
    pub token_id: &'a str,
    pub cluster: usize,
    pub score: T,
    pub embedding: &'a [T],
}

/// Per cluster, the `per_cluster` lowest-scoring scenes with score at most
/// the threshold. Ties break by token id. Output is sorted by cluster, then rank.
pub fn select_anchors<T: Scalar>(cal: &[CalibrationScene<'_, T>], cfg: &AnchorConfig) -> Vec<Anchor<T>> {
    let mut eligible: Vec<&CalibrationScene<'_, T>> = cal.iter().filter(|c| c.score <= T::lit(cfg.threshold)).collect();
    eligible.sort_by(|a, b| {
        a.cluster
            .cmp(&b.cluster)
            .then(a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal))
            .then(a.token_id.cmp(b.token_id))
    });
    let mut out = Vec::new();
    let mut run = (usize::MAX, 0);
    for c in eligible {
        if run.0 != c.cluster {
            run = (c.cluster, 0);
        }
        if run.1 < cfg.per_cluster {
            out.push(Anchor { token_id: c.token_id.to_string(), cluster: c.cluster, score: c.score, embedding: c.embedding.to_vec() });
            run.1 += 1;
        }
    }
    out
}

/// `(1 + α_c)·(1 − s̄)·max(cos, 0)` for unit-norm embeddings.
pub fn priority<T: Scalar>(anchor: &Anchor<T>, candidate: &[T], alpha: &[T]) -> T {
    anchor_factor(anchor, alpha) * dot(&anchor.embedding, candidate).max(T::zero())
}

fn anchor_factor<T: Scalar>(anchor: &Anchor<T>, alpha: &[T]) -> T {
    (T::one() + alpha.get(anchor.cluster).copied().unwrap_or(T::zero())) * (T::one() - anchor.score)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate<T = f64> {
    /// Index into the pool.
    pub index: usize,
    pub token_id: String,
    pub priority: T,
    /// Index into the anchor list; `None` for uniform fallback picks.
    pub best_anchor: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<T> {
    pub ranked: Vec<RankedCandidate<T>>,
    /// `B − selected` when the pool is smaller than the budget.
    pub shortfall: usize,
    /// True when no anchors existed and the selection is uniform.
    pub fallback_uniform: bool,
}

impl<T> Retrieval<T> {
    pub fn indices(&self) -> Vec<usize> {
        self.ranked.iter().map(|c| c.index).collect()
    }
}

/// Orders by priority descending, then token id ascending.
fn rank_order<T: Scalar>(a: &RankedCandidate<T>, b: &RankedCandidate<T>) -> Ordering {
    b.priority.partial_cmp(&a.priority).unwrap_or(Ordering::Equal).then_with(|| a.token_id.cmp(&b.token_id))
}

/// Global top-`budget` ranking of pool tokens by their best anchor priority.
pub fn retrieve<T: Scalar>(
    anchors: &[Anchor<T>],
    pool_ids: &[String],
    pool_embeddings: &[Vec<T>],
    alpha: &[T],
    budget: usize,
    seed: u64,
) -> Retrieval<T> {
    assert_eq!(pool_ids.len(), pool_embeddings.len());
    let take = budget.min(pool_ids.len());
    let shortfall = budget - take;
    if anchors.is_empty() {
        if take > 0 {
            log::warn!("retrieve: no anchors; falling back to uniform sampling of {take} tokens");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranked = sample(&mut rng, pool_ids.len(), take)
            .into_iter()
            .map(|i| RankedCandidate { index: i, token_id: pool_ids[i].clone(), priority: T::zero(), best_anchor: None })
            .collect();
        return Retrieval { ranked, shortfall, fallback_uniform: true };
    }
    let factors: Vec<T> = anchors.iter().map(|a| anchor_factor(a, alpha)).collect();
    let mut cands: Vec<RankedCandidate<T>> = pool_embeddings
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let mut best = (T::neg_infinity(), 0);
            for (i, a) in anchors.iter().enumerate() {
                let p = factors[i] * dot(&a.embedding, v).max(T::zero());
                if p > best.0 || (p == best.0 && a.token_id < anchors[best.1].token_id) {
                    best = (p, i);
                }
            }
            RankedCandidate { index: j, token_id: pool_ids[j].clone(), priority: best.0, best_anchor: Some(best.1) }
        })
        .collect();
    cands.sort_by(rank_order);
    cands.truncate(take);
    Retrieval { ranked: cands, shortfall, fallback_uniform: false }
}

/// One output row of any selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub method: String,
    pub rank: usize,
    pub token_id: String,
    pub priority: Option<f64>,
    pub best_anchor_id: Option<String>,
    pub anchor_cluster: Option<usize>,
}

impl SelectionRecord {
    pub fn from_retrieval<T: Scalar>(r: &Retrieval<T>, anchors: &[Anchor<T>]) -> Vec<Self> {
        r.ranked
            .iter()
            .enumerate()
            .map(|(rank, c)| SelectionRecord {
                method: "autoscale".into(),
                rank: rank + 1,
                token_id: c.token_id.clone(),
                priority: Some(c.priority.as_f64()),
                best_anchor_id: c.best_anchor.map(|a| anchors[a].token_id.clone()),
                anchor_cluster: c.best_anchor.map(|a| anchors[a].cluster),
            })
            .collect()
    }

    pub fn from_indices(method: &str, indices: &[usize], pool_ids: &[String], priorities: Option<&[f64]>) -> Vec<Self> {
        indices
            .iter()
            .enumerate()
            .map(|(rank, &i)| SelectionRecord {
                method: method.to_string(),
                rank: rank + 1,
                token_id: pool_ids[i].clone(),
                priority: priorities.map(|p| p[i]),
                best_anchor_id: None,
                anchor_cluster: None,
            })
            .collect()
    }
}

/// Columns: method, rank, token_id, priority, best_anchor_id, anchor_cluster.
pub fn write_selection_csv<W: Write>(rows: &[SelectionRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "rank", "token_id", "priority", "best_anchor_id", "anchor_cluster"])?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.rank.to_string(),
            r.token_id.clone(),
            r.priority.map_or_else(String::new, |p| format!("{p:.8e}")),
            r.best_anchor_id.clone().unwrap_or_default(),
            r.anchor_cluster.map_or_else(String::new, |c| c.to_string()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_selection_csv<R: std::io::Read>(r: R) -> Result<Vec<SelectionRecord>, csv::Error> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let opt = |i: usize| Some(field(i)).filter(|s| !s.is_empty());
        out.push(SelectionRecord {
            method: field(0),
            rank: field(1).parse().unwrap_or(0),
            token_id: field(2),
            priority: opt(3).and_then(|s| s.parse().ok()),
            best_anchor_id: opt(4),
            anchor_cluster: opt(5).and_then(|s| s.parse().ok()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::normalized;
    use proptest::prelude::*;
    use rand::Rng;

    fn anchor(id: &str, cluster: usize, score: f64, e: &[f64]) -> Anchor<f64> {
        Anchor { token_id: id.into(), cluster, score, embedding: normalized(e).unwrap() }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    #[test]
    fn anchor_selection() {
        let e = [1.0, 0.0];
        let names: Vec<String> = (0..45).map(|i| format!("c{i:02}")).collect();
        let all_good: Vec<_> = names.iter().map(|n| CalibrationScene { token_id: n, cluster: 0, score: 1.0, embedding: &e[..] }).collect();
        assert!(select_anchors(&all_good, &AnchorConfig::default()).is_empty());
        let mut one = all_good.clone();
        one[3].score = 0.0;
        let a = select_anchors(&one, &AnchorConfig::default());
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].token_id, "c03");

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut many = all_good.clone();
        for (i, s) in many.iter_mut().enumerate().take(40) {
            s.score = if i % 7 == 0 { 0.25 } else { rng.random_range(0.0..0.5) };
        }
        let chosen = select_anchors(&many, &AnchorConfig::default());
        assert_eq!(chosen.len(), 32);
        let mut oracle: Vec<(f64, &str)> = many.iter().filter(|s| s.score <= 0.5).map(|s| (s.score, s.token_id)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        let expect: Vec<&str> = oracle.iter().take(32).map(|x| x.1).collect();
        let got: Vec<&str> = chosen.iter().map(|a| a.token_id.as_str()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn priority_examples() {
        let a = anchor("a", 0, 0.0, &[1.0, 0.0]);
        assert_eq!(priority(&a, &[1.0, 0.0], &[1.0]), 2.0);
        let sat = anchor("a", 0, 1.0, &[1.0, 0.0]);
        assert_eq!(priority(&sat, &[1.0, 0.0], &[1.0]), 0.0);
        let q = anchor("a", 0, 0.25, &[1.0, 0.0]);
        let cand = [0.5, 0.75f64.sqrt()];
        assert!((priority(&q, &cand, &[0.2]) - 0.45).abs() < 1e-12);
        assert_eq!(priority(&q, &[-1.0, 0.0], &[0.2]), 0.0);
    }

    #[test]
    fn retrieval_examples() {
        let a = vec![anchor("a", 0, 0.0, &[1.0, 0.0])];
        let pool: Vec<Vec<f64>> = [0.9f64, 0.5, 0.1].iter().map(|&c| vec![c, (1.0 - c * c).sqrt()]).collect();
        let r = retrieve(&a, &ids(3), &pool, &[0.0], 2, 0);
        assert_eq!(r.indices(), vec![0, 1]);
        assert!(retrieve(&a, &ids(3), &pool, &[0.0], 0, 0).ranked.is_empty());
        let short = retrieve(&a, &ids(3), &pool, &[0.0], 5, 0);
        assert_eq!((short.ranked.len(), short.shortfall), (3, 2));
        let fb = retrieve::<f64>(&[], &ids(3), &pool, &[0.0], 2, 0);
        assert!(fb.fallback_uniform);
        assert_eq!(fb.ranked.len(), 2);
    }

    #[test]
    fn selection_csv_round_trip() {
        let a = vec![anchor("anc", 2, 0.1, &[1.0, 0.0])];
        let r = retrieve(&a, &ids(2), &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0, 0.5], 2, 0);
        let rows = SelectionRecord::from_retrieval(&r, &a);
        let mut buf = Vec::new();
        write_selection_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,rank,token_id,priority,best_anchor_id,anchor_cluster\n"));
        let back = read_selection_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].token_id, "s0000");
        assert_eq!(back[0].anchor_cluster, Some(2));
        assert!((back[0].priority.unwrap() - 1.35).abs() < 1e-8);
    }

    /// Enumerates every (anchor, candidate) pair, sorts pairs, and keeps the
    /// first occurrence of each candidate.
    fn brute_force(anchors: &[Anchor<f64>], pool: &[Vec<f64>], ids: &[String], alpha: &[f64], b: usize) -> Vec<usize> {
        let mut pairs = Vec::new();
        for a in anchors {
            for (j, v) in pool.iter().enumerate() {
                let cos: f64 = a.embedding.iter().zip(v).map(|(x, y)| x * y).sum();
                pairs.push(((1.0 + alpha[a.cluster]) * (1.0 - a.score) * cos.max(0.0), j));
            }
        }
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(ids[x.1].cmp(&ids[y.1])));
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (_, j) in pairs {
            if out.len() == b {
                break;
            }
            if seen.insert(j) {
                out.push(j);
            }
        }
        out
    }

    fn instance(seed: u64, n_anchor: usize, n_pool: usize) -> (Vec<Anchor<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Some(u) = normalized(&v) {
                break u;
            }
        };
        let anchors = (0..n_anchor)
            .map(|i| Anchor { token_id: format!("a{i}"), cluster: i % 3, score: rng.random_range(0.0..0.5), embedding: unit(&mut rng) })
            .collect();
        let pool = (0..n_pool).map(|_| unit(&mut rng)).collect();
        let alpha = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        (anchors, pool, alpha)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_brute_force(seed in 0u64..10_000, n_anchor in 1usize..12, n_pool in 1usize..1000, b in 0usize..1200) {
            let (anchors, pool, alpha) = instance(seed, n_anchor, n_pool);
            let names = ids(n_pool);
            let r = retrieve(&anchors, &names, &pool, &alpha, b, seed);
            let got = r.indices();
            prop_assert_eq!(&got, &brute_force(&anchors, &pool, &names, &alpha, b));
            prop_assert_eq!(got.len(), b.min(n_pool));
            let uniq: std::collections::BTreeSet<_> = got.iter().collect();
            prop_assert_eq!(uniq.len(), got.len());
        }

        #[test]
        fn raising_cosine_keeps_selection(seed in 0u64..10_000, b in 1usize..20) {
            let (anchors, mut pool, alpha) = instance(seed, 4, 40);
            let names = ids(40);
            let before = retrieve(&anchors, &names, &pool, &alpha, b, 0).indices();
            let j = before[before.len() - 1];
            let best = retrieve(&anchors, &names, &pool, &alpha, 40, 0).ranked.into_iter().find(|c| c.index == j).unwrap();
            // move the candidate onto its best anchor: cosine rises to 1
            pool[j] = anchors[best.best_anchor.unwrap()].embedding.clone();
            let after = retrieve(&anchors, &names, &pool, &alpha, b, 0).indices();
            prop_assert!(after.contains(&j));
        }

        #[test]
        fn zero_alpha_ranks_by_demand_times_cosine(seed in 0u64..10_000) {
            let (anchors, pool, _) = instance(seed, 5, 60);
            let names = ids(60);
            let r = retrieve(&anchors, &names, &pool, &[0.0; 3], 60, 0);
            for c in &r.ranked {
                let expect = anchors.iter().map(|a| (1.0 - a.score) * dot(&a.embedding, &pool[c.index]).max(0.0)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!((c.priority - expect).abs() < 1e-12);
            }
        }
    }
}
