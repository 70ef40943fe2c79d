//! Scalar loss terms. Each `*_grad` function returns the value together with
//! its gradient so the tape can record it as one fused node.

use crate::linalg::Mat;
use crate::scalar::{log_sum_exp, Scalar};

use super::params::Mlp;
use super::GraphRaeError;

/// Elementwise Huber loss summed over all entries.
pub fn huber<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::lit(0.5) * r * r
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

fn huber_slope<T: Scalar>(r: T, delta: T) -> T {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Sum of Huber losses of `pred − target` and its gradient w.r.t. `pred`,
/// both multiplied by `weight`.
pub(crate) fn huber_grad<T: Scalar>(pred: &Mat<T>, target: &Mat<T>, delta: T, weight: T) -> (T, Mat<T>) {
    assert_eq!(pred.shape(), target.shape());
    let mut total = T::zero();
    let mut g = Mat::zeros(pred.rows(), pred.cols());
    for ((o, &p), &t) in g.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        total += huber(p - t, delta);
        *o = weight * huber_slope(p - t, delta);
    }
    (weight * total, g)
}

/// Sum over nodes and steps of the elementwise Huber loss between predicted
/// and target node sequences.
pub fn loss_recon<T: Scalar>(pred: &[Vec<Vec<T>>], target: &[Vec<Vec<T>>], delta: T) -> Result<T, GraphRaeError> {
    let mismatch = || GraphRaeError::Dimension("prediction and target shapes differ".into());
    if pred.len() != target.len() {
        return Err(mismatch());
    }
    let mut total = T::zero();
    for (pn, tn) in pred.iter().zip(target) {
        if pn.len() != tn.len() {
            return Err(mismatch());
        }
        for (pr, tr) in pn.iter().zip(tn) {
            if pr.len() != tr.len() {
                return Err(mismatch());
            }
            total += pr.iter().zip(tr).map(|(&p, &t)| huber(p - t, delta)).sum::<T>();
        }
    }
    Ok(total)
}

fn check_tau<T: Scalar>(tau: T) -> Result<(), GraphRaeError> {
    if !(tau > T::zero()) {
        return Err(GraphRaeError::Temperature(tau.as_f64()));
    }
    Ok(())
}

/// Cross-view contrastive loss. Row `k` of `za` and `zb` are the two views
/// of scene `k`; the other scenes' second views act as negatives.
pub(crate) fn simclr_grad<T: Scalar>(za: &Mat<T>, zb: &Mat<T>, tau: T) -> Result<(T, Mat<T>, Mat<T>), GraphRaeError> {
    check_tau(tau)?;
    assert_eq!(za.shape(), zb.shape());
    let n = za.rows();
    let s = za.matmul_t(zb).scale(T::one() / tau);
    let nf = T::from_count(n.max(1));
    let mut loss = T::zero();
    // dL/dS scaled by 1/τ
    let mut ds = Mat::zeros(n, n);
    for k in 0..n {
        let row = s.row(k);
        let lse = log_sum_exp(row);
        loss += lse - row[k];
        for m in 0..n {
            let p = (row[m] - lse).exp();
            ds[(k, m)] = (p - if m == k { T::one() } else { T::zero() }) / (nf * tau);
        }
    }
    let ga = ds.matmul(zb);
    let gb = ds.t_matmul(za);
    Ok((loss / nf, ga, gb))
}

pub fn loss_simclr<T: Scalar>(za: &Mat<T>, zb: &Mat<T>, tau: T) -> Result<T, GraphRaeError> {
    if za.shape() != zb.shape() || za.rows() == 0 {
        return Err(GraphRaeError::Dimension("views must be non-empty and equally shaped".into()));
    }
    simclr_grad(za, zb, tau).map(|r| r.0)
}

/// Supervised contrastive loss over rows of `z`, averaged over all anchors;
/// anchors without a positive contribute nothing.
pub(crate) fn supcon_grad<T: Scalar>(z: &Mat<T>, labels: &[usize], tau: T) -> Result<(T, Mat<T>), GraphRaeError> {
    check_tau(tau)?;
    let n = z.rows();
    assert_eq!(labels.len(), n);
    let s = z.matmul_t(z).scale(T::one() / tau);
    let nf = T::from_count(n.max(1));
    let mut loss = T::zero();
    let mut ds = Mat::zeros(n, n);
    let mut others = Vec::with_capacity(n);
    for k in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != k && labels[p] == labels[k]).collect();
        if pos.is_empty() {
            continue;
        }
        others.clear();
        others.extend((0..n).filter(|&m| m != k).map(|m| s[(k, m)]));
        let lse = log_sum_exp(&others);
        let np = T::from_count(pos.len());
        for &p in &pos {
            loss += (lse - s[(k, p)]) / np;
            ds[(k, p)] -= T::one() / np;
        }
        for m in (0..n).filter(|&m| m != k) {
            ds[(k, m)] += (s[(k, m)] - lse).exp();
        }
    }
    let ds = ds.scale(T::one() / (nf * tau));
    // S = Z Zᵀ/τ so dZ = (dS + dSᵀ) Z, with 1/τ already folded into ds.
    let mut g = ds.matmul(z);
    g.add_assign(&ds.t_matmul(z));
    Ok((loss / nf, g))
}

pub fn loss_supcon<T: Scalar>(z: &Mat<T>, labels: &[usize], tau: T) -> Result<T, GraphRaeError> {
    if labels.len() != z.rows() {
        return Err(GraphRaeError::Dimension(format!("{} labels for {} embeddings", labels.len(), z.rows())));
    }
    supcon_grad(z, labels, tau).map(|r| r.0)
}

/// Mean over pairs of `‖pred − target‖²` and its gradient w.r.t. `pred`.
pub(crate) fn pair_mse_grad<T: Scalar>(pred: &Mat<T>, target: &Mat<T>) -> (T, Mat<T>) {
    assert_eq!(pred.shape(), target.shape());
    let np = T::from_count(pred.rows().max(1));
    let mut total = T::zero();
    let mut g = Mat::zeros(pred.rows(), pred.cols());
    for ((o, &p), &t) in g.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        total += (p - t) * (p - t);
        *o = T::lit(2.0) * (p - t) / np;
    }
    (total / np, g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricLoss<T> {
    pub value: T,
    /// Number of unordered pairs with both metric vectors present.
    pub valid_pairs: usize,
}

impl<T: Scalar> MetricLoss<T> {
    /// Set when no pair was valid and the value 0 is a convention.
    pub fn is_empty(&self) -> bool {
        self.valid_pairs == 0
    }
}

/// Unordered pairs `i < j` whose metric vectors are both present, with the
/// target `|m_i − m_j|` per pair.
pub(crate) fn valid_pairs<T: Scalar>(metrics: &[Option<Vec<T>>]) -> (Vec<(usize, usize)>, Vec<Vec<T>>) {
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for i in 0..metrics.len() {
        for j in i + 1..metrics.len() {
            if let (Some(a), Some(b)) = (&metrics[i], &metrics[j]) {
                pairs.push((i, j));
                targets.push(a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).collect());
            }
        }
    }
    (pairs, targets)
}

/// Pairwise metric regression: the head sees `|z_i − z_j|` and predicts
/// `|m_i − m_j|`.
pub fn loss_metric<T: Scalar>(z: &Mat<T>, metrics: &[Option<Vec<T>>], head: &Mlp<Mat<T>>) -> Result<MetricLoss<T>, GraphRaeError> {
    if metrics.len() != z.rows() {
        return Err(GraphRaeError::Dimension(format!("{} metric vectors for {} embeddings", metrics.len(), z.rows())));
    }
    let (pairs, targets) = valid_pairs(metrics);
    if pairs.is_empty() {
        return Ok(MetricLoss { value: T::zero(), valid_pairs: 0 });
    }
    let x = Mat::from_fn(pairs.len(), z.cols(), |r, c| (z[(pairs[r].0, c)] - z[(pairs[r].1, c)]).abs());
    let pred = mlp_eval(&x, head);
    let target = Mat::from_rows(&targets).map_err(|e| GraphRaeError::Dimension(e.to_string()))?;
    if pred.shape() != target.shape() {
        return Err(GraphRaeError::Dimension(format!("head emits {} values, metrics have {}", pred.cols(), target.cols())));
    }
    Ok(MetricLoss { value: pair_mse_grad(&pred, &target).0, valid_pairs: pairs.len() })
}

pub(crate) fn mlp_eval<T: Scalar>(x: &Mat<T>, m: &Mlp<Mat<T>>) -> Mat<T> {
    let add_row = |mut a: Mat<T>, b: &Mat<T>| {
        for i in 0..a.rows() {
            for (o, &v) in a.row_mut(i).iter_mut().zip(b.row(0)) {
                *o += v;
            }
        }
        a
    };
    let h = add_row(x.matmul(&m.w1), &m.b1).map(|v| v.tanh());
    add_row(h.matmul(&m.w2), &m.b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(x: &Mat<f64>, f: &dyn Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let h = 1e-6;
        Mat::from_fn(x.rows(), x.cols(), |i, j| {
            let mut p = x.clone();
            p[(i, j)] += h;
            let mut m = x.clone();
            m[(i, j)] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn close(a: &Mat<f64>, b: &Mat<f64>) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    fn unit_rows(n: usize, d: usize, seed: f64) -> Mat<f64> {
        let mut m = Mat::from_fn(n, d, |i, j| ((i * 5 + j * 11) as f64 * 0.61 + seed).cos());
        for i in 0..n {
            let nr = crate::scalar::norm2(m.row(i));
            m.row_mut(i).iter_mut().for_each(|v| *v /= nr);
        }
        m
    }

    #[test]
    fn huber_branches() {
        let z = vec![vec![vec![0.0]]];
        assert_eq!(loss_recon(&z, &z, 1.0).unwrap(), 0.0);
        assert_eq!(loss_recon(&[vec![vec![0.5]]], &z, 1.0).unwrap(), 0.125);
        assert_eq!(loss_recon(&[vec![vec![2.0]]], &z, 1.0).unwrap(), 1.5);
        assert!(loss_recon(&[vec![vec![2.0, 1.0]]], &z, 1.0).is_err());
    }

    #[test]
    fn simclr_values() {
        let one = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(loss_simclr(&one, &one, 0.1).unwrap(), 0.0);
        let za = Mat::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((loss_simclr(&za, &za, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1269).abs() < 5e-5);
        assert!(loss_simclr(&za, &za, 0.0).is_err());
    }

    #[test]
    fn simclr_rotation_invariant() {
        let za = unit_rows(4, 2, 0.3);
        let zb = unit_rows(4, 2, 1.1);
        let (s, c) = 0.7f64.sin_cos();
        let rot = Mat::from_rows(&[vec![c, s], vec![-s, c]]).unwrap();
        let a = loss_simclr(&za, &zb, 0.5).unwrap();
        let b = loss_simclr(&za.matmul(&rot), &zb.matmul(&rot), 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn supcon_values() {
        let z = unit_rows(3, 3, 0.2);
        assert_eq!(loss_supcon(&z, &[0, 1, 2], 0.1).unwrap(), 0.0);
        let pair = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(loss_supcon::<f64>(&pair, &[4, 4], 1.0).unwrap().abs() < 1e-15);
        assert!(loss_supcon(&pair, &[4, 4], -1.0).is_err());
    }

    #[test]
    fn supcon_decreases_when_negative_moves_away() {
        let base = |neg_angle: f64| {
            Mat::from_rows(&[vec![1.0, 0.0], vec![0.8f64.cos(), 0.8f64.sin()], vec![neg_angle.cos(), neg_angle.sin()]]).unwrap()
        };
        let labels = [0, 0, 1];
        let near = loss_supcon(&base(0.5), &labels, 0.5).unwrap();
        let far = loss_supcon(&base(2.5), &labels, 0.5).unwrap();
        assert!(far < near);
    }

    #[test]
    fn metric_values() {
        let head = Mlp {
            w1: Mat::zeros(2, 2),
            b1: Mat::zeros(1, 2),
            w2: Mat::zeros(2, 1),
            b2: Mat::from_rows(&[vec![0.3]]).unwrap(),
        };
        let z = unit_rows(2, 2, 0.0);
        let m = loss_metric(&z, &[Some(vec![0.9]), Some(vec![0.4])], &head).unwrap();
        assert!((m.value - 0.04).abs() < 1e-15);
        assert_eq!(m.valid_pairs, 1);
        let none = loss_metric(&z, &[Some(vec![0.9]), None], &head).unwrap();
        assert!(none.is_empty() && none.value == 0.0);
        let zero_head = Mlp { b2: Mat::zeros(1, 1), ..head };
        let same = loss_metric(&unit_rows(3, 2, 0.4), &[Some(vec![0.2]), Some(vec![0.2]), Some(vec![0.2])], &zero_head).unwrap();
        assert_eq!(same.value, 0.0);
    }

    #[test]
    fn local_gradients_match_differences() {
        let za = unit_rows(4, 3, 0.1);
        let zb = unit_rows(4, 3, 0.9);
        let (_, ga, gb) = simclr_grad(&za, &zb, 0.3).unwrap();
        close(&ga, &numeric(&za, &|a| simclr_grad(a, &zb, 0.3).unwrap().0));
        close(&gb, &numeric(&zb, &|b| simclr_grad(&za, b, 0.3).unwrap().0));
        let labels = [1, 0, 1, 1];
        let (_, g) = supcon_grad(&za, &labels, 0.3).unwrap();
        close(&g, &numeric(&za, &|z| supcon_grad(z, &labels, 0.3).unwrap().0));
        let (_, g) = huber_grad(&za, &zb.scale(3.0), 1.0, 0.5);
        close(&g, &numeric(&za, &|a| huber_grad(a, &zb.scale(3.0), 1.0, 0.5).0));
        let (_, g) = pair_mse_grad(&za, &zb);
        close(&g, &numeric(&za, &|a| pair_mse_grad(a, &zb).0));
    }
}
