//! Driving scores (PDMS, EPDMS) and the analysis statistics used to study
//! mixtures: Jaccard overlap of selections and predictor R².

use std::collections::BTreeSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster_ga::{feature_row, fit_predictor, PairSample};
use crate::linalg::Mat;
use crate::scalar::{dot, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("subscore {name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("R² is undefined: targets have zero variance")]
    ZeroVariance,
    #[error("R² needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("prediction/target length mismatch ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("predictor fit failed: {0}")]
    Fit(String),
}

/// Per-scene driving subscores, each in [0, 1].
///
/// `comf` only feeds PDMS; `ddc`, `tlc`, `lk`, `hc` and `ec` only feed EPDMS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubscoreVector<T = f64> {
    pub nc: T,
    pub dac: T,
    pub ddc: T,
    pub tlc: T,
    pub ep: T,
    pub ttc: T,
    pub lk: T,
    pub hc: T,
    pub ec: T,
    pub comf: T,
}

impl<T: Scalar> SubscoreVector<T> {
    pub const LEN: usize = 10;

    pub fn ones() -> Self {
        Self::splat(T::one())
    }

    pub fn splat(v: T) -> Self {
        Self { nc: v, dac: v, ddc: v, tlc: v, ep: v, ttc: v, lk: v, hc: v, ec: v, comf: v }
    }

    pub fn named(&self) -> [(&'static str, T); 10] {
        [
            ("nc", self.nc),
            ("dac", self.dac),
            ("ddc", self.ddc),
            ("tlc", self.tlc),
            ("ep", self.ep),
            ("ttc", self.ttc),
            ("lk", self.lk),
            ("hc", self.hc),
            ("ec", self.ec),
            ("comf", self.comf),
        ]
    }

    /// Components in the fixed order nc, dac, ddc, tlc, ep, ttc, lk, hc, ec, comf.
    pub fn to_vec(&self) -> Vec<T> {
        self.named().iter().map(|&(_, v)| v).collect()
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        for (name, v) in self.named() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(MetricError::OutOfRange { name, value: v.as_f64() });
            }
        }
        Ok(())
    }
}

/// `NC × DAC × (5·EP + 5·TTC + 2·Comf) / 12`.
pub fn pdms<T: Scalar>(s: &SubscoreVector<T>) -> Result<T, MetricError> {
    s.validate()?;
    let weighted = T::lit(5.0) * s.ep + T::lit(5.0) * s.ttc + T::lit(2.0) * s.comf;
    Ok(s.nc * s.dac * weighted / T::lit(12.0))
}

/// `NC × DAC × DDC × TLC × (5·EP + 5·TTC + 2·LK + 2·HC + 2·EC) / 16`.
pub fn epdms<T: Scalar>(s: &SubscoreVector<T>) -> Result<T, MetricError> {
    s.validate()?;
    let two = T::lit(2.0);
    let weighted = T::lit(5.0) * s.ep + T::lit(5.0) * s.ttc + two * s.lk + two * s.hc + two * s.ec;
    Ok(s.nc * s.dac * s.ddc * s.tlc * weighted / T::lit(16.0))
}

/// Jaccard similarity `|A ∩ B| / |A ∪ B|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jaccard {
    pub value: f64,
    /// Set when both inputs were empty and the value 1 is a convention.
    pub both_empty: bool,
}

pub fn jaccard<'a, K: Ord + Hash + 'a>(
    a: impl IntoIterator<Item = &'a K>,
    b: impl IntoIterator<Item = &'a K>,
) -> Jaccard {
    let a: BTreeSet<&K> = a.into_iter().collect();
    let b: BTreeSet<&K> = b.into_iter().collect();
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    if union == 0 {
        log::warn!("jaccard of two empty sets; using 1 by convention");
        return Jaccard { value: 1.0, both_empty: true };
    }
    Jaccard { value: jaccard_from_counts(inter, union), both_empty: false }
}

pub fn jaccard_from_counts(intersection: usize, union: usize) -> f64 {
    intersection as f64 / union as f64
}

/// Coefficient of determination `1 − SSE/SST`.
pub fn r_squared<T: Scalar>(predicted: &[T], actual: &[T]) -> Result<T, MetricError> {
    if predicted.len() != actual.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), actual.len()));
    }
    if actual.len() < 2 {
        return Err(MetricError::TooFewSamples(actual.len()));
    }
    let mean = actual.iter().copied().sum::<T>() / T::from_count(actual.len());
    let sst: T = actual.iter().map(|&y| (y - mean) * (y - mean)).sum();
    if sst <= T::zero() {
        return Err(MetricError::ZeroVariance);
    }
    let sse: T = predicted.iter().zip(actual).map(|(&p, &y)| (y - p) * (y - p)).sum();
    Ok(T::one() - sse / sst)
}

/// In-sample R² of the surrogate fitted with the similarity kernel and with
/// the identity on the same pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationGain<T = f64> {
    pub kernel: T,
    pub identity: T,
}

impl<T: Scalar> PropagationGain<T> {
    pub fn delta(&self) -> T {
        self.kernel - self.identity
    }
}

/// R² of a fitted predictor over its own pair rows.
pub fn predictor_r_squared<T: Scalar>(pairs: &[PairSample<T>], r: &Mat<T>, lambda_reg: T) -> Result<T, MetricError> {
    let p = fit_predictor(pairs, r, lambda_reg).map_err(|e| MetricError::Fit(e.to_string()))?;
    let mut phi = p.beta.clone();
    phi.push(p.gamma);
    let predicted: Vec<T> = pairs.iter().map(|s| dot(&feature_row(r, s.cluster, &s.delta_logw, &s.delta_r), &phi)).collect();
    let actual: Vec<T> = pairs.iter().map(|s| s.target).collect();
    r_squared(&predicted, &actual)
}

pub fn propagation_gain<T: Scalar>(pairs: &[PairSample<T>], r: &Mat<T>, lambda_reg: T) -> Result<PropagationGain<T>, MetricError> {
    let kernel = predictor_r_squared(pairs, r, lambda_reg)?;
    let identity = predictor_r_squared(pairs, &Mat::identity(r.rows()), lambda_reg)?;
    Ok(PropagationGain { kernel, identity })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(nc: f64, dac: f64, ep: f64, ttc: f64, comf: f64) -> SubscoreVector {
        SubscoreVector { nc, dac, ep, ttc, comf, ..SubscoreVector::ones() }
    }

    #[test]
    fn pdms_values() {
        assert_eq!(pdms(&SubscoreVector::<f64>::ones()).unwrap(), 1.0);
        assert_eq!(pdms(&sub(0.0, 1.0, 1.0, 1.0, 1.0)).unwrap(), 0.0);
        let v = pdms(&sub(1.0, 1.0, 0.8, 1.0, 1.0)).unwrap();
        assert!((v - 11.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn epdms_values() {
        assert_eq!(epdms(&SubscoreVector::<f64>::ones()).unwrap(), 1.0);
        for gate in 0..4 {
            let mut s = SubscoreVector::<f64>::ones();
            match gate {
                0 => s.nc = 0.0,
                1 => s.dac = 0.0,
                2 => s.ddc = 0.0,
                _ => s.tlc = 0.0,
            }
            assert_eq!(epdms(&s).unwrap(), 0.0);
        }
        let s = SubscoreVector { ttc: 0.5, ec: 0.0, ..SubscoreVector::<f64>::ones() };
        assert_eq!(epdms(&s).unwrap(), 0.71875);
    }

    #[test]
    fn out_of_range_rejected() {
        let s = SubscoreVector { ep: 1.2, ..SubscoreVector::<f64>::ones() };
        assert_eq!(pdms(&s), Err(MetricError::OutOfRange { name: "ep", value: 1.2 }));
        let s = SubscoreVector { lk: f64::NAN, ..SubscoreVector::<f64>::ones() };
        assert!(epdms(&s).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let a = ["x", "y"];
        assert_eq!(jaccard(&a, &a).value, 1.0);
        assert_eq!(jaccard(&["x"], &["y"]).value, 0.0);
        let empty: [&str; 0] = [];
        let j = jaccard(&empty, &empty);
        assert!(j.both_empty && j.value == 1.0);
        let j = jaccard(&["a", "b", "c"], &["b", "c", "d"]);
        assert_eq!(j.value, 0.5);
        assert!((jaccard_from_counts(57_000, 143_000) - 0.399).abs() < 5e-4);
    }

    #[test]
    fn r_squared_cases() {
        let y = [1.0, 2.0, 4.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        let mean = [7.0f64 / 3.0; 3];
        assert!(r_squared(&mean, &y).unwrap().abs() < 1e-15);
        assert_eq!(r_squared(&[1.0, 1.0], &[2.0, 2.0]), Err(MetricError::ZeroVariance));
        assert_eq!(r_squared(&[1.0], &[2.0]), Err(MetricError::TooFewSamples(1)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit() -> impl Strategy<Value = f64> {
            0.0..=1.0f64
        }

        fn subscores() -> impl Strategy<Value = SubscoreVector> {
            proptest::collection::vec(unit(), 10).prop_map(|v| SubscoreVector {
                nc: v[0],
                dac: v[1],
                ddc: v[2],
                tlc: v[3],
                ep: v[4],
                ttc: v[5],
                lk: v[6],
                hc: v[7],
                ec: v[8],
                comf: v[9],
            })
        }

        proptest! {
            #[test]
            fn scores_bounded_and_monotone(s in subscores(), idx in 0usize..10, bump in unit()) {
                let p = pdms(&s).unwrap();
                let e = epdms(&s).unwrap();
                prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&e));
                let mut v = s.to_vec();
                v[idx] = (v[idx] + bump).min(1.0);
                let t = SubscoreVector { nc: v[0], dac: v[1], ddc: v[2], tlc: v[3], ep: v[4], ttc: v[5], lk: v[6], hc: v[7], ec: v[8], comf: v[9] };
                prop_assert!(pdms(&t).unwrap() >= p - 1e-15);
                prop_assert!(epdms(&t).unwrap() >= e - 1e-15);
            }

            #[test]
            fn jaccard_symmetric_bounded(a in proptest::collection::btree_set(0u8..30, 0..20), b in proptest::collection::btree_set(0u8..30, 0..20)) {
                let ab = jaccard(&a, &b).value;
                let ba = jaccard(&b, &a).value;
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(ab == 1.0, a == b);
            }
        }
    }

    #[test]
    fn propagation_gain_prefers_the_true_kernel() {
        use crate::cluster_ga::{build_pairs, synthetic_ratio, MixtureVector, PairWeighting, RoundObservation};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let k = 4;
        let r = Mat::from_fn(k, k, |i, j| if i == j { 1.0 } else if i / 2 == j / 2 { 0.8 } else { 0.05 });
        let beta = [0.2, 0.1, 0.3, 0.15];
        let n0 = [10, 10, 10, 10];
        let history: Vec<RoundObservation<f64>> = (0..6)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let w = MixtureVector::from_unnormalized(&raw).unwrap();
                let lw = w.log();
                let rr = synthetic_ratio(&w.w, &n0, 100);
                let s = (0..k).map(|c| Some((0..k).map(|j| r[(c, j)] * beta[j] * lw[j]).sum::<f64>() + 0.1 * (0..k).map(|j| r[(c, j)] * rr[j]).sum::<f64>())).collect();
                RoundObservation { w, s_bar: s }
            })
            .collect();
        let pairs = build_pairs(&history, &n0, 100, PairWeighting::Uniform).unwrap();
        let g = propagation_gain(&pairs, &r, 1e-6).unwrap();
        assert!(g.kernel > 0.999, "{g:?}");
        assert!(g.delta() > 0.0);
    }
}
