use serde::{Serialize, Serializer};

use super::region::{BodyRegion, ClassSet};

/// Tolerance within which a probability vector is accepted and renormalized.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PredictionError {
    #[error("expected {expected} probabilities, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("probability {value} at index {index} is negative or not finite")]
    InvalidValue { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
}

/// Per-image class probabilities with derived label, margin and entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sop_uid: String,
    pub classes: ClassSet,
    pub probabilities: Vec<f64>,
    /// Highest-probability class; the earliest class wins ties.
    pub label: BodyRegion,
    /// Top probability minus runner-up, in [0, 1].
    pub margin: f64,
    /// Shannon entropy divided by ln K, in [0, 1]; zero when K = 1.
    pub entropy: f64,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Prediction {
    /// Validates a probability vector: right length, finite, non-negative,
    /// summing to 1 within [`SUM_TOLERANCE`]. Accepted vectors are
    /// renormalized to sum to 1.
    pub fn new(sop_uid: impl Into<String>, classes: ClassSet, probabilities: Vec<f64>) -> Result<Self, PredictionError> {
        if probabilities.len() != classes.len() {
            return Err(PredictionError::WrongLength {
                expected: classes.len(),
                actual: probabilities.len(),
            });
        }
        if let Some((index, &value)) = probabilities
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(PredictionError::InvalidValue { index, value });
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(PredictionError::NotNormalized(sum));
        }
        let probabilities: Vec<f64> = probabilities.into_iter().map(|p| p / sum).collect();
        let top = argmax(&probabilities);
        let runner_up = probabilities
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != top)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        let k = probabilities.len();
        let entropy = if k > 1 {
            let h: f64 = probabilities.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
            (h / (k as f64).ln()).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Ok(Prediction {
            sop_uid: sop_uid.into(),
            label: classes.get(top).expect("index within class set"),
            margin: (probabilities[top] - runner_up).clamp(0.0, 1.0),
            entropy,
            classes,
            probabilities,
        })
    }

    pub fn from_scores(sop_uid: impl Into<String>, classes: ClassSet, scores: &[f64]) -> Result<Self, PredictionError> {
        Self::new(sop_uid, classes, softmax(scores))
    }

    pub fn one_hot(sop_uid: impl Into<String>, classes: ClassSet, region: BodyRegion) -> Option<Self> {
        let index = classes.index_of(region)?;
        let mut p = vec![0.0; classes.len()];
        p[index] = 1.0;
        Self::new(sop_uid, classes, p).ok()
    }

    pub fn probability(&self, region: BodyRegion) -> f64 {
        self.classes.index_of(region).map_or(0.0, |i| self.probabilities[i])
    }

    /// Re-expresses the prediction over another class set. Mass on classes
    /// outside `classes` is dropped and the rest renormalized; `None` when
    /// nothing is left.
    pub fn restrict(&self, classes: &ClassSet) -> Option<Self> {
        let p: Vec<f64> = classes.iter().map(|r| self.probability(r)).collect();
        let sum: f64 = p.iter().sum();
        if !(sum > 0.0) {
            return None;
        }
        Self::new(self.sop_uid.clone(), classes.clone(), p.into_iter().map(|v| v / sum).collect()).ok()
    }
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Prediction", 4)?;
        st.serialize_field("sop_uid", &self.sop_uid)?;
        st.serialize_field("label", &self.label)?;
        st.serialize_field("margin", &self.margin)?;
        st.serialize_field("entropy", &self.entropy)?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Modality;
    use proptest::prelude::*;

    fn two() -> ClassSet {
        ClassSet::new(vec![BodyRegion::Abdomen, BodyRegion::Chest]).unwrap()
    }

    #[test]
    fn label_and_margin() {
        let p = Prediction::new("u", two(), vec![0.9, 0.1]).unwrap();
        assert_eq!(p.label, BodyRegion::Abdomen);
        assert!((p.margin - 0.8).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_one_hot() {
        let k = ClassSet::output(&Modality::Mr);
        let n = k.len();
        let u = Prediction::new("u", k.clone(), vec![1.0 / n as f64; n]).unwrap();
        assert!((u.entropy - 1.0).abs() < 1e-12);
        assert!(u.margin.abs() < 1e-12);
        assert_eq!(u.label, k.get(0).unwrap());
        let h = Prediction::one_hot("u", k, BodyRegion::Knee).unwrap();
        assert_eq!(h.entropy, 0.0);
        assert_eq!(h.margin, 1.0);
        assert_eq!(h.label, BodyRegion::Knee);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(matches!(Prediction::new("u", two(), vec![0.5, 0.3]), Err(PredictionError::NotNormalized(_))));
        assert!(matches!(Prediction::new("u", two(), vec![1.5, -0.5]), Err(PredictionError::InvalidValue { index: 1, .. })));
        assert!(matches!(Prediction::new("u", two(), vec![f64::NAN, 1.0]), Err(PredictionError::InvalidValue { .. })));
        assert!(matches!(Prediction::new("u", two(), vec![1.0]), Err(PredictionError::WrongLength { .. })));
        let p = Prediction::new("u", two(), vec![0.5, 0.5000005]).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn restrict_drops_missing_classes() {
        let mr = ClassSet::internal(&Modality::Mr);
        let mut v = vec![0.0; mr.len()];
        v[mr.index_of(BodyRegion::Breast).unwrap()] = 0.6;
        v[mr.index_of(BodyRegion::Chest).unwrap()] = 0.4;
        let p = Prediction::new("u", mr, v).unwrap();
        let ct = p.restrict(&ClassSet::internal(&Modality::Ct)).unwrap();
        assert_eq!(ct.label, BodyRegion::Chest);
        assert!((ct.probability(BodyRegion::Chest) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariants_hold(raw in proptest::collection::vec(-20.0f64..20.0, 1..20)) {
            let regions: Vec<BodyRegion> = BodyRegion::ALL[..raw.len()].to_vec();
            let p = Prediction::from_scores("u", ClassSet::new(regions).unwrap(), &raw).unwrap();
            prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.probabilities.iter().all(|v| *v >= 0.0));
            prop_assert!((0.0..=1.0).contains(&p.margin));
            prop_assert!((0.0..=1.0).contains(&p.entropy));
        }

        #[test]
        fn argmax_survives_monotone_maps(raw in proptest::collection::vec(-5.0f64..5.0, 2..19)) {
            let regions: Vec<BodyRegion> = BodyRegion::ALL[..raw.len()].to_vec();
            let set = ClassSet::new(regions).unwrap();
            let base = Prediction::from_scores("u", set.clone(), &raw).unwrap();
            for f in [|x: f64| 3.0 * x + 1.0, |x: f64| x.powi(3), |x: f64| (x / 5.0).atan()] {
                let mapped: Vec<f64> = raw.iter().map(|v| f(*v)).collect();
                let p = Prediction::from_scores("u", set.clone(), &mapped).unwrap();
                prop_assert_eq!(p.label, base.label);
            }
        }
    }
}
