use ndarray::Array2;
use num_rational::Ratio;

use crate::classify::BodyRegion;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfusionError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class {0} is not in the matrix")]
    UnknownClass(BodyRegion),
}

/// Counts indexed `[truth, prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<BodyRegion>,
    counts: Array2<u64>,
}

/// Support-weighted one-vs-rest specificity. Classes whose negatives are all
/// absent (TN + FP = 0) have no defined rate and are listed in `skipped`.
#[derive(Debug, Clone, PartialEq)]
pub struct Specificity {
    /// `None` when every supported class was skipped.
    pub value: Option<f64>,
    pub skipped: Vec<BodyRegion>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<BodyRegion>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: Array2::zeros((k, k)),
        }
    }

    /// Matrix over every region, indexed by canonical index.
    pub fn all_regions() -> Self {
        Self::new(BodyRegion::ALL.to_vec())
    }

    pub fn from_counts(classes: Vec<BodyRegion>, counts: Array2<u64>) -> Self {
        assert_eq!(counts.dim(), (classes.len(), classes.len()), "counts must be K×K");
        ConfusionMatrix { classes, counts }
    }

    pub fn classes(&self) -> &[BodyRegion] {
        &self.classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    fn index(&self, region: BodyRegion) -> Result<usize, ConfusionError> {
        self.classes
            .iter()
            .position(|r| *r == region)
            .ok_or(ConfusionError::UnknownClass(region))
    }

    pub fn add(&mut self, truth: BodyRegion, predicted: BodyRegion) -> Result<(), ConfusionError> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[[t, p]] += 1;
        Ok(())
    }

    /// Adds by position in the class list; used on hot paths.
    pub fn add_indexed(&mut self, truth: usize, predicted: usize, n: u64) {
        self.counts[[truth, predicted]] += n;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        self.counts += &other.counts;
    }

    pub fn subtract(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        self.counts -= &other.counts;
    }

    pub fn clear(&mut self) {
        self.counts.fill(0);
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts.diag().sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts.row(k).sum()
    }

    fn predicted_count(&self, k: usize) -> u64 {
        self.counts.column(k).sum()
    }

    /// Recall of one class; `None` without support.
    pub fn sensitivity(&self, region: BodyRegion) -> Result<Option<f64>, ConfusionError> {
        let k = self.index(region)?;
        let support = self.support(k);
        Ok((support > 0).then(|| self.counts[[k, k]] as f64 / support as f64))
    }

    /// One-vs-rest true-negative rate of one class; `None` without negatives.
    pub fn specificity(&self, region: BodyRegion) -> Result<Option<f64>, ConfusionError> {
        let k = self.index(region)?;
        let (tn, fp) = self.negatives(k);
        Ok((tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64))
    }

    fn negatives(&self, k: usize) -> (u64, u64) {
        let total = self.total();
        let support = self.support(k);
        let fp = self.predicted_count(k) - self.counts[[k, k]];
        (total - support - fp, fp)
    }

    /// Σ support·recall / Σ support as an exact fraction. Zero-support classes
    /// contribute nothing.
    pub fn weighted_sensitivity_exact(&self) -> Result<Ratio<u128>, ConfusionError> {
        let total = self.total();
        if total == 0 {
            return Err(ConfusionError::EmptyMatrix);
        }
        let mut sum = Ratio::from_integer(0u128);
        for k in 0..self.classes.len() {
            let support = u128::from(self.support(k));
            if support > 0 {
                let recall = Ratio::new(u128::from(self.counts[[k, k]]), support);
                sum += recall * Ratio::from_integer(support);
            }
        }
        Ok(sum / Ratio::from_integer(u128::from(total)))
    }

    pub fn weighted_sensitivity(&self) -> Result<f64, ConfusionError> {
        let r = self.weighted_sensitivity_exact()?;
        Ok(*r.numer() as f64 / *r.denom() as f64)
    }

    pub fn weighted_specificity(&self) -> Result<Specificity, ConfusionError> {
        if self.total() == 0 {
            return Err(ConfusionError::EmptyMatrix);
        }
        let mut skipped = Vec::new();
        let mut weighted = 0.0;
        let mut weight = 0u64;
        for (k, region) in self.classes.iter().enumerate() {
            let support = self.support(k);
            if support == 0 {
                continue;
            }
            let (tn, fp) = self.negatives(k);
            if tn + fp == 0 {
                skipped.push(*region);
                continue;
            }
            weighted += support as f64 * tn as f64 / (tn + fp) as f64;
            weight += support;
        }
        Ok(Specificity {
            value: (weight > 0).then(|| weighted / weight as f64),
            skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BodyRegion::*;

    fn two(a: [[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec![Abdomen, Chest], Array2::from_shape_fn((2, 2), |(i, j)| a[i][j]))
    }

    #[test]
    fn worked_examples() {
        let cm = two([[8, 2], [1, 9]]);
        assert_eq!(cm.weighted_sensitivity_exact().unwrap(), Ratio::new(17, 20));
        let spec = cm.weighted_specificity().unwrap();
        assert!((spec.value.unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(cm.specificity(Abdomen).unwrap(), Some(0.9));
        assert_eq!(cm.specificity(Chest).unwrap(), Some(0.8));

        assert_eq!(two([[5, 0], [0, 7]]).weighted_sensitivity().unwrap(), 1.0);
        assert_eq!(two([[5, 0], [0, 7]]).weighted_specificity().unwrap().value, Some(1.0));
        assert_eq!(two([[0, 0], [0, 5]]).weighted_sensitivity().unwrap(), 1.0);
    }

    #[test]
    fn single_class_specificity_is_flagged() {
        let spec = two([[0, 0], [0, 5]]).weighted_specificity().unwrap();
        assert_eq!(spec.value, None);
        assert_eq!(spec.skipped, vec![Chest]);
    }

    #[test]
    fn empty_matrix() {
        let cm = two([[0, 0], [0, 0]]);
        assert_eq!(cm.weighted_sensitivity(), Err(ConfusionError::EmptyMatrix));
        assert_eq!(cm.weighted_specificity(), Err(ConfusionError::EmptyMatrix));
    }

    proptest! {
        #[test]
        fn weighted_sensitivity_is_accuracy(k in 1usize..8, cells in proptest::collection::vec(0u64..50, 64)) {
            let counts = Array2::from_shape_fn((k, k), |(i, j)| cells[i * 8 + j]);
            let cm = ConfusionMatrix::from_counts(BodyRegion::ALL[..k].to_vec(), counts);
            prop_assume!(cm.total() > 0);
            let exact = cm.weighted_sensitivity_exact().unwrap();
            prop_assert_eq!(exact, Ratio::new(u128::from(cm.trace()), u128::from(cm.total())));
            prop_assert_eq!(cm.weighted_sensitivity().unwrap(), cm.trace() as f64 / cm.total() as f64);
        }
    }
}
