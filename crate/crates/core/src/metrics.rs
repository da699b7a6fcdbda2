//! Classification metrics over flattened per-step predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        check_inputs(preds, labels, k)?;
        let mut counts = vec![0u64; k * k];
        for (&p, &y) in preds.iter().zip(labels) {
            counts[y * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(|r| r.to_vec()).collect()
    }

    /// F1 of class `c`; zero when the class has no true or predicted support.
    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.get(c, c) as f64;
        let predicted: u64 = (0..self.k).map(|r| self.get(r, c)).sum();
        let actual: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        if predicted == 0 || actual == 0 {
            return 0.0;
        }
        let precision = tp / predicted as f64;
        let recall = tp / actual as f64;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.k).map(|c| self.f1(c)).collect()
    }

    pub fn macro_f1(&self) -> f64 {
        self.per_class_f1().iter().sum::<f64>() / self.k as f64
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        hits as f64 / self.total() as f64
    }
}

fn check_inputs(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::contract(format!("class {bad} out of range for K = {k}")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy needs equal nonempty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    Ok(ConfusionMatrix::new(preds, labels, k)?.macro_f1())
}

pub fn per_class_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    Ok(ConfusionMatrix::new(preds, labels, k)?.per_class_f1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap(), 1.0);
        let m = macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = macro_f1(&[2; 40], &labels, 4).unwrap();
        assert!((m - 0.1).abs() < 1e-12);
        assert!(macro_f1(&[], &[], 4).is_err());
    }

    #[test]
    fn absent_class_contributes_zero() {
        // class 2 appears in neither input
        let f = per_class_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(f, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_counts_sum_to_steps() {
        let cm = ConfusionMatrix::new(&[0, 1, 1, 3, 2], &[0, 1, 2, 3, 3], 4).unwrap();
        assert_eq!(cm.total(), 5);
        assert_eq!(cm.get(2, 1), 1);
        assert!((cm.accuracy() - 0.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn macro_f1_invariant_under_relabeling(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let yp: Vec<usize> = y.iter().map(|&c| perm[c]).collect();
            let a = macro_f1(&p, &y, 4).unwrap();
            let b = macro_f1(&pp, &yp, 4).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
