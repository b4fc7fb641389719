//! Confusion matrices and macro-averaged F1.

use std::fmt;

use crate::error::{DpmnError, Result};

/// `counts[gold][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(predictions: &[usize], gold: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != gold.len() {
            return Err(DpmnError::contract(format!(
                "{} predictions for {} gold labels",
                predictions.len(),
                gold.len()
            )));
        }
        let mut m = ConfusionMatrix::new(classes);
        for (&p, &g) in predictions.iter().zip(gold) {
            m.add(p, g)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, predicted: usize, gold: usize) -> Result<()> {
        for (what, id) in [("predicted class", predicted), ("gold class", gold)] {
            if id >= self.classes {
                return Err(DpmnError::Index {
                    what,
                    id,
                    size: self.classes,
                });
            }
        }
        self.counts[gold * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gold: usize, predicted: usize) -> usize {
        self.counts[gold * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Zero when nothing was predicted as `class`.
    pub fn precision(&self, class: usize) -> f64 {
        let predicted: usize = (0..self.classes).map(|g| self.count(g, class)).sum();
        ratio(self.count(class, class), predicted)
    }

    /// Zero when `class` never occurs in the gold labels.
    pub fn recall(&self, class: usize) -> f64 {
        let actual: usize = (0..self.classes).map(|p| self.count(class, p)).sum();
        ratio(self.count(class, class), actual)
    }

    pub fn f1(&self, class: usize) -> f64 {
        let (p, r) = (self.precision(class), self.recall(class));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Unweighted mean of the per-class F1 scores; an empty matrix scores 0.
    pub fn macro_f1(&self) -> f64 {
        if self.classes == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.f1(c)).sum::<f64>() / self.classes as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl fmt::Display for ConfusionMatrix {
    /// Rows are gold classes, columns predictions.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.count(g, p).to_string()).collect();
            writeln!(f, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

pub fn macro_f1(predictions: &[usize], gold: &[usize], classes: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(DpmnError::contract("macro F1 of an empty sample"));
    }
    Ok(ConfusionMatrix::from_predictions(predictions, gold, classes)?.macro_f1())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn half_right_two_classes() {
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 0.5);
    }

    #[test]
    fn one_class_predictor_on_balanced_data() {
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn class_absent_everywhere_counts_as_zero() {
        let f = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(macro_f1(&[], &[], 2), Err(DpmnError::Contract(_))));
        assert!(matches!(macro_f1(&[0], &[0, 1], 2), Err(DpmnError::Contract(_))));
        assert!(matches!(macro_f1(&[2], &[0], 2), Err(DpmnError::Index { id: 2, .. })));
    }

    #[test]
    fn matrix_layout() {
        let m = ConfusionMatrix::from_predictions(&[1, 1, 0], &[0, 1, 1], 2).unwrap();
        assert_eq!((m.count(0, 1), m.count(1, 1), m.count(1, 0)), (1, 1, 1));
        assert_eq!(m.total(), 3);
        assert_eq!(m.to_string(), "0\t1\n1\t1\n");
    }
}
