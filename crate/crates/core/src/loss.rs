//! Masked per-task cross-entropy and the weighted multi-task total.

use crate::autograd::{Tape, Tensor, Var};
use crate::data::Task;
use crate::error::{DpmnError, Result};

/// Tolerance on the coefficient sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Coefficients of the main task (A) and the two auxiliary tasks (B, C).
/// They are non-negative and sum to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    main: f64,
    auxi1: f64,
    auxi2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            main: 0.4,
            auxi1: 0.3,
            auxi2: 0.3,
        }
    }
}

impl LossWeights {
    pub fn new(main: f64, auxi1: f64, auxi2: f64) -> Result<Self> {
        let all = [main, auxi1, auxi2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DpmnError::config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(DpmnError::config(format!(
                "loss weights must sum to 1, got {main} + {auxi1} + {auxi2} = {sum}"
            )));
        }
        Ok(LossWeights { main, auxi1, auxi2 })
    }

    /// Task A only; the auxiliary heads receive no training signal.
    pub fn single_task() -> Self {
        LossWeights {
            main: 1.0,
            auxi1: 0.0,
            auxi2: 0.0,
        }
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::A => self.main,
            Task::B => self.auxi1,
            Task::C => self.auxi2,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.main, self.auxi1, self.auxi2]
    }

    /// The total as plain arithmetic, in the same order as [`total_loss`].
    pub fn combine(&self, losses: [f64; 3]) -> f64 {
        self.main * losses[0] + self.auxi1 * losses[1] + self.auxi2 * losses[2]
    }
}

/// Mean cross-entropy over the examples that carry a label for `task`.
///
/// `logits` is `[batch × C]`. Unlabelled rows get zero weight, and a batch
/// with no labels yields a loss of exactly zero whose gradient is zero
/// everywhere.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[Option<usize>], task: Task) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let classes = task.num_classes();
    if shape != [labels.len(), classes] {
        return Err(DpmnError::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len(), classes],
        });
    }
    if let Some(bad) = labels.iter().flatten().find(|&&k| k >= classes) {
        return Err(DpmnError::contract(format!(
            "task {task} label {bad} is not below {classes}"
        )));
    }
    let present = labels.iter().flatten().count();
    let mut weights = Tensor::zeros(&shape);
    if present > 0 {
        let w = -1.0 / present as f64;
        for (row, label) in labels.iter().enumerate() {
            if let Some(k) = label {
                weights.data_mut()[row * classes + k] = w;
            }
        }
    }
    let log_probs = tape.log_softmax(logits, 1)?;
    let weights = tape.constant(weights)?;
    let picked = tape.mul(log_probs, weights)?;
    tape.sum(picked)
}

/// `c_main·loss_a + c_auxi1·loss_b + c_auxi2·loss_c`.
pub fn total_loss(tape: &mut Tape, losses: [Var; 3], weights: &LossWeights) -> Result<Var> {
    let [a, b, c] = losses;
    let a = tape.scale(a, weights.main)?;
    let b = tape.scale(b, weights.auxi1)?;
    let c = tape.scale(c, weights.auxi2)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Tensor, labels: &[Option<usize>], task: Task) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(logits).unwrap();
        let loss = cross_entropy(&mut tape, x, labels, task).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss)[0], tape.grad(x).unwrap().to_vec())
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, _) = ce(Tensor::zeros(&[3, 2]), &[Some(0), Some(1), Some(1)], Task::A);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_is_near_zero() {
        let logits = Tensor::new(vec![1, 3], vec![30.0, 0.0, 0.0]).unwrap();
        let (loss, _) = ce(logits, &[Some(0)], Task::C);
        assert!(loss < 1e-10);
    }

    #[test]
    fn mean_over_present_rows_only() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, -1.0, 0.3, 0.2, 5.0, -5.0]).unwrap();
        let (masked, _) = ce(logits.clone(), &[Some(1), None, Some(0)], Task::B);
        let (first, _) = ce(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap(), &[Some(1)], Task::B);
        let (last, _) = ce(Tensor::new(vec![1, 2], vec![5.0, -5.0]).unwrap(), &[Some(0)], Task::B);
        assert!((masked - (first + last) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn all_absent_is_exact_zero_with_zero_grad() {
        let logits = Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 9.0]).unwrap();
        let (loss, grad) = ce(logits, &[None, None], Task::B);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(
            cross_entropy(&mut tape, x, &[Some(2)], Task::A),
            Err(DpmnError::Contract(_))
        ));
        let y = tape.leaf(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(
            cross_entropy(&mut tape, y, &[Some(0)], Task::C),
            Err(DpmnError::Shape { .. })
        ));
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::new(0.4, 0.3, 0.3).is_ok());
        assert!(LossWeights::new(0.5, 0.3, 0.3).is_err());
        assert!(LossWeights::new(1.2, -0.1, -0.1).is_err());
        assert!(LossWeights::new(1.0 - 1e-10, 0.0, 0.0).is_ok());
        assert!(LossWeights::new(1.0 - 1e-8, 0.0, 0.0).is_err());
        assert_eq!(LossWeights::default(), LossWeights::new(0.4, 0.3, 0.3).unwrap());
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = Tape::new();
        let losses = [1.0, 2.0, 3.0].map(|v| tape.leaf(Tensor::scalar(v)).unwrap());
        let w = LossWeights::default();
        let t = total_loss(&mut tape, losses, &w).unwrap();
        assert!((tape.value(t)[0] - 1.9).abs() < 1e-12);
        assert_eq!(tape.value(t)[0], w.combine([1.0, 2.0, 3.0]));

        let t = total_loss(&mut tape, losses, &LossWeights::single_task()).unwrap();
        assert_eq!(tape.value(t)[0], 1.0);
    }
}
