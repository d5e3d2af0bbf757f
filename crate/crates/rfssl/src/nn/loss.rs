//! Classification loss and probability helpers.

use crate::error::{Error, Result};
use crate::nn::autodiff::{CustomOp, NodeId, Tape};
use crate::nn::tensor::Tensor;

/// Row-wise softmax of `[n, k]` logits, numerically stabilized.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [n, k] = *logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax expects [n, k], got {:?}",
            logits.shape()
        )));
    };
    let mut out = vec![0.0f64; n * k];
    for (row_out, row) in out.chunks_exact_mut(k).zip(logits.data().chunks_exact(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in row_out.iter_mut().zip(row) {
            *o = (x - m).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Mean softmax cross-entropy of `[n, k]` logits against integer labels.
/// Returns the scalar loss and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::Shape(format!(
            "cross entropy expects [n, k] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    // Loss through log-sum-exp, not -ln(softmax): the former stays finite
    // for arbitrarily confident wrong predictions.
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; n * k];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sumexp: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + sumexp.ln();
        loss += lse - row[label];
        for (j, &x) in row.iter().enumerate() {
            grad[i * k + j] = (x - lse).exp();
        }
        grad[i * k + label] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    for g in &mut grad {
        *g *= inv_n;
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Tape node computing mean cross-entropy over a logits node.
#[derive(Debug)]
struct CrossEntropyOp {
    labels: Vec<usize>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (loss, _) = cross_entropy_with_grad(inputs[0], &self.labels)?;
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let s = grad_out.scalar_value()?;
        let (_, mut grad) = cross_entropy_with_grad(inputs[0], &self.labels)?;
        for g in grad.data_mut() {
            *g *= s;
        }
        Ok(vec![Some(grad)])
    }
}

pub fn cross_entropy_node(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    tape.custom(
        Box::new(CrossEntropyOp {
            labels: labels.to_vec(),
        }),
        &[logits],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_log_k() {
        let logits = Tensor::zeros(vec![3, 2]);
        let (loss, grad) = cross_entropy_with_grad(&logits, &[0, 1, 0]).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        // Gradient rows are (p - onehot)/n = (0.5-1, 0.5)/3 etc.
        assert!((grad.data()[0] - (-0.5 / 3.0)).abs() < 1e-12);
        assert!((grad.data()[1] - (0.5 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn known_two_class_value() {
        // softmax([ln 3, 0]) = (3/4, 1/4); -ln(3/4) = ln(4/3).
        let logits = Tensor::new(vec![1, 2], vec![3.0f64.ln(), 0.0]).unwrap();
        let (loss, _) = cross_entropy_with_grad(&logits, &[0]).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::new(
            vec![2, 3],
            vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4],
        )
        .unwrap();
        let labels = [2usize, 0];
        let (_, grad) = cross_entropy_with_grad(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut lp = logits.clone();
            lp.data_mut()[i] += h;
            let mut lm = logits.clone();
            lm.data_mut()[i] -= h;
            let fp = cross_entropy_with_grad(&lp, &labels).unwrap().0;
            let fm = cross_entropy_with_grad(&lm, &labels).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-8, "index {i}");
        }
    }

    #[test]
    fn tape_node_backpropagates() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.5]).unwrap(),
            true,
        );
        let loss = cross_entropy_node(&mut tape, logits, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        let (_, want) = cross_entropy_with_grad(
            &Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.5]).unwrap(),
            &[0, 1],
        )
        .unwrap();
        let got = tape.grad(logits).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = Tensor::zeros(vec![2, 2]);
        assert!(cross_entropy_with_grad(&logits, &[0]).is_err());
        assert!(cross_entropy_with_grad(&logits, &[0, 2]).is_err());
        assert!(softmax_rows(&Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
        let (loss, grad) = cross_entropy_with_grad(&logits, &[1]).unwrap();
        // Confidently wrong by 2000 nats: the log-sum-exp route returns
        // exactly that, where -ln(softmax) would overflow to infinity.
        assert!((loss - 2000.0).abs() < 1e-9);
        assert!(grad.all_finite());
    }
}
