//! The differentiable-classifier abstraction the margin solver works against.

use crate::error::{Error, Result};

/// A classifier `f : R^d -> R^|N|` whose logit differences have input
/// gradients.
pub trait Classifier: Sync {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Writes the logits at `x` into `logits`.
    fn logits_into(&self, x: &[f64], logits: &mut [f64]);

    /// Writes the logits at `x` and the gradient of `f(x)[i] - f(x)[j]`.
    fn logits_and_pair_gradient(
        &self,
        x: &[f64],
        i: usize,
        j: usize,
        logits: &mut [f64],
        grad: &mut [f64],
    );

    /// Evaluates several `(point, pair)` queries. Implementations must give
    /// every query exactly the result a single call would, so results never
    /// depend on how queries are grouped.
    fn evaluate_batch(&self, queries: &mut [PairQuery<'_>]) {
        for q in queries.iter_mut() {
            self.logits_and_pair_gradient(q.point, q.i, q.j, q.logits, q.grad);
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes()];
        self.logits_into(x, &mut out);
        out
    }

    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

/// One pending evaluation in a batch.
pub struct PairQuery<'a> {
    pub point: &'a [f64],
    pub i: usize,
    pub j: usize,
    pub logits: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Index of the largest value; ties go to the lowest index. NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() {
            best = k;
        }
    }
    best
}

pub(crate) fn check_pair(num_classes: usize, i: usize, j: usize) -> Result<()> {
    for class in [i, j] {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange { class, num_classes });
        }
    }
    if i == j {
        return Err(Error::SameClass(i));
    }
    Ok(())
}

/// Affine classifier `f(x) = W x + b`, the closed-form reference for the
/// solver: the i-j boundary is a hyperplane.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    /// `weights` is `classes x dim`, row-major.
    pub fn new(dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if dim == 0 || bias.is_empty() || weights.len() != dim * bias.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * bias.len(),
                found: weights.len(),
            });
        }
        Ok(LinearClassifier { dim, weights, bias })
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl Classifier for LinearClassifier {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits_into(&self, x: &[f64], logits: &mut [f64]) {
        for (c, out) in logits.iter_mut().enumerate() {
            *out = self.bias[c] + crate::model::kernel::dot(self.row(c), x);
        }
    }

    fn logits_and_pair_gradient(
        &self,
        x: &[f64],
        i: usize,
        j: usize,
        logits: &mut [f64],
        grad: &mut [f64],
    ) {
        self.logits_into(x, logits);
        for ((g, a), b) in grad.iter_mut().zip(self.row(i)).zip(self.row(j)) {
            *g = a - b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[f64::NAN, 0.0]), 1);
    }

    #[test]
    fn linear_gradient_is_row_difference() {
        let m = LinearClassifier::new(2, vec![1.0, 2.0, -3.0, 0.5], vec![0.0, 1.0]).unwrap();
        let mut logits = [0.0; 2];
        let mut grad = [0.0; 2];
        m.logits_and_pair_gradient(&[1.0, 1.0], 0, 1, &mut logits, &mut grad);
        assert_eq!(logits, [3.0, -1.5]);
        assert_eq!(grad, [4.0, 1.5]);
    }
}
