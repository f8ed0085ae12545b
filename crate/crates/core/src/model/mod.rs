//! Single-hidden-layer ReLU MLPs: initialization, logits, exact input
//! gradients of logit differences, training and evaluation.

mod checkpoint;
pub mod kernel;
mod train;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, check_pair, Classifier, PairQuery};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{learning_rate, train, write_curves_csv, EpochStats, TrainConfig, TrainReport};

/// Weight initialization. The only scheme draws every weight and bias of a
/// layer from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    FanInUniform,
}

/// `logits = W2 relu(W1 x + b1) + b2`. Weight matrices are row-major with
/// one row per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    input_dim: usize,
    hidden_width: usize,
    num_classes: usize,
    seed: u64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpModel {
    /// Fan-in scaled uniform initialization, deterministic per seed.
    pub fn init(input_dim: usize, hidden_width: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_width == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "model dimensions must be >= 1, got ({input_dim}, {hidden_width}, {num_classes})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| f64::from(rng.random_range(-bound as f32..bound as f32)))
                .collect()
        };
        let w1 = uniform(hidden_width * input_dim, input_dim);
        let b1 = uniform(hidden_width, input_dim);
        let w2 = uniform(num_classes * hidden_width, hidden_width);
        let b2 = uniform(num_classes, hidden_width);
        Ok(MlpModel {
            input_dim,
            hidden_width,
            num_classes,
            seed,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Builds a model from explicit parameters (row-major `W1`, `W2`).
    pub fn from_parts(
        input_dim: usize,
        hidden_width: usize,
        num_classes: usize,
        seed: u64,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let expect = [
            (w1.len(), hidden_width * input_dim),
            (b1.len(), hidden_width),
            (w2.len(), num_classes * hidden_width),
            (b2.len(), num_classes),
        ];
        for (found, expected) in expect {
            if found != expected {
                return Err(Error::DimensionMismatch { expected, found });
            }
        }
        if input_dim == 0 || hidden_width == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        Ok(MlpModel {
            input_dim,
            hidden_width,
            num_classes,
            seed,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    fn w2_row(&self, c: usize) -> &[f64] {
        &self.w2[c * self.hidden_width..(c + 1) * self.hidden_width]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits(x))
    }

    /// Gradient of `f(x)[i] - f(x)[j]` with respect to `x`, by
    /// backpropagation. The ReLU derivative at 0 is taken as 0.
    pub fn input_gradient(&self, x: &[f64], i: usize, j: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        check_pair(self.num_classes, i, j)?;
        let mut logits = vec![0.0; self.num_classes];
        let mut grad = vec![0.0; self.input_dim];
        self.logits_and_pair_gradient(x, i, j, &mut logits, &mut grad);
        Ok(grad)
    }

    fn w1_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden_width, self.input_dim), &self.w1)
            .expect("shape checked at construction")
    }

    /// Hidden pre-activations `x W1^T + b1`, one row per row of `x`.
    fn hidden_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut pre = Array2::<f64>::zeros((x.nrows(), self.hidden_width));
        general_mat_mul(1.0, x, &self.w1_view().t(), 0.0, &mut pre);
        for mut row in pre.axis_iter_mut(Axis(0)) {
            for (z, b) in row.iter_mut().zip(&self.b1) {
                *z += b;
            }
        }
        pre
    }

    fn logits_from_hidden(&self, pre: &[f64], act: &mut [f64], logits: &mut [f64]) {
        for (a, &z) in act.iter_mut().zip(pre) {
            *a = if z > 0.0 { z } else { 0.0 };
        }
        for (c, out) in logits.iter_mut().enumerate() {
            *out = self.b2[c] + kernel::dot(self.w2_row(c), act);
        }
    }

    /// Class predictions for a whole dataset, evaluated in blocks; each
    /// prediction equals [`Classifier::predict`] on the same row.
    pub fn predict_dataset(&self, ds: &LabeledDataset) -> Result<Vec<usize>> {
        if ds.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: ds.dim(),
            });
        }
        const BLOCK: usize = 1024;
        let mut out = Vec::with_capacity(ds.len());
        let mut act = vec![0.0; self.hidden_width];
        let mut logits = vec![0.0; self.num_classes];
        for block in ds.features().chunks(BLOCK * self.input_dim) {
            let rows = block.len() / self.input_dim;
            let x = Array2::from_shape_fn((rows, self.input_dim), |(r, c)| {
                f64::from(block[r * self.input_dim + c])
            });
            let pre = self.hidden_batch(&x);
            for row in pre.axis_iter(Axis(0)) {
                let row = row.as_slice().expect("fresh arrays are contiguous");
                self.logits_from_hidden(row, &mut act, &mut logits);
                out.push(argmax(&logits));
            }
        }
        Ok(out)
    }

    /// Softmax cross-entropy of the model on `ds` against effective labels.
    pub fn mean_loss(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for s in ds.iter() {
            let logits = self.forward(&s.features_f64())?;
            total += cross_entropy(&logits, s.effective_label);
        }
        Ok(total / ds.len() as f64)
    }
}

pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

impl Classifier for MlpModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits_into(&self, x: &[f64], logits: &mut [f64]) {
        let x = ArrayView2::from_shape((1, self.input_dim), x)
            .expect("caller passes input_dim features")
            .to_owned();
        let pre = self.hidden_batch(&x);
        let mut act = vec![0.0; self.hidden_width];
        self.logits_from_hidden(pre.as_slice().expect("fresh arrays are contiguous"), &mut act, logits);
    }

    fn logits_and_pair_gradient(
        &self,
        x: &[f64],
        i: usize,
        j: usize,
        logits: &mut [f64],
        grad: &mut [f64],
    ) {
        let mut q = [PairQuery {
            point: x,
            i,
            j,
            logits,
            grad,
        }];
        self.evaluate_batch(&mut q);
    }

    /// Both layers of the input gradient run as matrix products over the
    /// whole batch. The product kernel sums every output element in an
    /// order fixed by the inner dimension alone, so a query's result does
    /// not depend on which other queries share its batch.
    fn evaluate_batch(&self, queries: &mut [PairQuery<'_>]) {
        if queries.is_empty() {
            return;
        }
        let (d, hw) = (self.input_dim, self.hidden_width);
        let n = queries.len();
        let mut x = Array2::<f64>::zeros((n, d));
        for (mut row, q) in x.axis_iter_mut(Axis(0)).zip(queries.iter()) {
            row.as_slice_mut()
                .expect("fresh arrays are contiguous")
                .copy_from_slice(q.point);
        }
        let mut pre = self.hidden_batch(&x);
        let mut act = vec![0.0; hw];
        let mut coef = Array2::<f64>::zeros((n, hw));
        for (p, q) in queries.iter_mut().enumerate() {
            let mut row = pre.row_mut(p);
            let row = row.as_slice_mut().expect("fresh arrays are contiguous");
            self.logits_from_hidden(row, &mut act, q.logits);
            let (wi, wj) = (self.w2_row(q.i), self.w2_row(q.j));
            for (h, c) in coef.row_mut(p).iter_mut().enumerate() {
                if row[h] > 0.0 {
                    *c = wi[h] - wj[h];
                }
            }
        }
        let mut grad = Array2::<f64>::zeros((n, d));
        general_mat_mul(1.0, &coef, &self.w1_view(), 0.0, &mut grad);
        for (row, q) in grad.axis_iter(Axis(0)).zip(queries.iter_mut()) {
            q.grad.copy_from_slice(row.as_slice().expect("fresh arrays are contiguous"));
        }
    }
}

/// Fraction of samples whose predicted class differs from the effective
/// label (equal to the true label on validation splits).
pub fn evaluate(model: &MlpModel, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = model.predict_dataset(ds)?;
    let wrong = preds
        .iter()
        .zip(ds.effective_labels())
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledDataset, Split};
    use rand::Rng;

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(784, 100, 10, 0).unwrap();
        let b = MlpModel::init(784, 100, 10, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, MlpModel::init(784, 100, 10, 1).unwrap());
        assert!(MlpModel::init(0, 1, 1, 0).is_err());
    }

    #[test]
    fn param_count_matches_shape() {
        let m = MlpModel::init(784, 10_000, 10, 3).unwrap();
        assert_eq!(m.param_count(), 784 * 10_000 + 10_000 + 10_000 * 10 + 10);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let m = MlpModel::init(784, 100, 10, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let features: Vec<f32> = (0..n * 784).map(|_| rng.random_range(0.0..1.0)).collect();
        let ds = LabeledDataset::from_clean(
            784,
            10,
            Split::Train,
            (0..n as u64).collect(),
            features,
            (0..n).map(|i| i % 10).collect(),
        )
        .unwrap();
        for s in ds.iter() {
            assert!(m.forward(&s.features_f64()).unwrap().iter().all(|v| v.is_finite()));
        }
        let loss = m.mean_loss(&ds).unwrap();
        assert!((loss - 10f64.ln()).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = MlpModel::from_parts(3, 2, 4, 0, vec![0.0; 6], vec![0.0; 2], vec![0.0; 8], vec![0.0; 4])
            .unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn hand_computed_logits() {
        // One hidden unit reading the first input; output column (2, -1).
        let m = MlpModel::from_parts(2, 1, 2, 0, vec![1.0, 0.0], vec![0.0], vec![2.0, -1.0], vec![0.0, 0.0])
            .unwrap();
        assert_eq!(m.forward(&[3.0, 7.0]).unwrap(), vec![6.0, -3.0]);
    }

    #[test]
    fn dead_relu_region_returns_output_bias() {
        let m = MlpModel::from_parts(
            2,
            2,
            3,
            0,
            vec![1.0, 1.0, -1.0, 2.0],
            vec![-10.0, -10.0],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![0.5, -0.25, 2.0],
        )
        .unwrap();
        assert_eq!(m.forward(&[1.0, 2.0]).unwrap(), vec![0.5, -0.25, 2.0]);
        assert_eq!(m.input_gradient(&[1.0, 2.0], 0, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_region_gradient_is_row_difference() {
        // Hidden layer emulates identity on a positive region: h = x + 100.
        let w2 = vec![1.0, 2.0, -3.0, 0.5, 4.0, -1.0];
        let m = MlpModel::from_parts(2, 2, 3, 0, vec![1.0, 0.0, 0.0, 1.0], vec![100.0, 100.0], w2, vec![0.0; 3])
            .unwrap();
        assert_eq!(m.input_gradient(&[0.3, -0.7], 0, 1).unwrap(), vec![4.0, 1.5]);
        assert_eq!(m.input_gradient(&[0.3, -0.7], 2, 1).unwrap(), vec![7.0, -1.5]);
        assert!(matches!(m.input_gradient(&[0.0, 0.0], 1, 1), Err(Error::SameClass(1))));
        assert!(matches!(m.forward(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn batched_evaluation_is_bit_identical() {
        let (d, h, c) = (300, 257, 10);
        let m = MlpModel::init(d, h, c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 41;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let pairs: Vec<(usize, usize)> = (0..n).map(|k| (k % c, (k * 7 + 1) % c)).filter(|(i, j)| i != j).collect();
        let run = |split: usize| {
            let mut ls = vec![vec![0.0; c]; pairs.len()];
            let mut gs = vec![vec![0.0; d]; pairs.len()];
            let mut queries: Vec<PairQuery> = xs
                .iter()
                .zip(&pairs)
                .zip(ls.iter_mut().zip(gs.iter_mut()))
                .map(|((x, &(i, j)), (l, g))| PairQuery {
                    point: x,
                    i,
                    j,
                    logits: l,
                    grad: g,
                })
                .collect();
            for chunk in queries.chunks_mut(split) {
                m.evaluate_batch(chunk);
            }
            drop(queries);
            (ls, gs)
        };
        let single = run(1);
        for split in [3, 13, pairs.len()] {
            assert_eq!(run(split), single, "batch size {split}");
        }
        for (x, l) in xs.iter().zip(&single.0) {
            assert_eq!(&m.logits(x), l);
        }
    }

    #[test]
    fn gemm_predictions_agree_with_kernel() {
        let m = MlpModel::init(6, 9, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 50;
        let features: Vec<f32> = (0..n * 6).map(|_| rng.random_range(0.0..1.0)).collect();
        let ds = LabeledDataset::from_clean(6, 3, Split::Train, (0..n as u64).collect(), features, vec![0; n])
            .unwrap();
        let preds = m.predict_dataset(&ds).unwrap();
        for (s, p) in ds.iter().zip(preds) {
            assert_eq!(m.predict(&s.features_f64()), p);
        }
        assert!(matches!(
            evaluate(&m, &ds.subset(&[], Split::Train)),
            Err(Error::EmptyDataset)
        ));
    }
}
