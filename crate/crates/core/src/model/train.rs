use std::io::Write;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, MlpModel};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub max_epochs: usize,
    pub target_train_error: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr0: 0.01,
            lr_decay: 0.99,
            lr_decay_every: 5,
            momentum: 0.9,
            max_epochs: 100,
            target_train_error: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.target_train_error) {
            return bad("target_train_error must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Step schedule `lr0 * lr_decay^floor(epoch / lr_decay_every)`, epochs
/// counted from 0.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Error of the mini-batch predictions made before each update.
    pub train_error: f64,
    pub val_error: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Full-pass train error of the returned model.
    pub final_train_error: f64,
    pub final_val_error: f64,
    pub epochs_run: usize,
    pub interpolated: bool,
}

/// Parameters and momentum buffers in single precision.
struct Params {
    w1: Array2<f32>,
    b1: Array1<f32>,
    w2: Array2<f32>,
    b2: Array1<f32>,
}

impl Params {
    fn from_model(m: &MlpModel) -> Self {
        let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        Params {
            w1: Array2::from_shape_vec((m.hidden_width, m.input_dim), cast(&m.w1)).unwrap(),
            b1: Array1::from(cast(&m.b1)),
            w2: Array2::from_shape_vec((m.num_classes, m.hidden_width), cast(&m.w2)).unwrap(),
            b2: Array1::from(cast(&m.b2)),
        }
    }

    fn zeros_like(&self) -> Self {
        Params {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    fn to_model(&self, template: &MlpModel) -> MlpModel {
        let widen = |a: &[f32]| a.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        MlpModel {
            w1: widen(self.w1.as_slice().unwrap()),
            b1: widen(self.b1.as_slice().unwrap()),
            w2: widen(self.w2.as_slice().unwrap()),
            b2: widen(self.b2.as_slice().unwrap()),
            ..template.clone()
        }
    }
}

fn check_shapes(model: &MlpModel, ds: &LabeledDataset) -> Result<()> {
    if ds.dim() != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            found: ds.dim(),
        });
    }
    if ds.num_classes() != model.num_classes {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes,
            found: ds.num_classes(),
        });
    }
    Ok(())
}

/// Mini-batch SGD with momentum on softmax cross-entropy against the
/// effective labels. Arithmetic runs in single precision; the returned
/// model holds the widened parameters.
///
/// Momentum follows `v <- momentum * v + grad; w <- w - lr * v`. Training
/// stops after `max_epochs` or as soon as a full pass over the training set
/// reaches `target_train_error`.
pub fn train(
    model: &MlpModel,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    check_shapes(model, train_ds)?;
    check_shapes(model, val_ds)?;
    if train_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = model.input_dim;
    let hw = model.hidden_width;
    let nc = model.num_classes;
    let mut p = Params::from_model(model);
    let mut v = p.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let labels = train_ds.effective_labels();
    let mu = cfg.momentum as f32;

    let mut epochs = Vec::new();
    let mut current = model.clone();
    let mut final_train_error = f64::NAN;

    let bmax = cfg.batch_size.min(train_ds.len());
    let mut x = Array2::<f32>::zeros((bmax, d));
    let mut z = Array2::<f32>::zeros((bmax, hw));
    let mut logits = Array2::<f32>::zeros((bmax, nc));
    let mut dz = Array2::<f32>::zeros((bmax, hw));

    for epoch in 0..cfg.max_epochs {
        let lr = learning_rate(cfg, epoch);
        let lr32 = lr as f32;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut wrong = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut xb = x.slice_mut(ndarray::s![..b, ..]);
            for (r, &idx) in batch.iter().enumerate() {
                xb.row_mut(r)
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(train_ds.row(idx));
            }
            let xb = x.slice(ndarray::s![..b, ..]);
            let mut zb = z.slice_mut(ndarray::s![..b, ..]);
            general_mat_mul(1.0, &xb, &p.w1.t(), 0.0, &mut zb);
            zb.axis_iter_mut(Axis(0)).for_each(|mut row| {
                Zip::from(&mut row).and(&p.b1).for_each(|zv, &bv| *zv = (*zv + bv).max(0.0));
            });
            let ab = z.slice(ndarray::s![..b, ..]);
            let mut lb = logits.slice_mut(ndarray::s![..b, ..]);
            general_mat_mul(1.0, &ab, &p.w2.t(), 0.0, &mut lb);

            // Softmax cross-entropy; lb becomes dLoss/dlogits.
            let scale = 1.0 / b as f32;
            for (r, mut row) in lb.axis_iter_mut(Axis(0)).enumerate() {
                Zip::from(&mut row).and(&p.b2).for_each(|l, &bv| *l += bv);
                let y = labels[batch[r]];
                let row = row.as_slice_mut().unwrap();
                let pred = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &val)| if val > row[best] { k } else { best });
                if pred != y {
                    wrong += 1;
                }
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let shifted_target = row[y] - max;
                let mut sum = 0.0f32;
                for l in row.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                loss_sum += f64::from(sum.ln() - shifted_target);
                for (k, l) in row.iter_mut().enumerate() {
                    let prob = *l / sum;
                    *l = (prob - if k == y { 1.0 } else { 0.0 }) * scale;
                }
            }
            let lb = logits.slice(ndarray::s![..b, ..]);

            // Output layer gradients straight into the momentum buffers.
            general_mat_mul(1.0, &lb.t(), &ab, mu, &mut v.w2);
            let gb2 = lb.sum_axis(Axis(0));
            Zip::from(&mut v.b2).and(&gb2).for_each(|vv, &g| *vv = mu * *vv + g);

            let mut dzb = dz.slice_mut(ndarray::s![..b, ..]);
            general_mat_mul(1.0, &lb, &p.w2, 0.0, &mut dzb);
            Zip::from(&mut dzb).and(&ab).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let dzb = dz.slice(ndarray::s![..b, ..]);
            general_mat_mul(1.0, &dzb.t(), &xb, mu, &mut v.w1);
            let gb1 = dzb.sum_axis(Axis(0));
            Zip::from(&mut v.b1).and(&gb1).for_each(|vv, &g| *vv = mu * *vv + g);

            Zip::from(&mut p.w1).and(&v.w1).for_each(|w, &vv| *w -= lr32 * vv);
            Zip::from(&mut p.b1).and(&v.b1).for_each(|w, &vv| *w -= lr32 * vv);
            Zip::from(&mut p.w2).and(&v.w2).for_each(|w, &vv| *w -= lr32 * vv);
            Zip::from(&mut p.b2).and(&v.b2).for_each(|w, &vv| *w -= lr32 * vv);
        }
        let mean_loss = loss_sum / train_ds.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        current = p.to_model(model);
        let running_error = wrong as f64 / train_ds.len() as f64;
        let val_error = if val_ds.is_empty() {
            f64::NAN
        } else {
            evaluate(&current, val_ds)?
        };
        log::debug!(
            "epoch {epoch}: lr {lr:.5} loss {mean_loss:.4} train {running_error:.4} val {val_error:.4}"
        );
        epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_error: running_error,
            val_error,
            mean_loss,
        });
        if running_error <= cfg.target_train_error || epoch + 1 == cfg.max_epochs {
            final_train_error = evaluate(&current, train_ds)?;
            if final_train_error <= cfg.target_train_error {
                break;
            }
        }
    }
    if final_train_error.is_nan() {
        final_train_error = evaluate(&current, train_ds)?;
    }
    let final_val_error = epochs.last().map_or_else(
        || if val_ds.is_empty() { Ok(f64::NAN) } else { evaluate(&current, val_ds) },
        |e| Ok(e.val_error),
    )?;
    let report = TrainReport {
        epochs_run: epochs.len(),
        epochs,
        final_train_error,
        final_val_error,
        interpolated: final_train_error <= cfg.target_train_error,
    };
    Ok((current, report))
}

/// Writes `epoch,train_error,val_error,mean_loss` rows, preceded by
/// `# key=value` header lines.
pub fn write_curves_csv(path: &Path, report: &TrainReport, header: &[(&str, String)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for (k, v) in header {
        writeln!(f, "# {k}={v}").map_err(io)?;
    }
    writeln!(f, "epoch,train_error,val_error,mean_loss").map_err(io)?;
    for e in &report.epochs {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6}",
            e.epoch, e.train_error, e.val_error, e.mean_loss
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn schedule_is_monotone_step() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 0.01);
        assert_eq!(learning_rate(&cfg, 4), 0.01);
        assert!((learning_rate(&cfg, 5) - 0.0099).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..500 {
            let lr = learning_rate(&cfg, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_decay = 1.5;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = TrainConfig { lr0: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    fn separable() -> LabeledDataset {
        // Two classes split by the sign of x0 - x1.
        let pts: [(f32, f32, usize); 10] = [
            (0.9, 0.1, 0),
            (0.8, 0.3, 0),
            (0.7, 0.2, 0),
            (0.95, 0.5, 0),
            (0.6, 0.1, 0),
            (0.1, 0.9, 1),
            (0.3, 0.8, 1),
            (0.2, 0.7, 1),
            (0.5, 0.95, 1),
            (0.1, 0.6, 1),
        ];
        LabeledDataset::from_clean(
            2,
            2,
            Split::Train,
            (0..10).collect(),
            pts.iter().flat_map(|p| [p.0, p.1]).collect(),
            pts.iter().map(|p| p.2).collect(),
        )
        .unwrap()
    }

    #[test]
    fn separable_fixture_is_fit_within_fifty_epochs() {
        let ds = separable();
        let val = ds.subset(&[0, 5], Split::Validation);
        let model = MlpModel::init(2, 16, 2, 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            lr0: 0.1,
            max_epochs: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let (trained, report) = train(&model, &ds, &val, &cfg).unwrap();
        assert_eq!(report.final_train_error, 0.0);
        assert!(report.interpolated);
        assert!(report.epochs_run <= 50);
        assert_eq!(evaluate(&trained, &ds).unwrap(), 0.0);
        let (again, _) = train(&model, &ds, &val, &cfg).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn first_epoch_reduces_loss() {
        let ds = separable();
        let val = ds.subset(&[0, 5], Split::Validation);
        let model = MlpModel::init(2, 16, 2, 3).unwrap();
        let before = model.mean_loss(&ds).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            lr0: 0.05,
            max_epochs: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &ds, &val, &cfg).unwrap();
        assert!(trained.mean_loss(&ds).unwrap() < before);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = separable();
        let val = ds.subset(&[0], Split::Validation);
        let model = MlpModel::init(2, 8, 2, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            lr0: 1e30,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&model, &ds, &val, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ds = separable();
        let model = MlpModel::init(3, 4, 2, 0).unwrap();
        assert!(matches!(
            train(&model, &ds, &ds, &TrainConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
