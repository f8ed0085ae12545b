use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

/// Isotropic Gaussian class blobs inside the unit cube, used for smoke runs
/// and tests where MNIST is not needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub spread: f64,
    pub seed: u64,
}

pub fn gaussian_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    if spec.classes == 0 || spec.dim == 0 {
        return Err(Error::InvalidConfig(
            "blob dataset needs at least one class and one dimension".into(),
        ));
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return Err(Error::InvalidConfig(format!("bad blob spread {}", spec.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.spread).expect("spread checked above");
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        labels.push(c);
        for &mu in &centers[c] {
            let v: f64 = mu + noise.sample(&mut rng);
            features.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    LabeledDataset::from_clean(
        spec.dim,
        spec.classes,
        Split::Train,
        (0..spec.samples as u64).collect(),
        features,
        labels,
    )
}
