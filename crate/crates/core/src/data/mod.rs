//! Labeled datasets, seeded corruption protocols and train/validation splits.
//!
//! Features are stored row-major as `f32` in one contiguous buffer. Every
//! sample keeps its stable id (the row index in the source file), its true
//! label, the label the model is trained against, and a corruption flag.

mod corrupt;
mod idx;
mod store;
mod synthetic;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corrupt::{corrupt, corrupt_inputs_gaussian, corrupt_labels, corruption_count};
pub use idx::{load_idx_dataset, parse_idx_images, parse_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use store::{read_dataset, write_dataset, DATASET_FORMAT_VERSION, DATASET_MAGIC};
pub use synthetic::{gaussian_blobs, BlobSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Clean,
    LabelCorrupted,
    InputCorrupted,
}

impl Corruption {
    pub fn is_corrupt(self) -> bool {
        self != Corruption::Clean
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Clean => "clean",
            Corruption::LabelCorrupted => "label_corrupted",
            Corruption::InputCorrupted => "input_corrupted",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Corruption::Clean => 0,
            Corruption::LabelCorrupted => 1,
            Corruption::InputCorrupted => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Corruption::Clean),
            1 => Some(Corruption::LabelCorrupted),
            2 => Some(Corruption::InputCorrupted),
            _ => None,
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    None,
    Label,
    GaussianInput,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::Label => "label",
            CorruptionKind::GaussianInput => "gaussian_input",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::None,
            fraction: 0.0,
            seed: 0,
        }
    }

    /// `fraction = 0` exactly when `kind = none`.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) || self.fraction.is_nan() {
            return Err(Error::InvalidFraction(self.fraction));
        }
        match (self.kind, self.fraction == 0.0) {
            (CorruptionKind::None, false) => Err(Error::InvalidCorruptionSpec(
                "kind none requires fraction 0".into(),
            )),
            (CorruptionKind::Label | CorruptionKind::GaussianInput, true) => Err(
                Error::InvalidCorruptionSpec("a corruption kind requires fraction > 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Owned view of one sample, used for construction and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f32>,
    pub true_label: usize,
    pub effective_label: usize,
    pub corruption: Corruption,
}

/// Borrowed view of one sample inside a [`LabeledDataset`].
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub id: u64,
    pub features: &'a [f32],
    pub true_label: usize,
    pub effective_label: usize,
    pub corruption: Corruption,
}

impl SampleRef<'_> {
    pub fn to_owned(&self) -> Sample {
        Sample {
            id: self.id,
            features: self.features.to_vec(),
            true_label: self.true_label,
            effective_label: self.effective_label,
            corruption: self.corruption,
        }
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    num_classes: usize,
    split: Split,
    corruption_fraction: f64,
    ids: Vec<u64>,
    features: Vec<f32>,
    true_labels: Vec<usize>,
    effective_labels: Vec<usize>,
    corruption: Vec<Corruption>,
}

impl LabeledDataset {
    /// Builds a clean dataset from a flat row-major feature buffer.
    pub fn from_clean(
        dim: usize,
        num_classes: usize,
        split: Split,
        ids: Vec<u64>,
        features: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if features.len() != n * dim {
            return Err(Error::DimensionMismatch {
                expected: n * dim,
                found: features.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(LabeledDataset {
            dim,
            num_classes,
            split,
            corruption_fraction: 0.0,
            ids,
            features,
            effective_labels: labels.clone(),
            true_labels: labels,
            corruption: vec![Corruption::Clean; n],
        })
    }

    /// Builds a dataset from owned samples, checking every sample invariant.
    pub fn from_samples(
        samples: Vec<Sample>,
        num_classes: usize,
        split: Split,
        corruption_fraction: f64,
    ) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let n = samples.len();
        let mut ds = LabeledDataset {
            dim,
            num_classes,
            split,
            corruption_fraction,
            ids: Vec::with_capacity(n),
            features: Vec::with_capacity(n * dim),
            true_labels: Vec::with_capacity(n),
            effective_labels: Vec::with_capacity(n),
            corruption: Vec::with_capacity(n),
        };
        for s in samples {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.features.len(),
                });
            }
            ds.ids.push(s.id);
            ds.features.extend_from_slice(&s.features);
            ds.true_labels.push(s.true_label);
            ds.effective_labels.push(s.effective_label);
            ds.corruption.push(s.corruption);
        }
        ds.check_invariants()?;
        Ok(ds)
    }

    pub(crate) fn check_invariants(&self) -> Result<()> {
        for i in 0..self.len() {
            let (t, e) = (self.true_labels[i], self.effective_labels[i]);
            for label in [t, e] {
                if label >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        index: i,
                        label,
                        num_classes: self.num_classes,
                    });
                }
            }
            let ok = match self.corruption[i] {
                Corruption::Clean | Corruption::InputCorrupted => t == e,
                Corruption::LabelCorrupted => t != e,
            };
            if !ok {
                return Err(Error::Inconsistent(format!(
                    "sample {} flagged {} has true label {t} and effective label {e}",
                    self.ids[i], self.corruption[i]
                )));
            }
        }
        if self.split == Split::Validation && self.corrupted_count() > 0 {
            return Err(Error::Inconsistent(
                "validation split contains corrupted samples".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn corruption_fraction(&self) -> f64 {
        self.corruption_fraction
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn effective_labels(&self) -> &[usize] {
        &self.effective_labels
    }

    pub fn corruption_flags(&self) -> &[Corruption] {
        &self.corruption
    }

    pub fn sample(&self, index: usize) -> SampleRef<'_> {
        SampleRef {
            id: self.ids[index],
            features: self.row(index),
            true_label: self.true_labels[index],
            effective_label: self.effective_labels[index],
            corruption: self.corruption[index],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    pub fn corrupted_count(&self) -> usize {
        self.corruption.iter().filter(|c| c.is_corrupt()).count()
    }

    /// Map from stable sample id to row index.
    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Rows at the given positions, in the given order.
    pub fn subset(&self, positions: &[usize], split: Split) -> LabeledDataset {
        let mut features = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            features.extend_from_slice(self.row(p));
        }
        LabeledDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            split,
            corruption_fraction: if split == Split::Validation {
                0.0
            } else {
                self.corruption_fraction
            },
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            features,
            true_labels: positions.iter().map(|&p| self.true_labels[p]).collect(),
            effective_labels: positions.iter().map(|&p| self.effective_labels[p]).collect(),
            corruption: positions.iter().map(|&p| self.corruption[p]).collect(),
        }
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&mut Vec<f32>, &mut Vec<usize>, &mut Vec<Corruption>, &mut f64) {
        (
            &mut self.features,
            &mut self.effective_labels,
            &mut self.corruption,
            &mut self.corruption_fraction,
        )
    }
}

/// Seeded shuffle, then the first `len - validation_size` rows become the
/// training split and the remaining rows the validation split.
pub fn split_train_validation(
    ds: &LabeledDataset,
    validation_size: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if validation_size > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "validation size {validation_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    if ds.corrupted_count() > 0 {
        return Err(Error::Inconsistent(
            "split before corrupting: the source dataset already has corrupted samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ds.len() - validation_size;
    let train = ds.subset(&order[..n_train], Split::Train);
    let val = ds.subset(&order[n_train..], Split::Validation);
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::from_clean(
            2,
            3,
            Split::Train,
            (0..6).collect(),
            (0..12).map(|v| v as f32 / 12.0).collect(),
            vec![0, 1, 2, 0, 1, 2],
        )
        .unwrap()
    }

    #[test]
    fn split_partitions_ids() {
        let ds = tiny();
        let (train, val) = split_train_validation(&ds, 2, 7).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(val.len(), 2);
        assert_eq!(val.split(), Split::Validation);
        let mut all: Vec<u64> = train.ids().iter().chain(val.ids()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        let index = ds.id_index();
        for s in train.iter().chain(val.iter()) {
            assert_eq!(s.features, ds.row(index[&s.id]));
        }
        let (again, _) = split_train_validation(&ds, 2, 7).unwrap();
        assert_eq!(again, train);
    }

    #[test]
    fn from_samples_rejects_inconsistent_flags() {
        let bad = Sample {
            id: 0,
            features: vec![0.0],
            true_label: 1,
            effective_label: 1,
            corruption: Corruption::LabelCorrupted,
        };
        assert!(LabeledDataset::from_samples(vec![bad], 2, Split::Train, 1.0).is_err());
    }

    #[test]
    fn corruption_spec_validation() {
        assert!(CorruptionSpec::none().validate().is_ok());
        let s = CorruptionSpec {
            kind: CorruptionKind::Label,
            fraction: 0.0,
            seed: 1,
        };
        assert!(s.validate().is_err());
        let s = CorruptionSpec {
            kind: CorruptionKind::Label,
            fraction: 1.5,
            seed: 1,
        };
        assert!(matches!(s.validate(), Err(Error::InvalidFraction(_))));
    }
}
