use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Corruption, CorruptionKind, CorruptionSpec, LabeledDataset, Split};
use crate::error::{Error, Result};

/// Number of samples to corrupt: `fraction * n` rounded half-up.
pub fn corruption_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 0.5).floor() as usize
}

fn check(ds: &LabeledDataset, fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidFraction(fraction));
    }
    if ds.split() != Split::Train {
        return Err(Error::NotTrainSplit);
    }
    if ds.corrupted_count() > 0 {
        return Err(Error::Inconsistent("dataset is already corrupted".into()));
    }
    Ok(())
}

/// Positions to corrupt, chosen uniformly without replacement, ascending.
fn choose(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = corruption_count(fraction, n).min(n);
    let mut chosen = index::sample(rng, n, k).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Applies `spec` to a clean training split.
pub fn corrupt(ds: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    match spec.kind {
        CorruptionKind::None => Ok(ds.clone()),
        CorruptionKind::Label => corrupt_labels(ds, spec.fraction, spec.seed),
        CorruptionKind::GaussianInput => corrupt_inputs_gaussian(ds, spec.fraction, spec.seed),
    }
}

/// Replaces the effective label of `round(fraction * n)` randomly chosen
/// samples with a label drawn uniformly from the other classes.
pub fn corrupt_labels(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    check(ds, fraction)?;
    let classes = ds.num_classes();
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose(ds.len(), fraction, &mut rng);
    let mut out = ds.clone();
    let true_labels = ds.true_labels().to_vec();
    let (_, effective, flags, frac) = out.parts_mut();
    for &p in &chosen {
        let c = true_labels[p];
        let mut alt = rng.random_range(0..classes - 1);
        if alt >= c {
            alt += 1;
        }
        effective[p] = alt;
        flags[p] = Corruption::LabelCorrupted;
    }
    *frac = fraction;
    Ok(out)
}

/// Replaces every feature of `round(fraction * n)` randomly chosen samples
/// with draws from N(mu_x, sigma_x), the sample's own feature mean and
/// (population) standard deviation. Values are not clipped.
pub fn corrupt_inputs_gaussian(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    check(ds, fraction)?;
    let dim = ds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose(ds.len(), fraction, &mut rng);
    let mut out = ds.clone();
    let ids = ds.ids().to_vec();
    let (features, _, flags, frac) = out.parts_mut();
    for &p in &chosen {
        let row = &mut features[p * dim..(p + 1) * dim];
        let (mean, std) = mean_std(row);
        flags[p] = Corruption::InputCorrupted;
        if std == 0.0 || dim == 0 {
            log::warn!(
                "sample {} has constant features ({mean}); input corruption leaves it at its mean",
                ids[p]
            );
            row.fill(mean as f32);
            continue;
        }
        let normal = Normal::new(mean, std).expect("std is positive and finite");
        for v in row.iter_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    *frac = fraction;
    Ok(out)
}

pub(crate) fn mean_std(row: &[f32]) -> (f64, f64) {
    if row.is_empty() {
        return (0.0, 0.0);
    }
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(n: usize, classes: usize, dim: usize) -> LabeledDataset {
        let features = (0..n * dim)
            .map(|k| ((k * 37 + 11) % 256) as f32 / 255.0)
            .collect();
        LabeledDataset::from_clean(
            dim,
            classes,
            Split::Train,
            (0..n as u64).collect(),
            features,
            (0..n).map(|i| i % classes).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(corruption_count(0.2, 55_000), 11_000);
        assert_eq!(corruption_count(0.25, 10), 3);
        assert_eq!(corruption_count(0.0, 10), 0);
        assert_eq!(corruption_count(1.0, 10), 10);
    }

    #[test]
    fn full_label_corruption_changes_every_label() {
        let ds = fixture(10, 3, 4);
        let out = corrupt_labels(&ds, 1.0, 5).unwrap();
        assert_eq!(out.corrupted_count(), 10);
        for s in out.iter() {
            assert_ne!(s.true_label, s.effective_label);
            assert!(s.effective_label < 3);
            assert_eq!(s.corruption, Corruption::LabelCorrupted);
        }
        assert_eq!(out.features(), ds.features());
    }

    #[test]
    fn zero_fraction_is_identity() {
        let ds = fixture(10, 3, 4);
        assert_eq!(corrupt_labels(&ds, 0.0, 5).unwrap(), ds);
        assert_eq!(corrupt_inputs_gaussian(&ds, 0.0, 5).unwrap(), ds);
        assert_eq!(corrupt(&ds, &CorruptionSpec::none()).unwrap(), ds);
    }

    #[test]
    fn errors() {
        let ds = fixture(10, 3, 4);
        assert!(matches!(
            corrupt_labels(&ds, 1.2, 0),
            Err(Error::InvalidFraction(_))
        ));
        let one_class = fixture(4, 1, 2);
        assert!(matches!(
            corrupt_labels(&one_class, 0.5, 0),
            Err(Error::TooFewClasses(1))
        ));
        let val = ds.subset(&[0, 1, 2], Split::Validation);
        assert!(matches!(corrupt_labels(&val, 0.5, 0), Err(Error::NotTrainSplit)));
    }

    #[test]
    fn constant_sample_stays_at_its_mean() {
        let ds = LabeledDataset::from_clean(
            3,
            2,
            Split::Train,
            vec![0],
            vec![0.5; 3],
            vec![1],
        )
        .unwrap();
        let out = corrupt_inputs_gaussian(&ds, 1.0, 9).unwrap();
        assert_eq!(out.row(0), &[0.5, 0.5, 0.5]);
        assert_eq!(out.corruption_flags()[0], Corruption::InputCorrupted);
        assert_eq!(out.effective_labels(), &[1]);
    }

    #[test]
    fn gaussian_draws_match_sample_statistics() {
        // Features spread evenly so that mean = 0.3 and population std = 0.1.
        let d = 10_000;
        let row: Vec<f32> = (0..d)
            .map(|k| if k % 2 == 0 { 0.2 } else { 0.4 })
            .collect();
        let (m, s) = mean_std(&row);
        assert!((m - 0.3).abs() < 1e-6 && (s - 0.1).abs() < 1e-6);
        for seed in 0..100 {
            let ds = LabeledDataset::from_clean(d, 2, Split::Train, vec![0], row.clone(), vec![0])
                .unwrap();
            let out = corrupt_inputs_gaussian(&ds, 1.0, seed).unwrap();
            let (mean, std) = mean_std(out.row(0));
            assert!((mean - 0.3).abs() < 0.005, "seed {seed}: mean {mean}");
            assert!((std - 0.1).abs() < 0.005, "seed {seed}: std {std}");
        }
    }

    #[test]
    fn gaussian_fraction_flags_exact_count() {
        let ds = fixture(55, 5, 6);
        let out = corrupt_inputs_gaussian(&ds, 0.2, 3).unwrap();
        assert_eq!(out.corrupted_count(), 11);
        assert_eq!(out.effective_labels(), ds.effective_labels());
    }

    proptest! {
        #[test]
        fn corruption_is_deterministic_and_preserves_the_other_half(
            seed in any::<u64>(),
            fraction in 0.0f64..=1.0,
            n in 1usize..40,
        ) {
            let ds = fixture(n, 4, 3);
            let a = corrupt_labels(&ds, fraction, seed).unwrap();
            let b = corrupt_labels(&ds, fraction, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.features(), ds.features());
            prop_assert_eq!(a.corrupted_count(), corruption_count(fraction, n));

            let g = corrupt_inputs_gaussian(&ds, fraction, seed).unwrap();
            let h = corrupt_inputs_gaussian(&ds, fraction, seed).unwrap();
            prop_assert_eq!(&g, &h);
            prop_assert_eq!(g.effective_labels(), ds.effective_labels());
            prop_assert_eq!(g.true_labels(), ds.true_labels());
            prop_assert_eq!(g.corrupted_count(), corruption_count(fraction, n));
            for i in 0..n {
                if g.corruption_flags()[i] == Corruption::Clean {
                    prop_assert_eq!(g.row(i), ds.row(i));
                }
            }
        }
    }
}
