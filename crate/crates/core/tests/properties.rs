use marginlab::data::{corrupt_labels, read_dataset, write_dataset, Corruption, LabeledDataset, Split};
use marginlab::geometry::{max_margin, nearest_different, Labeling};
use marginlab::model::{read_checkpoint, write_checkpoint, MlpModel};
use marginlab::report::{spearman, BinEdges};
use marginlab::Classifier;
use proptest::prelude::*;

fn dataset(dim: usize, classes: usize, rows: &[(Vec<f32>, usize)]) -> LabeledDataset {
    let features = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    let labels = rows.iter().map(|r| r.1 % classes).collect();
    LabeledDataset::from_clean(dim, classes, Split::Train, (0..rows.len() as u64).map(|i| 1000 + i).collect(), features, labels).unwrap()
}

fn rows(dim: usize) -> impl Strategy<Value = Vec<(Vec<f32>, usize)>> {
    prop::collection::vec((prop::collection::vec(-4.0f32..4.0, dim), 0usize..4), 2..40)
}

fn brute(ds: &LabeledDataset, labels: &[usize], q: usize) -> Option<f64> {
    (0..ds.len())
        .filter(|&p| labels[p] != labels[q])
        .map(|p| {
            ds.row(q)
                .iter()
                .zip(ds.row(p))
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .min_by(f64::total_cmp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn max_margin_is_brute_force_nearest(data in (1usize..6).prop_flat_map(rows)) {
        let dim = data[0].0.len();
        let ds = dataset(dim, 4, &data);
        let labels = ds.true_labels().to_vec();
        let queries: Vec<usize> = (0..ds.len()).filter(|&q| brute(&ds, &labels, q).is_some()).collect();
        let ids: Vec<u64> = queries.iter().map(|&q| ds.ids()[q]).collect();
        let got = max_margin(&ds, &ids, Labeling::TrueLabels).unwrap();
        for (&q, n) in queries.iter().zip(&got) {
            let want = brute(&ds, &labels, q).unwrap();
            prop_assert!((n.distance - want).abs() <= 1e-12, "{} vs {}", n.distance, want);
            prop_assert_ne!(labels[n.index], labels[q]);
        }
    }

    #[test]
    fn neighbor_lists_are_sorted_prefixes(data in rows(3), k in 1usize..6) {
        let ds = dataset(3, 4, &data);
        let queries: Vec<usize> = (0..ds.len()).filter(|&q| brute(&ds, ds.true_labels(), q).is_some()).collect();
        let lists = nearest_different(&ds, &queries, Labeling::TrueLabels, k).unwrap();
        for (&q, list) in queries.iter().zip(&lists) {
            let others = (0..ds.len()).filter(|&p| ds.true_labels()[p] != ds.true_labels()[q]).count();
            prop_assert_eq!(list.len(), k.min(others));
            prop_assert!(list.windows(2).all(|w| w[0].distance <= w[1].distance));
            if let Some(first) = list.first() {
                let want = brute(&ds, ds.true_labels(), q).unwrap();
                prop_assert!((first.distance - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn label_corruption_flips_exactly_the_flagged(data in rows(2), fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = dataset(2, 4, &data);
        let c = corrupt_labels(&ds, fraction, seed).unwrap();
        let flagged = c.corruption_flags().iter().filter(|f| f.is_corrupt()).count();
        prop_assert_eq!(flagged, (fraction * ds.len() as f64).round() as usize);
        prop_assert_eq!(c.true_labels(), ds.true_labels());
        prop_assert_eq!(c.features(), ds.features());
        for k in 0..c.len() {
            let changed = c.effective_labels()[k] != c.true_labels()[k];
            prop_assert_eq!(changed, c.corruption_flags()[k] == Corruption::LabelCorrupted);
        }
        prop_assert_eq!(corrupt_labels(&ds, fraction, seed).unwrap(), c);
    }

    #[test]
    fn dataset_files_round_trip(data in rows(3), fraction in 0.0f64..=1.0) {
        let ds = corrupt_labels(&dataset(3, 4, &data), fraction, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mlds");
        write_dataset(&path, &ds).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    /// Central differences of `f[i] - f[j]` along a random direction, away
    /// from ReLU kinks.
    #[test]
    fn input_gradient_matches_finite_differences(
        dim in 1usize..8,
        width in 1usize..24,
        classes in 2usize..6,
        seed in any::<u64>(),
        x in prop::collection::vec(-2.0f64..2.0, 8),
        u in prop::collection::vec(-1.0f64..1.0, 8),
        pick in any::<(usize, usize)>(),
    ) {
        const H: f64 = 1e-5;
        let model = MlpModel::init(dim, width, classes, seed).unwrap();
        let (x, u) = (&x[..dim], &u[..dim]);
        for h in 0..width {
            let row = &model.w1()[h * dim..(h + 1) * dim];
            let pre = model.b1()[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            let slope: f64 = row.iter().zip(u).map(|(w, v)| w * v).sum();
            prop_assume!(pre.abs() > 4.0 * H * slope.abs());
        }
        let i = pick.0 % classes;
        let j = (i + 1 + pick.1 % (classes - 1)) % classes;
        let g = model.input_gradient(x, i, j).unwrap();
        let analytic: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        let f = |s: f64| {
            let y: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + s * b).collect();
            let l = model.logits(&y);
            l[i] - l[j]
        };
        let fd = (f(H) - f(-H)) / (2.0 * H);
        prop_assert!((fd - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "{} vs {}", analytic, fd);
    }

    #[test]
    fn checkpoints_round_trip_exactly(dim in 1usize..10, width in 1usize..20, classes in 2usize..10, seed in any::<u64>()) {
        let model = MlpModel::init(dim, width, classes, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlpm");
        write_checkpoint(&path, &model).unwrap();
        prop_assert_eq!(read_checkpoint(&path).unwrap(), model);
    }

    #[test]
    fn histogram_counts_every_value(values in prop::collection::vec(0.0f64..10.0, 0..200), bins in 1usize..80) {
        let max = values.iter().copied().fold(0.0, f64::max).max(1e-9);
        let edges = BinEdges::uniform(max, bins).unwrap();
        let h = edges.histogram(&values);
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().sum::<u64>(), values.len() as u64);
    }

    #[test]
    fn spearman_is_rank_based(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some(r) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let cubed: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            let r3 = spearman(&x, &cubed).unwrap();
            prop_assert!((r - r3).abs() <= 1e-12);
            prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        }
    }
}
