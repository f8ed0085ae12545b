use marginlab::model::MlpModel;
use marginlab::solver::*;
use marginlab::{Classifier, LinearClassifier};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn three_four_five_hyperplane() {
    let m = LinearClassifier::new(2, vec![3.0, 4.0, 0.0, 0.0], vec![0.0, 0.0]).unwrap();
    let x = [1.0, 1.0];
    let p = CmpProblem::new(&m, &x, 1).unwrap();
    assert_eq!(p.i, 0);
    let out = solve_pair(&m, &p, &cfg());
    assert_eq!(out.status, PairStatus::Valid);
    assert!((out.distance - 1.4).abs() <= 1e-6 * 1.4, "{}", out.distance);
    assert!((out.point[0] - 0.16).abs() < 1e-6 && (out.point[1] + 0.12).abs() < 1e-6);
    assert!(out.residual <= 1e-3);
}

#[test]
fn start_on_boundary_gives_zero() {
    let m = LinearClassifier::new(2, vec![3.0, 4.0, 0.0, 0.0], vec![-7.0, 0.0]).unwrap();
    let x = [1.0, 1.0];
    let r = solve_margin(&m, 5, &x, None, &cfg()).unwrap();
    assert_eq!(r.status, MarginStatus::Valid);
    assert_eq!(r.margin, Some(0.0));
    assert_eq!(r.boundary_point.as_deref(), Some(&x[..]));
    assert_eq!(r.pairs.len(), 1);
}

#[test]
fn random_linear_pairs_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..30 {
        let d = [2, 10, 784][case % 3];
        let c = 2 + case % 3;
        let w: Vec<f64> = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = LinearClassifier::new(d, w, b).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let i = m.predict(&x);
        let logits = m.logits(&x);
        for j in (0..c).filter(|&j| j != i) {
            let a: Vec<f64> = m.row(i).iter().zip(m.row(j)).map(|(p, q)| p - q).collect();
            let exact = (logits[i] - logits[j]).abs() / norm(&a);
            let out = solve_pair(&m, &CmpProblem::new(&m, &x, j).unwrap(), &cfg());
            assert_eq!(out.status, PairStatus::Valid);
            let rel = (out.distance - exact).abs() / exact.max(1e-300);
            assert!(rel <= 1e-6, "d={d} c={c} j={j}: {} vs {exact}", out.distance);
        }
    }
}

/// Many classes give small margins, where an absolute feasibility
/// tolerance alone would cost relative accuracy.
#[test]
fn small_multiclass_margins_are_relatively_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for case in 0..200 {
        let d = [2, 10][case % 2];
        let c = rng.random_range(2..=10);
        let w: Vec<f64> = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = LinearClassifier::new(d, w, b).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = m.logits(&x);
        let i = m.predict(&x);
        let exact = (0..c)
            .filter(|&j| j != i)
            .map(|j| {
                let a: Vec<f64> = m.row(i).iter().zip(m.row(j)).map(|(p, q)| p - q).collect();
                (logits[i] - logits[j]) / norm(&a)
            })
            .fold(f64::INFINITY, f64::min);
        let got = solve_margin(&m, case as u64, &x, None, &cfg()).unwrap().margin.unwrap();
        assert!((got - exact).abs() <= 1e-6 * exact, "case {case}: {got} vs {exact}");
    }
}

/// Two hidden units carve boundaries at `x1 = 1` (class 1) and
/// `x2 = -1.5` (class 2) around the origin.
fn two_boundary_model() -> MlpModel {
    MlpModel::from_parts(
        2,
        2,
        3,
        0,
        vec![1.0, 0.0, 0.0, -1.0],
        vec![1.0, 1.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        vec![0.0, -2.0, -2.5],
    )
    .unwrap()
}

#[test]
fn nearer_of_two_boundaries_wins() {
    let m = two_boundary_model();
    let r = solve_margin(&m, 0, &[0.0, 0.0], None, &cfg()).unwrap();
    assert_eq!(r.status, MarginStatus::Valid);
    assert_eq!(r.j_star, Some(1));
    assert!((r.margin.unwrap() - 1.0).abs() < 1e-6);
    let p2 = r.pairs.iter().find(|p| p.j == 2).unwrap();
    assert!((p2.distance - 1.5).abs() < 1e-6);
    let xh = r.boundary_point.unwrap();
    assert!((xh[0] - 1.0).abs() < 1e-6 && xh[1].abs() < 1e-6);
}

#[test]
fn ten_classes_attempt_nine_pairs() {
    let m = MlpModel::init(20, 30, 10, 3).unwrap();
    let x: Vec<f64> = (0..20).map(|k| (k as f64 * 0.37).sin()).collect();
    let r = solve_margin(&m, 1, &x, None, &cfg()).unwrap();
    assert_eq!(r.pairs.len(), 9);
    assert!(r.pairs.iter().all(|p| p.j != r.i));
}

#[test]
fn collinear_bisection_is_exact_on_linear_model() {
    let m = LinearClassifier::new(2, vec![3.0, 4.0, 0.0, 0.0], vec![0.0, 0.0]).unwrap();
    let x = [1.0, 1.0];
    let other = [1.0 - 3.0 * 0.6, 1.0 - 3.0 * 0.8];
    let c = bisection_upper_bound(&m, &x, &other).unwrap();
    assert!(c.distance >= 1.4 && c.distance - 1.4 <= 2e-6);
    assert_eq!(c.outside_class, 1);
    assert!(bisection_upper_bound(&m, &x, &x).is_err());
}

fn random_mlp_case(seed: u64) -> (MlpModel, Vec<f64>, Vec<f64>) {
    let d = 12;
    let m = MlpModel::init(d, 100, 4, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let i = m.predict(&x);
    loop {
        let o: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        if m.predict(&o) != i {
            return (m, x, o);
        }
    }
}

#[test]
fn random_mlp_margins_are_valid_and_below_bisection_bound() {
    for seed in 0..40 {
        let (m, x, o) = random_mlp_case(seed);
        let bound = bisection_upper_bound(&m, &x, &o).unwrap();
        assert!(bound.distance <= norm(&x.iter().zip(&o).map(|(a, b)| a - b).collect::<Vec<_>>()) + 1e-12);
        let r = solve_margin(&m, seed, &x, Some(&o), &cfg()).unwrap();
        assert_eq!(r.status, MarginStatus::Valid, "seed {seed}");
        let xh = r.boundary_point.as_ref().unwrap();
        let l = m.logits(xh);
        assert!((l[r.i] - l[r.j_star.unwrap()]).abs() <= 1e-3);
        assert!(r.margin.unwrap() <= bound.distance + 1e-4, "seed {seed}");
        assert_eq!(r.upper_bound, Some(bound.distance));
    }
}

/// A solve cut off long before the augmented Lagrangian settles still ends
/// on the boundary.
#[test]
fn truncated_solves_are_projected_onto_the_boundary() {
    let short = SolverConfig {
        outer_max_iters: 1,
        inner_max_iters: 2,
        ..cfg()
    };
    for seed in 0..40 {
        let (m, x, _) = random_mlp_case(seed);
        for j in (0..m.num_classes()).filter(|&j| j != m.predict(&x)) {
            let p = CmpProblem::new(&m, &x, j).unwrap();
            let out = solve_pair(&m, &p, &short);
            let l = m.logits(&out.point);
            let residual = (l[out.i] - l[j]).abs();
            assert_eq!(out.status, PairStatus::Valid, "seed {seed} j {j} residual {residual}");
            assert_eq!(residual, out.residual);
            assert!(residual <= 1e-3);
        }
    }
}

#[test]
fn margins_are_deterministic_and_batch_independent() {
    let cases: Vec<_> = (0..6).map(random_mlp_case).collect();
    let m = &cases[0].0;
    let xs: Vec<&[f64]> = cases.iter().map(|c| c.1.as_slice()).collect();
    let tasks: Vec<MarginTask> = xs
        .iter()
        .enumerate()
        .map(|(k, x)| MarginTask {
            sample_id: k as u64,
            x,
            reference: None,
        })
        .collect();
    let together = solve_margins(m, &tasks, &cfg()).unwrap();
    let again = solve_margins(m, &tasks, &cfg()).unwrap();
    assert_eq!(together, again);
    for (t, r) in tasks.iter().zip(&together) {
        let alone = solve_margin(m, t.sample_id, t.x, None, &cfg()).unwrap();
        assert_eq!(&alone, r);
    }
}

#[test]
fn config_validation() {
    assert!(cfg().validate().is_ok());
    let bad = SolverConfig {
        penalty_growth: 1.0,
        ..cfg()
    };
    assert!(bad.validate().is_err());
    let bad = SolverConfig {
        validity_threshold: 0.0,
        ..cfg()
    };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn two_class_linear_margin_is_point_to_hyperplane(
        w in prop::collection::vec(-2.0f64..2.0, 6),
        b in -1.0f64..1.0,
        x in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let a: Vec<f64> = w[..3].iter().zip(&w[3..]).map(|(p, q)| p - q).collect();
        prop_assume!(norm(&a) > 0.1);
        let m = LinearClassifier::new(3, w.clone(), vec![b, 0.0]).unwrap();
        let l = m.logits(&x);
        let exact = (l[0] - l[1]).abs() / norm(&a);
        let r = solve_margin(&m, 0, &x, None, &cfg()).unwrap();
        prop_assert_eq!(r.pairs.len(), 1);
        let margin = r.margin.unwrap();
        prop_assert!((margin - exact).abs() <= 1e-6 * exact.max(1e-3));
    }
}
