use super::*;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

#[test]
fn exact_all_same_sign() {
    // Only the two constant-sign patterns reach |sum| = 6.
    assert_abs_diff_eq!(sign_flip_exact(&[1.0, 2.0, 3.0]).unwrap(), 0.25);
}

#[test]
fn exact_zero_differences_give_one() {
    assert_eq!(sign_flip_exact(&[0.0; 5]).unwrap(), 1.0);
}

#[test]
fn exact_counts_ties_on_the_boundary() {
    // Patterns of (1, 1, 2): sums 4, 2, 0, -2, 0, -2, -4, 2 -> |s| >= 4 twice.
    assert_abs_diff_eq!(sign_flip_exact(&[1.0, 1.0, 2.0]).unwrap(), 0.25);
    // |s| >= 2: everything except the two zero sums.
    assert_abs_diff_eq!(sign_flip_exact(&[1.0, -1.0, 2.0]).unwrap(), 0.75);
}

#[test]
fn exact_rejects_empty_and_huge() {
    assert!(sign_flip_exact::<f64>(&[]).is_err());
    assert!(sign_flip_exact(&[1.0; 31]).is_err());
}

#[test]
fn monte_carlo_tracks_exact() {
    let d = [0.4, -0.1, 0.9, 0.3, -0.2, 0.7, 0.05, 0.6];
    let exact = sign_flip_exact(&d).unwrap();
    let mc = sign_flip_monte_carlo(&d, 20_000, 3).unwrap();
    assert!((exact - mc).abs() < 0.01, "{exact} vs {mc}");
}

#[test]
fn monte_carlo_is_seeded() {
    let d = [0.3, -0.4, 0.8, 0.1, 0.2, -0.5, 0.9, 0.05, 0.6, -0.3, 0.2, 0.1];
    let a = sign_flip_monte_carlo(&d, 5_000, 11).unwrap();
    assert_eq!(a, sign_flip_monte_carlo(&d, 5_000, 11).unwrap());
    assert!(sign_flip_monte_carlo(&d, 0, 1).is_err());
}

#[test]
fn monte_carlo_never_returns_zero() {
    let d = [1.0; 40];
    let p = sign_flip_monte_carlo(&d, 999, 0).unwrap();
    assert!(p >= 1.0 / 1000.0);
}

#[test]
fn paired_test_switches_to_enumeration_when_cheap() {
    let small = paired_permutation_test(&[1.0, 2.0, 3.0], 10_000, 0).unwrap();
    assert!(small.exact);
    assert_eq!(small.n_permutations, 8);
    assert_abs_diff_eq!(small.statistic, 2.0);
    let large = paired_permutation_test(&[0.1; 20], 1_000, 0).unwrap();
    assert!(!large.exact);
    assert_eq!(large.n_permutations, 1_000);
}

#[test]
fn quantile_interpolates() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile_sorted(&v, 0.0), 1.0);
    assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    assert_abs_diff_eq!(quantile_sorted(&v, 0.5), 2.5);
    assert_abs_diff_eq!(quantile_sorted(&v, 0.75), 3.25);
    assert_eq!(quantile_sorted(&[7.0], 0.3), 7.0);
}

#[test]
fn bootstrap_of_constant_is_degenerate() {
    let ci = bootstrap_ci(&[2.5; 12], 200, 0.95, 1).unwrap();
    assert_eq!((ci.low, ci.estimate, ci.high), (2.5, 2.5, 2.5));
}

#[test]
fn bootstrap_brackets_the_mean() {
    let v: Vec<f64> = (0..50).map(|i| f64::from(i % 7) - 3.0).collect();
    let ci = bootstrap_ci(&v, 2_000, 0.9, 5).unwrap();
    assert!(ci.low <= ci.estimate && ci.estimate <= ci.high);
    assert!(ci.high - ci.low > 0.0);
}

#[test]
fn bootstrap_validates_arguments() {
    assert!(bootstrap_ci::<f64>(&[], 10, 0.95, 0).is_err());
    assert!(bootstrap_ci(&[1.0], 10, 1.0, 0).is_err());
    assert!(bootstrap_ci(&[1.0], 0, 0.95, 0).is_err());
}

#[test]
fn bh_worked_example() {
    let r = bh_correct(&[0.01, 0.04, 0.03, 0.005], 0.05).unwrap();
    assert_eq!(r.rejected, vec![true; 4]);
    for (a, b) in r.adjusted.iter().zip([0.02, 0.04, 0.04, 0.02]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
}

#[test]
fn bh_step_up_rescues_smaller_p() {
    // 0.03 alone fails 0.05/3 but the largest p passes its own threshold.
    let r = bh_correct(&[0.03, 0.02, 0.05], 0.05).unwrap();
    assert_eq!(r.rejected, vec![true, true, true]);
    // 0.03 <= 2q/3 once 0.5 is out of the way.
    let r = bh_correct(&[0.03, 0.02, 0.5], 0.05).unwrap();
    assert_eq!(r.rejected, vec![true, true, false]);
    let r = bh_correct(&[0.04, 0.02, 0.5], 0.05).unwrap();
    assert_eq!(r.rejected, vec![false, false, false]);
}

#[test]
fn bh_edges() {
    assert!(bh_correct(&[], 0.05).unwrap().rejected.is_empty());
    assert!(bh_correct(&[0.1], 0.0).is_err());
    assert!(bh_correct(&[1.2], 0.05).is_err());
}

proptest! {
    #[test]
    fn bh_adjusted_dominates_and_is_monotone(ps in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let r = bh_correct(&ps, 0.1).unwrap();
        for (p, a) in ps.iter().zip(&r.adjusted) {
            prop_assert!(a >= p && *a <= 1.0);
        }
        for i in 0..ps.len() {
            for j in 0..ps.len() {
                if ps[i] < ps[j] {
                    prop_assert!(r.adjusted[i] <= r.adjusted[j]);
                }
            }
        }
        for (rej, a) in r.rejected.iter().zip(&r.adjusted) {
            prop_assert_eq!(*rej, *a <= 0.1);
        }
    }

    #[test]
    fn exact_p_is_a_probability(d in prop::collection::vec(-1.0f64..1.0, 1..10)) {
        let p = sign_flip_exact(&d).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        let flipped: Vec<f64> = d.iter().map(|x| -x).collect();
        prop_assert_eq!(p, sign_flip_exact(&flipped).unwrap());
    }
}
