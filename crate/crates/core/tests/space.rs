//! Concept-space analysis against scalar, enumeration and Monte-Carlo oracles.

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom as _;

use lifeseq::space::{
    benjamini_hochberg, cosine_distance_matrix, hubness, neighbor_query, ordinal_structure_score, permute_rows, random_embeddings,
    random_ordinal_baseline, randomization_test, Correlation,
};
use lifeseq::rng;

mod common;
use common::bh_oracle;

fn scalar_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[test]
fn distance_matrix_matches_scalar_formula() {
    let e = array![[1.0, 2.0, 2.0], [2.0, 0.0, 1.0], [0.0, 3.0, 4.0]];
    let d = cosine_distance_matrix(&e);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 0.0 } else { scalar_cosine_distance(e.row(i).as_slice().unwrap(), e.row(j).as_slice().unwrap()) };
            assert!((d[[i, j]] - want).abs() < 1e-12, "({i},{j})");
        }
    }
    // 1·0 + 2·3 + 2·4 = 14 over 3·5
    assert!((d[[0, 2]] - (1.0 - 14.0 / 15.0)).abs() < 1e-12);
    assert_eq!(cosine_distance_matrix(&array![[1.0, -1.0], [-3.0, 3.0]])[[0, 1]], 2.0);
}

fn distances(shape: (usize, usize), seed: u64) -> Array2<f64> {
    cosine_distance_matrix(&random_embeddings(shape, seed))
}

#[test]
fn a_matrix_against_itself_is_maximally_significant() {
    let m = distances((20, 6), 1);
    let r = randomization_test(&m, &m, 500, Correlation::Pearson, 2).unwrap();
    assert!((r.statistic - 1.0).abs() < 1e-12);
    assert!(r.p_value <= 1.0 / 501.0 + 1e-15, "{}", r.p_value);
    let s = randomization_test(&m, &m, 500, Correlation::Spearman, 2).unwrap();
    assert!(s.p_value <= 1.0 / 501.0 + 1e-15);
}

#[test]
fn independent_matrices_are_rarely_rejected() {
    let accepted = (0..20)
        .filter(|&k| {
            let r = randomization_test(&distances((50, 8), 100 + k), &distances((50, 8), 200 + k), 1000, Correlation::Pearson, k).unwrap();
            r.p_value > 0.05
        })
        .count();
    assert!(accepted >= 18, "{accepted} of 20");
}

#[test]
fn permuted_control_keeps_geometry_but_not_identity() {
    let e = random_embeddings((50, 8), 3);
    let m = cosine_distance_matrix(&e);
    let p = cosine_distance_matrix(&permute_rows(&e, 4));
    let mut sorted_m: Vec<f64> = m.iter().copied().collect();
    let mut sorted_p: Vec<f64> = p.iter().copied().collect();
    sorted_m.sort_by(f64::total_cmp);
    sorted_p.sort_by(f64::total_cmp);
    assert_eq!(sorted_m, sorted_p);
    let r = randomization_test(&m, &p, 1000, Correlation::Pearson, 5).unwrap();
    assert!(r.p_value > 0.05, "{}", r.p_value);
}

#[test]
fn randomization_test_is_roughly_symmetric() {
    let a = distances((30, 4), 6);
    let noisy = cosine_distance_matrix(&(random_embeddings((30, 4), 6) + random_embeddings((30, 4), 7) * 0.8));
    let ab = randomization_test(&a, &noisy, 1000, Correlation::Pearson, 8).unwrap();
    let ba = randomization_test(&noisy, &a, 1000, Correlation::Pearson, 9).unwrap();
    assert_eq!(ab.statistic, ba.statistic);
    assert!((ab.p_value - ba.p_value).abs() < 0.02);
}

#[test]
fn bh_hand_cases() {
    // sorted 0.01 0.012 0.03 0.04 0.2 against 0.01 0.02 0.03 0.04 0.05
    let p = [0.01, 0.04, 0.03, 0.2, 0.012];
    assert_eq!(benjamini_hochberg(&p, 0.05), vec![true, true, true, false, true]);
    // only rank 4 clears its threshold, yet the step-up rule rejects ranks 1 to 4
    let p = [0.02, 0.025, 0.035, 0.04, 0.3];
    assert_eq!(benjamini_hochberg(&p, 0.05), vec![true, true, true, true, false]);
    assert_eq!(benjamini_hochberg(&[0.0; 5], 0.05), vec![true; 5]);
    assert_eq!(benjamini_hochberg(&[1.0; 5], 0.05), vec![false; 5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bh_matches_step_up_oracle(p in prop::collection::vec(0.0f64..0.2, 1..12), q in 0.01f64..0.2) {
        prop_assert_eq!(benjamini_hochberg(&p, q), bh_oracle(&p, q));
    }

    #[test]
    fn in_degrees_sum_to_n_times_k(seed in 0u64..1000, n in 3usize..25, k in 1usize..3) {
        let h = hubness(&random_embeddings((n, 4), seed), k).unwrap();
        prop_assert_eq!(h.in_degree.iter().sum::<usize>(), n * k);
        prop_assert_eq!(h.max_in_degree, *h.in_degree.iter().max().unwrap());
    }
}

/// Points on the unit circle, so cosine order is angular order.
fn circle(degrees: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((degrees.len(), 2), |(i, j)| {
        let t = degrees[i].to_radians();
        if j == 0 {
            t.cos()
        } else {
            t.sin()
        }
    })
}

fn angular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[test]
fn six_point_knn_matches_angles() {
    let angles = [0.0, 10.0, 35.0, 100.0, 115.0, 200.0];
    let e = circle(&angles);
    let k = 2;
    let mut want = [0usize; 6];
    for i in 0..6 {
        let mut others: Vec<usize> = (0..6).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| angular_gap(angles[i], angles[a]).total_cmp(&angular_gap(angles[i], angles[b])));
        for &j in &others[..k] {
            want[j] += 1;
        }
    }
    // 0:{10,35} 10:{0,35} 35:{10,0} 100:{115,35} 115:{100,35} 200:{115,100}
    assert_eq!(want, [2, 2, 4, 2, 2, 0]);
    let h = hubness(&e, k).unwrap();
    assert_eq!(h.in_degree, want);
    assert_eq!(h.max_in_degree, 4);
    assert!((h.max_fraction - 4.0 / 6.0).abs() < 1e-15);
}

#[test]
fn orthonormal_rows_spread_in_degree_evenly_up_to_ties() {
    // all pairwise distances tie at 1, so every node is picked at most n−1 times
    let n = 10;
    let h = hubness(&Array2::eye(n), 5).unwrap();
    assert!(h.in_degree.iter().all(|&d| d < n));
    assert_eq!(h.in_degree.iter().sum::<usize>(), n * 5);
}

#[test]
fn neighbour_queries() {
    let mut e = random_embeddings((12, 5), 10);
    let dup = e.row(3).to_owned() * 2.5;
    e.row_mut(7).assign(&dup);
    let top = neighbor_query(&e, 3, 1).unwrap();
    assert_eq!(top[0].0, 7);
    assert!(top[0].1.abs() < 1e-12);

    let all = neighbor_query(&e, 0, 11).unwrap();
    let mut ids: Vec<usize> = all.iter().map(|&(j, _)| j).collect();
    ids.sort_unstable();
    assert_eq!(ids, (1..12).collect::<Vec<_>>());

    // full-sort oracle from the scalar formula
    for row in 0..12 {
        let mut oracle: Vec<(usize, f64)> = (0..12)
            .filter(|&j| j != row)
            .map(|j| (j, scalar_cosine_distance(e.row(row).as_slice().unwrap(), e.row(j).as_slice().unwrap())))
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let got = neighbor_query(&e, row, 4).unwrap();
        for (g, o) in got.iter().zip(&oracle[..4]) {
            assert_eq!(g.0, o.0);
            assert!((g.1 - o.1).abs() < 1e-12);
        }
    }
    assert!(neighbor_query(&e, 12, 1).is_err());
}

/// Applies a rotation in every coordinate plane (i, i+1).
fn rotate(e: &Array2<f64>, seed: u64) -> Array2<f64> {
    let d = e.ncols();
    let mut out = e.clone();
    let angles = random_embeddings((d, 1), seed);
    for i in 0..d - 1 {
        let (s, c) = angles[[i, 0]].sin_cos();
        for mut row in out.rows_mut() {
            let (a, b) = (row[i], row[i + 1]);
            row[i] = c * a - s * b;
            row[i + 1] = s * a + c * b;
        }
    }
    out
}

#[test]
fn geometry_is_rotation_invariant() {
    for seed in 0..5 {
        let e = random_embeddings((30, 6), 20 + seed);
        let r = rotate(&e, 40 + seed);
        assert_eq!(hubness(&e, 5).unwrap().in_degree, hubness(&r, 5).unwrap().in_degree);
        for row in [0, 13, 29] {
            let a: Vec<usize> = neighbor_query(&e, row, 5).unwrap().iter().map(|x| x.0).collect();
            let b: Vec<usize> = neighbor_query(&r, row, 5).unwrap().iter().map(|x| x.0).collect();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn ordinal_score_of_random_levels_is_two_over_n_minus_one() {
    let mc = random_ordinal_baseline(100, 16, 300, 30).unwrap();
    assert!((mc - 2.0 / 99.0).abs() < 0.005, "{mc}");
}

#[test]
fn ordinal_score_of_ordered_and_shuffled_levels() {
    let angles: Vec<f64> = (0..50).map(|i| i as f64 * 1.5).collect();
    let family: Vec<usize> = (0..50).collect();
    assert_eq!(ordinal_structure_score(&circle(&angles), &family).unwrap(), 1.0);
    let mut shuffled = family.clone();
    shuffled.shuffle(&mut rng::rng(31));
    assert!(ordinal_structure_score(&circle(&angles), &shuffled).unwrap() < 0.5);
    assert!(ordinal_structure_score(&circle(&angles), &family[..2]).is_err());
}
