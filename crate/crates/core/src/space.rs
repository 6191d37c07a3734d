//! Geometry of learned concept embeddings: distance matrices, permutation
//! tests between models, hubness, neighbour queries and ordinal structure.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::gaussian;
use crate::rng;

/// Pairwise cosine distances `1 − cos(a, b)`; zero rows have cosine 0 with
/// everything but themselves.
pub fn cosine_distance_matrix(e: &Array2<f64>) -> Array2<f64> {
    let unit = unit_rows(e);
    let mut d = unit.dot(&unit.t());
    d.mapv_inplace(|c| 1.0 - c.clamp(-1.0, 1.0));
    for i in 0..d.nrows() {
        d[[i, i]] = 0.0;
    }
    d
}

fn unit_rows(e: &Array2<f64>) -> Array2<f64> {
    let mut u = e.clone();
    for mut row in u.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    u
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    #[default]
    Pearson,
    Spearman,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

impl Correlation {
    pub fn of(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Correlation::Pearson => pearson(a, b),
            Correlation::Spearman => pearson(&ranks(a), &ranks(b)),
        }
    }
}

fn upper(m: &Array2<f64>, perm: Option<&[usize]>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(match perm {
                Some(p) => m[[p[i], p[j]]],
                None => m[[i, j]],
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Permutation test for association between two distance matrices over the
/// same tokens. The null permutes rows and columns of `a` jointly;
/// `p = (1 + #{null ≥ observed}) / (1 + n_permutations)`.
pub fn randomization_test(
    a: &Array2<f64>,
    b: &Array2<f64>,
    n_permutations: usize,
    correlation: Correlation,
    seed: u64,
) -> Result<RandomizationResult> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(Error::invalid(format!("distance matrices differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 3 {
        return Err(Error::invalid("randomization test needs at least three tokens"));
    }
    let vb = upper(b, None);
    let statistic = correlation.of(&upper(a, None), &vb);
    let mut r = rng::child(seed, "permutations");
    let mut perm: Vec<usize> = (0..a.nrows()).collect();
    let mut exceed = 0usize;
    for _ in 0..n_permutations {
        perm.shuffle(&mut r);
        if correlation.of(&upper(a, Some(&perm)), &vb) >= statistic {
            exceed += 1;
        }
    }
    Ok(RandomizationResult { statistic, p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64 })
}

/// Step-up false-discovery control: rejects the `k` smallest p-values, where
/// `k` is the largest rank with `p₍ₖ₎ ≤ k·q/m`.
pub fn benjamini_hochberg(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let k = (1..=m).rev().find(|&k| p_values[idx[k - 1]] <= k as f64 * q / m as f64).unwrap_or(0);
    let mut out = vec![false; m];
    for &i in &idx[..k] {
        out[i] = true;
    }
    out
}

/// Nearest other rows of `row` by cosine distance, closest first (ties by
/// index).
pub fn neighbor_query(e: &Array2<f64>, row: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if row >= e.nrows() {
        return Err(Error::invalid(format!("row {row} outside a {}-row matrix", e.nrows())));
    }
    let unit = unit_rows(e);
    let q = unit.row(row);
    let mut d: Vec<(usize, f64)> =
        (0..e.nrows()).filter(|&j| j != row).map(|j| (j, 1.0 - q.dot(&unit.row(j)).clamp(-1.0, 1.0))).collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hubness {
    pub k: usize,
    pub in_degree: Vec<usize>,
    pub max_in_degree: usize,
    /// `max_in_degree / n_rows`.
    pub max_fraction: f64,
}

/// In-degrees of the directed `k`-nearest-neighbour graph.
pub fn hubness(e: &Array2<f64>, k: usize) -> Result<Hubness> {
    let n = e.nrows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k={k} must lie in 1..{n}")));
    }
    let d = cosine_distance_matrix(e);
    let mut in_degree = vec![0usize; n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
        for &j in &others[..k] {
            in_degree[j] += 1;
        }
    }
    let max_in_degree = in_degree.iter().copied().max().unwrap_or(0);
    Ok(Hubness { k, max_fraction: max_in_degree as f64 / n as f64, in_degree, max_in_degree })
}

/// Share of interior members of an ordered family whose nearest in-family
/// neighbour is an adjacent member.
pub fn ordinal_structure_score(e: &Array2<f64>, family: &[usize]) -> Result<f64> {
    if family.len() < 3 {
        return Err(Error::invalid("ordinal structure needs at least three ordered tokens"));
    }
    let sub = e.select(Axis(0), family);
    let d = cosine_distance_matrix(&sub);
    let n = family.len();
    let hits = (1..n - 1)
        .filter(|&i| {
            let nearest = (0..n).filter(|&j| j != i).min_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b))).expect("n ≥ 3");
            nearest + 1 == i || nearest == i + 1
        })
        .count();
    Ok(hits as f64 / (n - 2) as f64)
}

/// Monte-Carlo mean of [`ordinal_structure_score`] for Gaussian embeddings.
pub fn random_ordinal_baseline(n: usize, d: usize, trials: usize, seed: u64) -> Result<f64> {
    let family: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for t in 0..trials {
        let mut r = rng::child_indexed(seed, "ordinal-baseline", t as u64);
        total += ordinal_structure_score(&gaussian(&mut r, (n, d), 1.0), &family)?;
    }
    Ok(total / trials as f64)
}

/// Gaussian matrix of the same shape, used as a control.
pub fn random_embeddings(shape: (usize, usize), seed: u64) -> Array2<f64> {
    gaussian(&mut rng::child(seed, "random-embeddings"), shape, 1.0)
}

/// Rows shuffled, used as a control that keeps the geometry but breaks the
/// token correspondence.
pub fn permute_rows(e: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut perm: Vec<usize> = (0..e.nrows()).collect();
    perm.shuffle(&mut rng::child(seed, "permute-rows"));
    e.select(Axis(0), &perm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub first: String,
    pub second: String,
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceReport {
    pub tests: Vec<PairTest>,
    pub hubness_k: usize,
    pub max_in_degree: usize,
    pub max_in_degree_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub n_permutations: usize,
    pub correlation: Correlation,
    pub fdr: f64,
    pub hubness_k: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self { n_permutations: 1000, correlation: Correlation::Pearson, fdr: 0.05, hubness_k: 5 }
    }
}

/// Compares every pair of named embedding matrices, plus the first against a
/// random and a row-permuted control, under one false-discovery correction.
/// Hubness is reported for the first matrix.
pub fn compare_spaces(named: &[(String, Array2<f64>)], cfg: &SpaceConfig, seed: u64) -> Result<SpaceReport> {
    let (first_name, first) = named.first().ok_or_else(|| Error::invalid("no embedding matrices given"))?;
    let mut pairs: Vec<(String, String, Array2<f64>, Array2<f64>)> = Vec::new();
    let dists: Vec<Array2<f64>> = named.iter().map(|(_, e)| cosine_distance_matrix(e)).collect();
    for a in 0..named.len() {
        for b in a + 1..named.len() {
            pairs.push((named[a].0.clone(), named[b].0.clone(), dists[a].clone(), dists[b].clone()));
        }
    }
    let random = cosine_distance_matrix(&random_embeddings(first.dim(), seed));
    let permuted = cosine_distance_matrix(&permute_rows(first, seed));
    pairs.push((first_name.clone(), "random".into(), dists[0].clone(), random));
    pairs.push((first_name.clone(), "permuted".into(), dists[0].clone(), permuted));
    let results = pairs
        .iter()
        .enumerate()
        .map(|(i, (_, _, a, b))| randomization_test(a, b, cfg.n_permutations, cfg.correlation, rng::derive_indexed(seed, "test", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let rejected = benjamini_hochberg(&results.iter().map(|r| r.p_value).collect::<Vec<_>>(), cfg.fdr);
    let tests = pairs
        .into_iter()
        .zip(results)
        .zip(rejected)
        .map(|(((first, second, _, _), r), rejected)| PairTest { first, second, statistic: r.statistic, p_value: r.p_value, rejected })
        .collect();
    let h = hubness(first, cfg.hubness_k)?;
    Ok(SpaceReport { tests, hubness_k: h.k, max_in_degree: h.max_in_degree, max_in_degree_fraction: h.max_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distances_of_simple_rows() {
        let d = cosine_distance_matrix(&array![[1.0, 0.0], [-2.0, 0.0], [0.0, 3.0]]);
        assert_eq!(d[[0, 1]], 2.0);
        assert_eq!(d[[0, 2]], 1.0);
        assert_eq!(d[[1, 1]], 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bh_extremes() {
        assert_eq!(benjamini_hochberg(&[0.0, 0.0], 0.05), vec![true, true]);
        assert_eq!(benjamini_hochberg(&[1.0, 1.0], 0.05), vec![false, false]);
    }

    #[test]
    fn linear_levels_are_perfectly_ordered() {
        // Points on a quarter circle keep adjacent levels closest in angle.
        let e = Array2::from_shape_fn((20, 2), |(i, j)| {
            let t = i as f64 * 0.07;
            if j == 0 { t.cos() } else { t.sin() }
        });
        let family: Vec<usize> = (0..20).collect();
        assert_eq!(ordinal_structure_score(&e, &family).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((5, 5));
        assert!(randomization_test(&a, &b, 10, Correlation::Pearson, 0).is_err());
    }
}
