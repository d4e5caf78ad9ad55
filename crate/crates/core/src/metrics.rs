//! Evaluation metrics: classification accuracy, Hungarian-matched clustering
//! accuracy, silhouette, and the two harmonic scores (HNA for open-set
//! rejection, HCA for category discovery).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{ClassId, FeatureSet, UNKNOWN};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ans: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hna: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sc: Option<f64>,
    /// Cluster id -> class id chosen by the matching step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub matching: Option<BTreeMap<ClassId, ClassId>>,
}

fn check_pair(truth: &[ClassId], pred: &[ClassId]) -> Result<()> {
    if truth.len() != pred.len() {
        return invalid(format!(
            "label length mismatch: {} truth vs {} predicted",
            truth.len(),
            pred.len()
        ));
    }
    if truth.is_empty() {
        return invalid("empty label vectors");
    }
    Ok(())
}

pub fn classification_accuracy(truth: &[ClassId], pred: &[ClassId]) -> Result<f64> {
    check_pair(truth, pred)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Optimal one-to-one assignment between rows and columns of a cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row; `min(rows, cols)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost assignment on a rectangular matrix (row-major slices).
///
/// Among all optimal assignments the lexicographically smallest one is
/// returned, where the assignment is read as the column chosen for each row
/// in row order (an unmatched row sorts after every real column).
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != cols) {
        return invalid("cost matrix rows have different lengths");
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return invalid("cost matrix contains non-finite entries");
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    // Pad to square with zero-cost dummies; dummy indices sort last.
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };
    let scale = cost
        .iter()
        .flatten()
        .fold(1.0f64, |m, c| m.max(c.abs()));
    let eps = 1e-9 * scale;

    let (mut row_to_col, u, v) = solve_square(n, &at);
    let tight = |i: usize, j: usize| at(i, j) - u[i] - v[j] <= eps;
    lexicographic_tighten(n, &mut row_to_col, &tight);

    let mut pairs = Vec::with_capacity(rows.min(cols));
    let mut total = 0.0;
    for (i, &j) in row_to_col.iter().enumerate() {
        if i < rows && j < cols {
            pairs.push((i, j));
            total += cost[i][j];
        }
    }
    Ok(Assignment { pairs, cost: total })
}

/// Shortest-augmenting-path Hungarian method on an `n x n` matrix.
/// Returns the row->column matching and feasible duals `(u, v)`.
fn solve_square(n: usize, at: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based arrays; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Every perfect matching inside the tight (zero reduced cost) subgraph is
/// optimal, so walk rows in order and move each to the smallest tight column
/// that still admits a perfect matching on the remaining rows.
fn lexicographic_tighten(n: usize, row_to_col: &mut [usize], tight: &dyn Fn(usize, usize) -> bool) {
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        let current = row_to_col[i];
        for j in 0..current {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            // Row r currently holds j; it must reach `current` (to be freed).
            let r = col_to_row[j];
            let mut trial_r2c = row_to_col.to_vec();
            let mut trial_c2r = col_to_row.clone();
            trial_r2c[i] = j;
            trial_c2r[j] = i;
            let mut blocked = fixed_col.clone();
            blocked[j] = true;
            let mut visited = vec![false; n];
            if augment(r, current, &mut trial_r2c, &mut trial_c2r, &blocked, &mut visited, tight, i) {
                row_to_col.copy_from_slice(&trial_r2c);
                col_to_row = trial_c2r;
                break;
            }
        }
        fixed_col[row_to_col[i]] = true;
    }
}

/// DFS for an alternating path that re-matches `row` so that column `free`
/// becomes occupied, using only rows after `pivot` and unblocked columns.
#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    free: usize,
    r2c: &mut [usize],
    c2r: &mut [usize],
    blocked: &[bool],
    visited: &mut [bool],
    tight: &dyn Fn(usize, usize) -> bool,
    pivot: usize,
) -> bool {
    for j in 0..r2c.len() {
        if blocked[j] || visited[j] || !tight(row, j) {
            continue;
        }
        visited[j] = true;
        if j == free {
            r2c[row] = j;
            c2r[j] = row;
            return true;
        }
        let next = c2r[j];
        if next <= pivot {
            continue;
        }
        if augment(next, free, r2c, c2r, blocked, visited, tight, pivot) {
            r2c[row] = j;
            c2r[j] = row;
            return true;
        }
    }
    false
}

/// Contingency table (truth classes x predicted clusters), both sorted.
fn contingency(
    truth: &[ClassId],
    pred: &[ClassId],
) -> (Vec<ClassId>, Vec<ClassId>, Vec<Vec<f64>>) {
    let classes: Vec<ClassId> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let clusters: Vec<ClassId> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let ci: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ki: BTreeMap<ClassId, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut table = vec![vec![0.0; clusters.len()]; classes.len()];
    for (t, p) in truth.iter().zip(pred) {
        table[ci[t]][ki[p]] += 1.0;
    }
    (classes, clusters, table)
}

/// Best cluster->class matching; returns (matched count, matching).
fn matched_count(truth: &[ClassId], pred: &[ClassId]) -> Result<(usize, BTreeMap<ClassId, ClassId>)> {
    if truth.is_empty() {
        return Ok((0, BTreeMap::new()));
    }
    let (classes, clusters, table) = contingency(truth, pred);
    let neg: Vec<Vec<f64>> = table
        .iter()
        .map(|r| r.iter().map(|c| -c).collect())
        .collect();
    let a = hungarian_match(&neg)?;
    let mut matched = 0usize;
    let mut matching = BTreeMap::new();
    for (r, c) in a.pairs {
        matched += table[r][c] as usize;
        matching.insert(clusters[c], classes[r]);
    }
    Ok((matched, matching))
}

/// Clustering accuracy under the best one-to-one cluster->class matching.
pub fn clustering_accuracy(
    truth: &[ClassId],
    pred_clusters: &[ClassId],
) -> Result<(f64, BTreeMap<ClassId, ClassId>)> {
    check_pair(truth, pred_clusters)?;
    let (matched, matching) = matched_count(truth, pred_clusters)?;
    Ok((matched as f64 / truth.len() as f64, matching))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteMode {
    /// Mean of per-point coefficients, in `[-1, 1]`.
    #[default]
    Mean,
    /// Unnormalized sum of per-point coefficients.
    Sum,
}

/// Silhouette coefficient with Euclidean distances.
pub fn silhouette(points: &FeatureSet, assignments: &[ClassId]) -> Result<f64> {
    silhouette_with(points, assignments, SilhouetteMode::Mean)
}

pub fn silhouette_with(
    points: &FeatureSet,
    assignments: &[ClassId],
    mode: SilhouetteMode,
) -> Result<f64> {
    let all: Vec<usize> = (0..points.len()).collect();
    silhouette_subset(points, assignments, &all, mode)
}

/// Silhouette aggregated over `rows` only, with cohesion and separation
/// measured against every point of the partition.
pub fn silhouette_subset(
    points: &FeatureSet,
    assignments: &[ClassId],
    rows: &[usize],
    mode: SilhouetteMode,
) -> Result<f64> {
    let n = points.len();
    if assignments.len() != n {
        return invalid(format!("{} assignments for {n} points", assignments.len()));
    }
    if rows.is_empty() || rows.iter().any(|&r| r >= n) {
        return invalid("silhouette rows must be non-empty and in range");
    }
    let labels: Vec<ClassId> = assignments.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if labels.len() < 2 {
        return invalid("silhouette needs at least two clusters");
    }
    let index: BTreeMap<ClassId, usize> = labels.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let cluster: Vec<usize> = assignments.iter().map(|a| index[a]).collect();
    let mut sizes = vec![0usize; labels.len()];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let per_point: Vec<f64> = {
        use rayon::prelude::*;
        rows.par_iter()
            .map(|&i| {
                let own = cluster[i];
                if sizes[own] == 1 {
                    return 0.0;
                }
                let mut sums = vec![0.0; labels.len()];
                let xi = points.row(i);
                for j in 0..n {
                    if j != i {
                        sums[cluster[j]] += crate::types::sq_dist(xi, points.row(j)).sqrt();
                    }
                }
                let a = sums[own] / (sizes[own] - 1) as f64;
                let b = (0..labels.len())
                    .filter(|&c| c != own)
                    .map(|c| sums[c] / sizes[c] as f64)
                    .fold(f64::INFINITY, f64::min);
                let denom = a.max(b);
                if denom > 0.0 {
                    (b - a) / denom
                } else {
                    0.0
                }
            })
            .collect()
    };
    let total: f64 = per_point.iter().sum();
    Ok(match mode {
        SilhouetteMode::Mean => total / rows.len() as f64,
        SilhouetteMode::Sum => total,
    })
}

fn harmonic(x: f64, y: f64) -> f64 {
    if x == 0.0 || y == 0.0 {
        0.0
    } else {
        2.0 / (1.0 / x + 1.0 / y)
    }
}

/// Harmonic normalized accuracy. Truth `0` marks unknown-class rows;
/// a prediction of `0` is a rejection.
pub fn hna(truth: &[ClassId], pred: &[ClassId]) -> Result<MetricReport> {
    check_pair(truth, pred)?;
    let (mut known, mut known_hit, mut unknown, mut unknown_hit) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == UNKNOWN {
            unknown += 1;
            unknown_hit += usize::from(p == UNKNOWN);
        } else {
            known += 1;
            known_hit += usize::from(p == t);
        }
    }
    if known == 0 || unknown == 0 {
        return invalid("HNA needs both known and unknown instances");
    }
    let aks = known_hit as f64 / known as f64;
    let aus = unknown_hit as f64 / unknown as f64;
    Ok(MetricReport {
        aks: Some(aks),
        aus: Some(aus),
        hna: Some(harmonic(aks, aus)),
        ..Default::default()
    })
}

/// Harmonic clustering accuracy.
///
/// Known-class rows are scored by exact label match. Novel-class rows are
/// scored by clustering accuracy where only predicted ids outside `known`
/// take part in the matching; a novel row predicted as a known class is
/// always wrong.
pub fn hca(truth: &[ClassId], pred: &[ClassId], known: &BTreeSet<ClassId>) -> Result<MetricReport> {
    check_pair(truth, pred)?;
    let mut known_total = 0usize;
    let mut known_hit = 0usize;
    let mut novel_total = 0usize;
    let mut novel_truth = Vec::new();
    let mut novel_pred = Vec::new();
    for (&t, &p) in truth.iter().zip(pred) {
        if known.contains(&t) {
            known_total += 1;
            known_hit += usize::from(p == t);
        } else {
            novel_total += 1;
            if !known.contains(&p) {
                novel_truth.push(t);
                novel_pred.push(p);
            }
        }
    }
    if known_total == 0 || novel_total == 0 {
        return invalid("HCA needs both known-class and novel-class instances");
    }
    let (matched, matching) = matched_count(&novel_truth, &novel_pred)?;
    let aks = known_hit as f64 / known_total as f64;
    let ans = matched as f64 / novel_total as f64;
    Ok(MetricReport {
        aks: Some(aks),
        ans: Some(ans),
        hca: Some(harmonic(aks, ans)),
        matching: Some(matching),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force best matching: try every injection of the smaller label
    /// set into the larger one.
    fn oracle_matched(truth: &[ClassId], pred: &[ClassId]) -> usize {
        let classes: Vec<ClassId> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let clusters: Vec<ClassId> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut best = 0;
        let mut chosen = vec![usize::MAX; clusters.len()];
        fn rec(
            k: usize,
            chosen: &mut Vec<usize>,
            used: &mut Vec<bool>,
            classes: &[ClassId],
            clusters: &[ClassId],
            truth: &[ClassId],
            pred: &[ClassId],
            best: &mut usize,
        ) {
            if k == clusters.len() {
                let hits = truth
                    .iter()
                    .zip(pred)
                    .filter(|(t, p)| {
                        let ci = clusters.iter().position(|c| c == *p).unwrap();
                        chosen[ci] != usize::MAX && classes[chosen[ci]] == **t
                    })
                    .count();
                *best = (*best).max(hits);
                return;
            }
            // cluster k unmatched
            chosen[k] = usize::MAX;
            rec(k + 1, chosen, used, classes, clusters, truth, pred, best);
            for c in 0..classes.len() {
                if !used[c] {
                    used[c] = true;
                    chosen[k] = c;
                    rec(k + 1, chosen, used, classes, clusters, truth, pred, best);
                    used[c] = false;
                    chosen[k] = usize::MAX;
                }
            }
        }
        let mut used = vec![false; classes.len()];
        rec(0, &mut chosen, &mut used, &classes, &clusters, truth, pred, &mut best);
        best
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(classification_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!((classification_accuracy(&[1, 2, 3], &[1, 2, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(classification_accuracy(&[1], &[1, 2]).is_err());
        assert!(classification_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian_match(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 0.0);

        let flat = vec![vec![2.5; 3]; 3];
        let a = hungarian_match(&flat).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.cost, 7.5);

        // Two optima: identity and anti-diagonal; identity is smaller.
        let a = hungarian_match(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);

        // Optimum forces row 0 off column 0.
        let a = hungarian_match(&[vec![5.0, 1.0], vec![1.0, 5.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);

        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn hungarian_rectangular() {
        let wide = hungarian_match(&[vec![3.0, 1.0, 2.0]]).unwrap();
        assert_eq!(wide.pairs, vec![(0, 1)]);
        let tall = hungarian_match(&[vec![3.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(tall.pairs, vec![(1, 0)]);
        assert_eq!(tall.cost, 1.0);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_matches_permutation_enumeration_6x6() {
        let mut rng = crate::rng::Rng::new(11);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..6).map(|_| (rng.uniform() * 100.0).round() / 4.0).collect())
                .collect();
            let mut best = f64::INFINITY;
            let mut best_perm = None;
            for p in &perms {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                // enumeration order is not lexicographic; track lexicographic min explicitly
                let better = c < best - 1e-9
                    || ((c - best).abs() <= 1e-9 && best_perm.as_ref().is_some_and(|b: &Vec<usize>| p < b));
                if better {
                    best = c;
                    best_perm = Some(p.clone());
                }
            }
            let got = hungarian_match(&cost).unwrap();
            assert!((got.cost - best).abs() < 1e-9);
            let got_perm: Vec<usize> = got.pairs.iter().map(|&(_, j)| j).collect();
            assert_eq!(&got_perm, best_perm.as_ref().unwrap());
        }
    }

    #[test]
    fn clustering_accuracy_examples() {
        let (acc, m) = clustering_accuracy(&[0, 0, 1, 1], &[7, 7, 9, 9]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(m[&7], 0);
        assert_eq!(m[&9], 1);
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[7, 9, 7, 9]).unwrap().0, 0.5);
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[5, 6, 7, 7]).unwrap().0, 0.75);
        assert_eq!(oracle_matched(&[0, 0, 1, 1], &[5, 6, 7, 7]), 3);
    }

    #[test]
    fn silhouette_two_tight_pairs() {
        let pts = FeatureSet::from_rows(&[vec![0.0], vec![0.1], vec![10.0], vec![10.1]]).unwrap();
        let sc = silhouette(&pts, &[1, 1, 2, 2]).unwrap();
        // Hand computation: a = 0.1 for every point; b = 10.05, 9.95, 9.95, 10.05.
        let s = |b: f64| (b - 0.1) / b;
        let oracle = (2.0 * s(10.05) + 2.0 * s(9.95)) / 4.0;
        assert!((sc - oracle).abs() < 1e-12);
        assert!((sc - 0.990).abs() < 5e-4);
        let summed = silhouette_with(&pts, &[1, 1, 2, 2], SilhouetteMode::Sum).unwrap();
        assert!((summed - 4.0 * oracle).abs() < 1e-12);
    }

    #[test]
    fn silhouette_interleaved_is_near_zero() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..50 {
            let x = i as f64 * 0.37 % 5.0;
            rows.push(vec![x]);
            rows.push(vec![x]);
            labels.push(1);
            labels.push(2);
        }
        let pts = FeatureSet::from_rows(&rows).unwrap();
        assert!(silhouette(&pts, &labels).unwrap().abs() < 0.05);
    }

    #[test]
    fn silhouette_errors_and_singletons() {
        let pts = FeatureSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(silhouette(&pts, &[1, 1]).is_err());
        // Both clusters singletons -> every contribution is 0.
        assert_eq!(silhouette(&pts, &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn hna_examples() {
        // AKS = 0.8 (4 of 5 known right), AUS = 0.4 (2 of 5 unknown rejected).
        let truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let pred = [1, 1, 1, 1, 2, 0, 0, 3, 3, 3];
        let r = hna(&truth, &pred).unwrap();
        assert!((r.aks.unwrap() - 0.8).abs() < 1e-15);
        assert!((r.aus.unwrap() - 0.4).abs() < 1e-15);
        assert!((r.hna.unwrap() - 0.533_333_333_333_333_3).abs() < 1e-12);

        let r = hna(&[1, 0], &[1, 1]).unwrap();
        assert_eq!(r.aus, Some(0.0));
        assert_eq!(r.hna, Some(0.0));

        let r = hna(&[1, 2, 0, 0], &[1, 0, 0, 2]).unwrap();
        assert_eq!(r.hna, Some(0.5));

        assert!(hna(&[1, 2], &[1, 2]).is_err());
        assert!(hna(&[0, 0], &[0, 0]).is_err());
    }

    #[test]
    fn hca_worked_scenario() {
        // Known classes 1,2,3; novel classes 4,5. Known rows of classes 1,2 were
        // put into clusters 4,5 and novel rows were labeled 1,2.
        let known: BTreeSet<ClassId> = [1, 2, 3].into();
        let truth = [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 5, 5];
        let pred = [4, 4, 4, 5, 5, 5, 3, 3, 3, 1, 1, 2, 2];
        // Plain ACC matches clusters 4,5 with classes 1,2 and scores perfectly.
        let (acc, m) = clustering_accuracy(&truth, &pred).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(m[&4], 1);
        assert_eq!(m[&5], 2);
        let r = hca(&truth, &pred, &known).unwrap();
        assert!((r.aks.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.ans, Some(0.0));
        assert_eq!(r.hca, Some(0.0));

        // Mixed case; oracle: AKS = 7/9, ANS = 4/6.
        let truth = [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4, 5, 5, 5];
        let pred = [1, 1, 4, 2, 2, 5, 3, 3, 3, 4, 4, 5, 5, 5, 1];
        let r = hca(&truth, &pred, &known).unwrap();
        assert!((r.aks.unwrap() - 7.0 / 9.0).abs() < 1e-15);
        assert!((r.ans.unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.hca.unwrap() - 2.0 / (9.0 / 7.0 + 6.0 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn hca_edge_branches() {
        let known: BTreeSet<ClassId> = [1, 2].into();
        let r = hca(&[1, 2, 3, 4], &[1, 2, 10, 11], &known).unwrap();
        assert_eq!(r.hca, Some(1.0));
        let r = hca(&[1, 2, 3, 4], &[1, 2, 1, 2], &known).unwrap();
        assert_eq!(r.ans, Some(0.0));
        assert_eq!(r.hca, Some(0.0));
        assert!(hca(&[1, 2], &[1, 2], &known).is_err());
        assert!(hca(&[3, 4], &[3, 4], &known).is_err());
    }

    proptest! {
        #[test]
        fn clustering_accuracy_equals_brute_force(
            pairs in prop::collection::vec((0u32..7, 0u32..7), 1..40)
        ) {
            let truth: Vec<ClassId> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<ClassId> = pairs.iter().map(|p| p.1 + 100).collect();
            let (acc, _) = clustering_accuracy(&truth, &pred).unwrap();
            let oracle = oracle_matched(&truth, &pred) as f64 / truth.len() as f64;
            prop_assert_eq!(acc, oracle);
        }

        #[test]
        fn clustering_accuracy_relabel_invariant(
            pairs in prop::collection::vec((0u32..6, 0u32..6), 1..40),
            seed in any::<u64>(),
        ) {
            let truth: Vec<ClassId> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<ClassId> = pairs.iter().map(|p| p.1).collect();
            let mut perm: Vec<ClassId> = (50..56).collect();
            crate::rng::Rng::new(seed).shuffle(&mut perm);
            let relabeled: Vec<ClassId> = pred.iter().map(|&p| perm[p as usize]).collect();
            prop_assert_eq!(
                clustering_accuracy(&truth, &pred).unwrap().0,
                clustering_accuracy(&truth, &relabeled).unwrap().0
            );
        }

        #[test]
        fn harmonic_bounds(x in 0.01f64..1.0, y in 0.01f64..1.0) {
            let h = harmonic(x, y);
            prop_assert!(h >= x.min(y) - 1e-15 && h <= x.max(y) + 1e-15);
            prop_assert_eq!(h, harmonic(y, x));
        }

        #[test]
        fn silhouette_bounded_and_translation_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0u32..3), 4..30),
            shift in -100.0f64..100.0,
            angle in 0.0f64..6.28,
            scale in 0.1f64..10.0,
        ) {
            let labels: Vec<ClassId> = pts.iter().map(|p| p.2).collect();
            prop_assume!(labels.iter().collect::<BTreeSet<_>>().len() >= 2);
            let rows: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
            let base = silhouette(&FeatureSet::from_rows(&rows).unwrap(), &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));
            let (s, c) = angle.sin_cos();
            let moved: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![scale * (c * r[0] - s * r[1]) + shift, scale * (s * r[0] + c * r[1]) - shift])
                .collect();
            let other = silhouette(&FeatureSet::from_rows(&moved).unwrap(), &labels).unwrap();
            prop_assert!((base - other).abs() < 1e-9);
        }

        #[test]
        fn hca_singleton_overclustering_matches_oracle(
            novel in prop::collection::vec(3u32..6, 1..7),
            known_pred in prop::collection::vec(prop::bool::ANY, 1..7),
        ) {
            let known: BTreeSet<ClassId> = [1, 2].into();
            let mut truth = vec![1, 2];
            let mut pred = vec![1, 2];
            for (i, &t) in novel.iter().enumerate() {
                truth.push(t);
                // distinct singleton cluster per novel row, or a known-class prediction
                if known_pred.get(i).copied().unwrap_or(false) { pred.push(1) } else { pred.push(100 + i as u32) }
            }
            let r = hca(&truth, &pred, &known).unwrap();
            let nt: Vec<ClassId> = truth[2..].to_vec();
            let np: Vec<ClassId> = pred[2..].iter().map(|&p| if p == 1 { 9999 } else { p }).collect();
            // Oracle: known-predicted rows form a pseudo-cluster that may not be matched.
            let kept: Vec<(ClassId, ClassId)> = nt.iter().zip(&np).filter(|(_, p)| **p != 9999).map(|(a, b)| (*a, *b)).collect();
            let oracle = if kept.is_empty() { 0 } else {
                oracle_matched(&kept.iter().map(|x| x.0).collect::<Vec<_>>(), &kept.iter().map(|x| x.1).collect::<Vec<_>>())
            };
            prop_assert_eq!(r.ans.unwrap(), oracle as f64 / nt.len() as f64);
        }
    }
}
