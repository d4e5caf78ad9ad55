//! Exemplar selection by dissimilarity-based sparse subset selection.
//!
//! For one class with rows `z_1..z_N` and dissimilarities `d_ij = |z_i - z_j|^2`
//! the selector solves
//!
//! ```text
//! minimize   lambda * sum_i |Z_i.|_q + sum_ij d_ij Z_ij
//! subject to Z >= 0, every column of Z sums to 1
//! ```
//!
//! with ADMM on the split `Z = C`: the `Z` block carries the row norms and
//! nonnegativity, the `C` block carries the linear cost and the column
//! simplex constraint. Rows of the solution with large norm are the
//! representatives. A swap local search on the facility-location cost
//! `sum_j min_{i in S} d_ij` then polishes the top-`m` rows.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ingest::{self, Dtype};
use crate::types::{sq_dist, ClassId, ClassRegistry, FeatureSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowNorm {
    #[default]
    L2,
    LInf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ds3Config {
    /// Absolute regularization weight; when `None`, `lambda_frac * lambda_max`.
    pub lambda: Option<f64>,
    pub lambda_frac: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub row_norm: RowNorm,
    /// Swap local search on the facility-location cost after ranking.
    pub refine: bool,
}

impl Default for Ds3Config {
    fn default() -> Self {
        Self {
            lambda: None,
            lambda_frac: 0.5,
            rho: 1.0,
            max_iters: 500,
            tol_primal: 1e-4,
            tol_dual: 1e-4,
            row_norm: RowNorm::L2,
            refine: true,
        }
    }
}

impl Ds3Config {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if let Some(l) = self.lambda {
            if !positive(l) {
                return invalid("lambda must be positive");
            }
        }
        if !positive(self.lambda_frac) || !positive(self.rho) {
            return invalid("lambda_frac and rho must be positive");
        }
        if self.max_iters == 0 || !positive(self.tol_primal) || !positive(self.tol_dual) {
            return invalid("max_iters and tolerances must be positive");
        }
        Ok(())
    }
}

/// Trace of one ADMM solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ds3Report {
    pub lambda: f64,
    pub lambda_max: f64,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Augmented Lagrangian after each full iteration.
    pub objective_history: Vec<f64>,
    /// `|C_k - C_{k+1}|^2 * rho + |L_k - L_{k+1}|^2 / rho` after each iteration.
    pub residual_history: Vec<f64>,
    /// Row norms of the final `Z`.
    pub row_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ds3Selection {
    /// Selected row indices, ascending.
    pub indices: Vec<usize>,
    /// Facility-location cost of `indices`.
    pub cost: f64,
    /// `None` when no solve was needed (`m == N`).
    pub report: Option<Ds3Report>,
}

/// Square dissimilarity matrix, row-major.
pub(crate) fn dissimilarities(fs: &FeatureSet) -> Vec<f64> {
    let n = fs.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(fs.row(i), fs.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Smallest regularization weight at which a single representative is optimal.
pub fn lambda_max(d: &[f64], n: usize, norm: RowNorm) -> f64 {
    let sums: Vec<f64> = d.chunks_exact(n).map(|r| r.iter().sum()).collect();
    let best = (0..n).fold(0, |b, i| if sums[i] < sums[b] { i } else { b });
    let mut out: f64 = 0.0;
    for i in (0..n).filter(|&i| i != best) {
        let delta: Vec<f64> = (0..n).map(|j| d[i * n + j] - d[best * n + j]).collect();
        let total: f64 = delta.iter().sum();
        let v = match norm {
            RowNorm::L2 => {
                if total <= 0.0 {
                    continue;
                }
                (n as f64).sqrt() * delta.iter().map(|x| x * x).sum::<f64>() / (2.0 * total)
            }
            RowNorm::LInf => delta.iter().map(|x| x.abs()).sum::<f64>() / 2.0,
        };
        out = out.max(v);
    }
    out
}

/// Euclidean projection of `v` onto the probability simplex, in place.
fn project_simplex(v: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in scratch.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

/// Proximal map of `t * |.|_q` restricted to the nonnegative orthant.
fn prox_row(v: &mut [f64], t: f64, norm: RowNorm, scratch: &mut Vec<f64>) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    match norm {
        RowNorm::L2 => {
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if len > t { 1.0 - t / len } else { 0.0 };
            v.iter_mut().for_each(|x| *x *= scale);
        }
        RowNorm::LInf => {
            // Moreau: prox of t*|.|_inf is v minus its projection onto the l1 ball of radius t.
            let l1: f64 = v.iter().sum();
            if l1 <= t {
                v.iter_mut().for_each(|x| *x = 0.0);
                return;
            }
            scratch.clear();
            scratch.extend_from_slice(v);
            scratch.sort_unstable_by(|a, b| b.total_cmp(a));
            let mut cum = 0.0;
            let mut theta = 0.0;
            for (k, &u) in scratch.iter().enumerate() {
                cum += u;
                let th = (cum - t) / (k + 1) as f64;
                if u - th > 0.0 {
                    theta = th;
                }
            }
            v.iter_mut().for_each(|x| *x = x.min(theta.max(0.0)));
        }
    }
}

fn row_norm(row: &[f64], norm: RowNorm) -> f64 {
    match norm {
        RowNorm::L2 => row.iter().map(|x| x * x).sum::<f64>().sqrt(),
        RowNorm::LInf => row.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

/// Run ADMM on a precomputed `n x n` dissimilarity matrix.
pub fn solve_ds3(d: &[f64], n: usize, cfg: &Ds3Config) -> Result<Ds3Report> {
    cfg.validate()?;
    if d.len() != n * n || n == 0 {
        return invalid("dissimilarity matrix must be square and non-empty");
    }
    if d.iter().any(|v| !v.is_finite()) {
        return invalid("dissimilarities must be finite");
    }
    let lmax = lambda_max(d, n, cfg.row_norm);
    let lambda = cfg
        .lambda
        .unwrap_or(cfg.lambda_frac * if lmax > 0.0 { lmax } else { 1.0 });
    let rho = cfg.rho;

    let mut z = vec![0.0; n * n];
    let mut c = vec![1.0 / n as f64; n * n];
    let mut dual = vec![0.0; n * n];
    let mut c_prev = c.clone();
    let mut col = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    let mut objective_history = Vec::new();
    let mut residual_history = Vec::new();
    let (mut primal, mut dual_res) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = &mut z[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = c[i * n + j] - dual[i * n + j] / rho;
            }
            prox_row(row, lambda / rho, cfg.row_norm, &mut scratch);
        }
        c_prev.copy_from_slice(&c);
        for j in 0..n {
            for i in 0..n {
                let k = i * n + j;
                col[i] = z[k] + (dual[k] - d[k]) / rho;
            }
            project_simplex(&mut col, &mut scratch);
            for i in 0..n {
                c[i * n + j] = col[i];
            }
        }
        let mut dual_step = 0.0;
        primal = 0.0;
        dual_res = 0.0;
        let mut c_step = 0.0;
        for k in 0..n * n {
            let r = z[k] - c[k];
            dual[k] += rho * r;
            dual_step += (rho * r) * (rho * r);
            primal = f64::max(primal, r.abs());
            let s = c[k] - c_prev[k];
            c_step += s * s;
            dual_res = f64::max(dual_res, rho * s.abs());
        }
        for j in 0..n {
            let sum: f64 = (0..n).map(|i| z[i * n + j]).sum();
            primal = primal.max((sum - 1.0).abs());
        }
        objective_history.push(augmented_lagrangian(d, &z, &c, &dual, n, lambda, rho, cfg.row_norm));
        residual_history.push(rho * c_step + dual_step / rho);
        if primal <= cfg.tol_primal && dual_res <= cfg.tol_dual {
            converged = true;
            break;
        }
    }
    if !converged {
        tracing::warn!(iterations, primal, dual = dual_res, "ADMM did not converge; using last iterate");
    }
    let row_norms = z.chunks_exact(n).map(|r| row_norm(r, cfg.row_norm)).collect();
    Ok(Ds3Report {
        lambda,
        lambda_max: lmax,
        iterations,
        converged,
        primal_residual: primal,
        dual_residual: dual_res,
        objective_history,
        residual_history,
        row_norms,
    })
}

#[allow(clippy::too_many_arguments)]
fn augmented_lagrangian(
    d: &[f64],
    z: &[f64],
    c: &[f64],
    dual: &[f64],
    n: usize,
    lambda: f64,
    rho: f64,
    norm: RowNorm,
) -> f64 {
    let rows: f64 = z.chunks_exact(n).map(|r| row_norm(r, norm)).sum();
    let mut linear = 0.0;
    let mut coupling = 0.0;
    let mut penalty = 0.0;
    for k in 0..n * n {
        let r = z[k] - c[k];
        linear += d[k] * c[k];
        coupling += dual[k] * r;
        penalty += r * r;
    }
    lambda * rows + linear + coupling + 0.5 * rho * penalty
}

/// `sum_j min_{i in S} d_ij`.
pub fn facility_cost(d: &[f64], n: usize, selected: &[usize]) -> f64 {
    (0..n)
        .map(|j| selected.iter().map(|&i| d[i * n + j]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Best-improvement single-swap local search on the facility-location cost.
fn swap_refine(d: &[f64], n: usize, selected: &mut [usize]) {
    let m = selected.len();
    let mut in_set = vec![false; n];
    selected.iter().for_each(|&i| in_set[i] = true);
    let scale = d.iter().fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
    for _ in 0..n * m {
        // Nearest and second-nearest selected distance per point.
        let mut near = vec![(f64::INFINITY, usize::MAX); n];
        let mut second = vec![f64::INFINITY; n];
        for (slot, &i) in selected.iter().enumerate() {
            for j in 0..n {
                let v = d[i * n + j];
                if v < near[j].0 {
                    second[j] = near[j].0;
                    near[j] = (v, slot);
                } else if v < second[j] {
                    second[j] = v;
                }
            }
        }
        let current: f64 = near.iter().map(|p| p.0).sum();
        let mut best = (current - 1e-12 * scale, None);
        for slot in 0..m {
            for cand in (0..n).filter(|&c| !in_set[c]) {
                let cost: f64 = (0..n)
                    .map(|j| {
                        let keep = if near[j].1 == slot { second[j] } else { near[j].0 };
                        keep.min(d[cand * n + j])
                    })
                    .sum();
                if cost < best.0 {
                    best = (cost, Some((slot, cand)));
                }
            }
        }
        let Some((slot, cand)) = best.1 else { break };
        in_set[selected[slot]] = false;
        in_set[cand] = true;
        selected[slot] = cand;
    }
}

/// Select `m` representative rows of a single-class feature set.
pub fn ds3_select(fs: &FeatureSet, m: usize, cfg: &Ds3Config) -> Result<Ds3Selection> {
    let n = fs.len();
    if n == 0 || m == 0 || m > n {
        return invalid(format!("need 1 <= m <= N, got m={m}, N={n}"));
    }
    let d = dissimilarities(fs);
    select_from_dissimilarities(&d, n, m, cfg)
}

pub fn select_from_dissimilarities(d: &[f64], n: usize, m: usize, cfg: &Ds3Config) -> Result<Ds3Selection> {
    if m == 0 || m > n {
        return invalid(format!("need 1 <= m <= N, got m={m}, N={n}"));
    }
    if m == n {
        cfg.validate()?;
        let indices: Vec<usize> = (0..n).collect();
        return Ok(Ds3Selection { cost: facility_cost(d, n, &indices), indices, report: None });
    }
    let report = solve_ds3(d, n, cfg)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| report.row_norms[b].total_cmp(&report.row_norms[a]).then(a.cmp(&b)));
    let mut indices = order[..m].to_vec();
    if cfg.refine {
        swap_refine(d, n, &mut indices);
    }
    indices.sort_unstable();
    Ok(Ds3Selection { cost: facility_cost(d, n, &indices), indices, report: Some(report) })
}

/// Fixed-capacity labeled replay memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarBuffer {
    capacity: usize,
    entries: FeatureSet,
    per_class_quota: BTreeMap<ClassId, usize>,
}

/// JSON sidecar written next to an exemplar archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSidecar {
    pub capacity: usize,
    pub per_class_quota: BTreeMap<ClassId, usize>,
    pub selected_ids: BTreeMap<ClassId, Vec<u64>>,
}

impl ExemplarBuffer {
    /// Wrap an already-selected set; checks the buffer invariants.
    pub fn new(capacity: usize, entries: FeatureSet, per_class_quota: BTreeMap<ClassId, usize>) -> Result<Self> {
        let buffer = Self { capacity, entries, per_class_quota };
        buffer.check()?;
        Ok(buffer)
    }

    fn check(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Validation(format!(
                "buffer holds {} entries, capacity is {}",
                self.entries.len(),
                self.capacity
            )));
        }
        let counts: BTreeMap<ClassId, usize> = self
            .entries
            .require_labels()?
            .iter()
            .fold(BTreeMap::new(), |mut m, &l| {
                *m.entry(l).or_default() += 1;
                m
            });
        let quotas: BTreeMap<ClassId, usize> = self
            .per_class_quota
            .iter()
            .filter(|(_, &q)| q > 0)
            .map(|(&c, &q)| (c, q))
            .collect();
        if counts != quotas {
            return Err(Error::Validation("per-class counts do not match quotas".into()));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &FeatureSet {
        &self.entries
    }

    pub fn per_class_quota(&self) -> &BTreeMap<ClassId, usize> {
        &self.per_class_quota
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.per_class_quota.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sidecar(&self) -> SelectionSidecar {
        let labels = self.entries.labels().unwrap_or_default();
        let mut selected_ids: BTreeMap<ClassId, Vec<u64>> = BTreeMap::new();
        for (i, &id) in self.entries.ids().iter().enumerate() {
            selected_ids.entry(labels[i]).or_default().push(id);
        }
        SelectionSidecar {
            capacity: self.capacity,
            per_class_quota: self.per_class_quota.clone(),
            selected_ids,
        }
    }

    /// Store as a feature archive with the capacity and quotas in its metadata.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("exemplar_capacity".to_string(), self.capacity.into());
        meta.insert(
            "per_class_quota".to_string(),
            serde_json::to_value(&self.per_class_quota)?,
        );
        ingest::write_archive_with(&self.entries, path, Dtype::F64, None, meta)
    }

    /// Read a buffer archive; plain labeled archives are accepted with
    /// capacity = row count and quotas = class counts.
    pub fn read(path: &Path) -> Result<Self> {
        let (entries, header) = ingest::read_archive_with_header(path)?;
        let counts = entries
            .class_indices()
            .into_iter()
            .map(|(c, idx)| (c, idx.len()))
            .collect::<BTreeMap<_, _>>();
        let capacity = match header.metadata.get("exemplar_capacity") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Validation("exemplar_capacity must be an integer".into()))?
                as usize,
            None => entries.len(),
        };
        let per_class_quota = match header.metadata.get("per_class_quota") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => counts,
        };
        Self::new(capacity, entries, per_class_quota)
    }
}

/// Round-robin quota allocation in ascending class order: every class with
/// unselected instances receives one more slot per round until the budget
/// runs out.
pub fn allocate_quotas(available: &BTreeMap<ClassId, usize>, capacity: usize) -> BTreeMap<ClassId, usize> {
    let mut quota: BTreeMap<ClassId, usize> = available.keys().map(|&c| (c, 0)).collect();
    let mut budget = capacity;
    loop {
        let open: Vec<ClassId> = available
            .iter()
            .filter(|(c, &n)| quota[c] < n)
            .map(|(&c, _)| c)
            .collect();
        if open.is_empty() || budget == 0 {
            break;
        }
        // Whole rounds at once when every open class can absorb them.
        let headroom = open.iter().map(|c| available[c] - quota[c]).min().unwrap_or(0);
        let rounds = (budget / open.len()).min(headroom);
        if rounds > 0 {
            open.iter().for_each(|c| *quota.get_mut(c).unwrap() += rounds);
            budget -= rounds * open.len();
            continue;
        }
        for c in open {
            if budget == 0 {
                break;
            }
            *quota.get_mut(&c).unwrap() += 1;
            budget -= 1;
        }
    }
    quota
}

/// Run the selector independently on every known class.
pub fn select_exemplars(
    fs: &FeatureSet,
    registry: &ClassRegistry,
    capacity: usize,
    cfg: &Ds3Config,
) -> Result<ExemplarBuffer> {
    cfg.validate()?;
    let labels = fs
        .labels()
        .ok_or_else(|| Error::InvalidArgument("exemplar selection needs labeled rows".into()))?;
    if capacity < registry.known.len() {
        return invalid(format!(
            "capacity {capacity} is below the number of known classes {}",
            registry.known.len()
        ));
    }
    if let Some(bad) = labels.iter().find(|l| !registry.known.contains(l)) {
        return invalid(format!("label {bad} is not a known class"));
    }
    let by_class = fs.class_indices();
    if let Some(missing) = registry.known.iter().find(|c| !by_class.contains_key(c)) {
        return invalid(format!("known class {missing} has no instances"));
    }
    let available = by_class.iter().map(|(&c, idx)| (c, idx.len())).collect();
    let quotas = allocate_quotas(&available, capacity);

    let picks: Vec<Result<Vec<usize>>> = by_class
        .par_iter()
        .map(|(class, rows)| {
            let m = quotas[class];
            if m == 0 {
                return Ok(Vec::new());
            }
            let sub = fs.select(rows);
            let sel = ds3_select(&sub, m, cfg)?;
            if let Some(report) = sel.report.as_ref().filter(|r| !r.converged) {
                tracing::warn!(class, iterations = report.iterations, "exemplar solve hit max_iters");
            }
            Ok(sel.indices.into_iter().map(|i| rows[i]).collect())
        })
        .collect();
    let mut chosen = Vec::with_capacity(capacity);
    for p in picks {
        chosen.extend(p?);
    }
    let entries = fs.select(&chosen);
    ExemplarBuffer::new(capacity, entries, quotas)
}
