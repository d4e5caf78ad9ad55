//! Category discovery: semi-supervised k-means++ and class-count estimation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ingest::{read_archive, write_archive, Dtype};
use crate::exemplar::ExemplarBuffer;
use crate::metrics::{clustering_accuracy, silhouette_subset, SilhouetteMode};
use crate::rng::Rng;
use crate::types::{sq_dist, ClassId, FeatureSet, PartitionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsKmeansConfig {
    /// Total number of clusters, known classes included.
    pub k: usize,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid shift.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Id of the first fresh cluster; defaults to the largest supervised label + 1.
    pub first_novel_id: Option<ClassId>,
}

impl Default for SsKmeansConfig {
    fn default() -> Self {
        Self { k: 0, max_iters: 300, tol: 1e-6, restarts: 5, seed: 0, first_novel_id: None }
    }
}

/// Clustering of `supervised ++ unlabeled`; rows are indexed in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct SsKmeansResult {
    pub partition: PartitionResult,
    pub num_supervised: usize,
    /// Inertia after the first assignment of the winning restart.
    pub initial_inertia: f64,
    /// Inertia after every centroid update of the winning restart.
    pub inertia_history: Vec<f64>,
    /// Whether every supervised row sat in its own class cluster at every assignment.
    pub forced_labels_held: bool,
}

impl SsKmeansResult {
    pub fn unlabeled_assignments(&self) -> &[ClassId] {
        &self.partition.assignments[self.num_supervised..]
    }
}

/// Unlabeled row stack with positional ids; source ids may collide.
fn stack(parts: &[&FeatureSet]) -> Result<FeatureSet> {
    let dim = parts.iter().find(|p| !p.is_empty()).map_or(1, |p| p.dim());
    if parts.iter().any(|p| !p.is_empty() && p.dim() != dim) {
        return invalid("cannot stack feature sets of different dimension");
    }
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let n = (data.len() / dim) as u64;
    FeatureSet::new(data, dim, (0..n).collect(), None, None)
}

struct Run {
    assign: Vec<usize>,
    centroids: Vec<f64>,
    iterations: usize,
    inertia: f64,
    initial: f64,
    history: Vec<f64>,
    forced_ok: bool,
}

pub fn ss_kmeans_pp(supervised: &FeatureSet, unlabeled: &FeatureSet, cfg: &SsKmeansConfig) -> Result<SsKmeansResult> {
    let labels = supervised.require_labels()?;
    if unlabeled.is_empty() {
        return invalid("ss-k-means needs at least one unlabeled row");
    }
    if !supervised.is_empty() && supervised.dim() != unlabeled.dim() {
        return invalid("supervised and unlabeled rows differ in dimension");
    }
    if cfg.max_iters == 0 || cfg.restarts == 0 || !(cfg.tol >= 0.0) {
        return invalid("max_iters and restarts must be positive, tol non-negative");
    }
    let known: Vec<ClassId> = supervised.classes().into_iter().collect();
    if cfg.k < known.len() {
        return invalid(format!("k = {} is below the {} supervised classes", cfg.k, known.len()));
    }
    if cfg.k == 0 {
        return invalid("k must be positive");
    }
    if cfg.k - known.len() > unlabeled.len() {
        return invalid(format!(
            "{} fresh clusters requested for {} unlabeled rows",
            cfg.k - known.len(),
            unlabeled.len()
        ));
    }
    let dim = unlabeled.dim();
    let data = stack(&[supervised, unlabeled])?;
    let index: BTreeMap<ClassId, usize> = known.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let forced: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let mut known_means = vec![0.0; known.len() * dim];
    for (c, mean) in supervised.class_means()? {
        known_means[index[&c] * dim..(index[&c] + 1) * dim].copy_from_slice(&mean);
    }

    let runs: Vec<Run> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = Rng::stream(cfg.seed, r as u64);
            lloyd(&data, &forced, &known_means, cfg, &mut rng)
        })
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("at least one restart");

    let first_novel = cfg.first_novel_id.unwrap_or(known.last().map_or(1, |m| m + 1));
    let cluster_ids: Vec<ClassId> = known
        .iter()
        .copied()
        .chain((0..(cfg.k - known.len()) as ClassId).map(|i| first_novel + i))
        .collect();
    if cluster_ids.iter().collect::<BTreeSet<_>>().len() != cluster_ids.len() {
        return invalid("fresh cluster ids collide with supervised labels");
    }
    let centroids = cluster_ids
        .iter()
        .enumerate()
        .map(|(c, &id)| (id, best.centroids[c * dim..(c + 1) * dim].to_vec()))
        .collect();
    let partition = PartitionResult {
        assignments: best.assign.iter().map(|&c| cluster_ids[c]).collect(),
        centroids,
        known_labels: known.iter().copied().collect(),
        novel_labels: cluster_ids[known.len()..].iter().copied().collect(),
        iterations: best.iterations,
        inertia: best.inertia,
    };
    Ok(SsKmeansResult {
        partition,
        num_supervised: supervised.len(),
        initial_inertia: best.initial,
        inertia_history: best.history,
        forced_labels_held: best.forced_ok,
    })
}

fn nearest(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .fold((0, f64::INFINITY), |best, (c, m)| {
            let d = sq_dist(row, m);
            if d < best.1 {
                (c, d)
            } else {
                best
            }
        })
}

/// One seeded Lloyd run. Rows `0..forced.len()` are pinned to their class.
fn lloyd(data: &FeatureSet, forced: &[usize], known_means: &[f64], cfg: &SsKmeansConfig, rng: &mut Rng) -> Run {
    let dim = data.dim();
    let n = data.len();
    let n_sup = forced.len();
    let k = cfg.k;
    let mut centroids = known_means.to_vec();

    // D^2 seeding over the unlabeled rows.
    let mut dist: Vec<f64> = (n_sup..n)
        .map(|i| {
            if centroids.is_empty() {
                f64::INFINITY
            } else {
                nearest(data.row(i), &centroids, dim).1
            }
        })
        .collect();
    while centroids.len() < k * dim {
        let pick = if dist.iter().all(|d| d.is_infinite()) {
            rng.below(dist.len())
        } else {
            match rng.weighted_index(&dist) {
                Some(i) => i,
                // Every unlabeled row coincides with a centroid.
                None => rng.below(dist.len()),
            }
        };
        let row = data.row(n_sup + pick).to_vec();
        for (j, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(n_sup + j), &row));
        }
        centroids.extend(row);
    }

    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let assign_step = |centroids: &[f64], assign: &mut [usize], dists: &mut [f64]| {
        assign
            .par_iter_mut()
            .zip(dists.par_iter_mut())
            .enumerate()
            .for_each(|(i, (a, d))| {
                if i < n_sup {
                    *a = forced[i];
                    *d = sq_dist(data.row(i), &centroids[forced[i] * dim..(forced[i] + 1) * dim]);
                } else {
                    (*a, *d) = nearest(data.row(i), centroids, dim);
                }
            });
    };
    let inertia_of = |centroids: &[f64], assign: &[usize]| -> f64 {
        (0..n)
            .map(|i| sq_dist(data.row(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim]))
            .sum()
    };

    assign_step(&centroids, &mut assign, &mut dists);
    let initial = dists.iter().sum();
    let mut history = Vec::new();
    let mut forced_ok = (0..n_sup).all(|i| assign[i] == forced[i]);
    let mut iterations = 0;
    loop {
        iterations += 1;
        // Update.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            sums[assign[i] * dim..(assign[i] + 1) * dim]
                .iter_mut()
                .zip(data.row(i))
                .for_each(|(s, v)| *s += v);
        }
        let mut new_centroids = centroids.clone();
        let mut taken = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                new_centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                    .for_each(|(m, s)| *m = s / counts[c] as f64);
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in empty {
            // Re-seed at the unlabeled row farthest from its centroid whose
            // cluster keeps at least one other member.
            let far = (n_sup..n)
                .filter(|&i| counts[assign[i]] > 1 && !taken.contains(&i))
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken.insert(i);
                counts[assign[i]] -= 1;
                new_centroids[c * dim..(c + 1) * dim].copy_from_slice(data.row(i));
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(&centroids[c * dim..(c + 1) * dim], &new_centroids[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        history.push(inertia_of(&centroids, &assign));
        if shift <= cfg.tol || iterations >= cfg.max_iters {
            break;
        }
        assign_step(&centroids, &mut assign, &mut dists);
        forced_ok &= (0..n_sup).all(|i| assign[i] == forced[i]);
    }
    // Final assignment against the final centroids.
    assign_step(&centroids, &mut assign, &mut dists);
    forced_ok &= (0..n_sup).all(|i| assign[i] == forced[i]);
    let inertia = dists.iter().sum();
    Run { assign, centroids, iterations, inertia, initial, history, forced_ok }
}

const GOLD: f64 = 0.381_966_011_250_105_1;
const GROW: f64 = 1.618_033_988_749_895;

/// Brent's method for minimizing a scalar function on `[a, b]`, starting at
/// the golden-section point. `f` returning `None` stops the search.
pub fn brent_minimize(
    f: impl FnMut(f64) -> Option<f64>,
    a: f64,
    b: f64,
    tol: f64,
    max_iter: usize,
) -> Option<(f64, f64)> {
    brent_from(f, a, b, a + GOLD * (b - a), tol, max_iter)
}

/// A downhill bracket: `f(b) <= f(a)` and `f(b) <= f(c)` unless a bound was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Walk downhill from `a`, `b` with golden-ratio growing steps until the
/// function rises again or the search leaves `[lo, hi]`.
pub fn bracket_minimum(
    mut f: impl FnMut(f64) -> Option<f64>,
    mut a: f64,
    mut b: f64,
    lo: f64,
    hi: f64,
    max_steps: usize,
) -> Option<Bracket> {
    let fa = f(a)?;
    let mut fb = f(b)?;
    if fb > fa {
        (a, b) = (b, a);
        fb = fa;
    }
    for _ in 0..max_steps {
        let c = (b + GROW * (b - a)).clamp(lo, hi);
        if c == b {
            return Some(Bracket { a, b, c });
        }
        let fc = f(c)?;
        if fc >= fb {
            return Some(Bracket { a, b, c });
        }
        (a, b) = (b, c);
        fb = fc;
    }
    Some(Bracket { a, b, c: b })
}

/// Brent's method on `[a, b]` starting from `x0` inside it.
pub fn brent_from(
    mut f: impl FnMut(f64) -> Option<f64>,
    mut a: f64,
    mut b: f64,
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> Option<(f64, f64)> {
    let mut x = x0.clamp(a, b);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e): (f64, f64) = (0.0, 0.0);
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if !(p.abs() >= (0.5 * q * etemp).abs() || p <= q * (a - x) || p >= q * (b - x)) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let Some(fu) = f(u) else { break };
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, w, x) = (w, x, u);
            (fv, fw, fx) = (fw, fx, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, w) = (w, u);
                (fv, fw) = (fw, fu);
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Some((x, fx))
}

/// Evaluations allowed beyond `max_evals` for the integer refinement.
pub const REFINE_EVALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub k_max: usize,
    pub max_evals: usize,
    pub seed: u64,
    pub silhouette: SilhouetteMode,
    /// Lloyd settings used for every score evaluation (`k` is ignored).
    pub kmeans: SsKmeansConfig,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            k_max: 500,
            max_evals: 20,
            seed: 0,
            silhouette: SilhouetteMode::Mean,
            kmeans: SsKmeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTerms {
    pub acc: f64,
    pub sc: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCountEstimate {
    pub k: usize,
    pub anchor: Vec<ClassId>,
    pub validation: Vec<ClassId>,
    /// Search interval actually used: `(lower, upper]`.
    pub lower: usize,
    pub upper: usize,
    /// Every evaluated `k`, each evaluated once.
    pub scores: BTreeMap<usize, ScoreTerms>,
    /// Evaluation order, refinement included.
    pub trace: Vec<usize>,
    pub at_boundary: bool,
}

impl ClassCountEstimate {
    pub fn evaluations(&self) -> usize {
        self.scores.len()
    }
}

/// Split classes 2:1 into anchor and validation; single-exemplar classes
/// always go to the anchor side.
fn split_classes(entries: &FeatureSet, rng: &mut Rng) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let by_class = entries.class_indices();
    let n = by_class.len();
    let mut eligible: Vec<ClassId> = by_class.iter().filter(|(_, r)| r.len() > 1).map(|(&c, _)| c).collect();
    if eligible.is_empty() {
        eligible = by_class.keys().copied().collect();
    }
    rng.shuffle(&mut eligible);
    let n_val = ((n as f64 / 3.0).round() as usize).clamp(1, n - 1).min(eligible.len());
    let validation: BTreeSet<ClassId> = eligible[..n_val].iter().copied().collect();
    let anchor = by_class.keys().copied().filter(|c| !validation.contains(c)).collect();
    Ok((anchor, validation.into_iter().collect()))
}

/// Estimate the total class count among exemplars and rejected rows.
pub fn estimate_class_count(
    buffer: &ExemplarBuffer,
    rejected: &FeatureSet,
    cfg: &EstimationConfig,
    rng: &mut Rng,
) -> Result<ClassCountEstimate> {
    let entries = buffer.entries();
    let labels = entries.require_labels()?;
    let n_classes = entries.classes().len();
    if n_classes < 3 {
        return invalid(format!("class-count estimation needs at least 3 known classes, got {n_classes}"));
    }
    if rejected.is_empty() {
        return invalid("class-count estimation needs rejected rows");
    }
    if cfg.max_evals == 0 {
        return invalid("max_evals must be positive");
    }
    let (anchor, validation) = split_classes(entries, rng)?;
    let anchor_set: BTreeSet<ClassId> = anchor.iter().copied().collect();
    let anchor_rows = entries.filter(|i| anchor_set.contains(&labels[i]));
    let val_rows = entries.filter(|i| !anchor_set.contains(&labels[i]));
    let val_truth = val_rows.labels().expect("labeled").to_vec();
    let unlabeled = stack(&[&val_rows, rejected])?;

    let lower = anchor.len();
    let upper = cfg.k_max.min(lower + unlabeled.len());
    if upper <= lower {
        return invalid(format!("empty search interval ({lower}, {upper}]"));
    }
    if upper < cfg.k_max {
        tracing::debug!(upper, k_max = cfg.k_max, "upper bound clamped to anchor classes + unlabeled rows");
    }

    let n_val = val_rows.len();
    let everything = stack(&[&anchor_rows, &unlabeled])?;
    let score = |k: usize| -> Result<ScoreTerms> {
        let km = SsKmeansConfig { k, seed: Rng::stream(cfg.seed, k as u64).next_u64(), ..cfg.kmeans.clone() };
        let res = ss_kmeans_pp(&anchor_rows, &unlabeled, &km)?;
        let assigned = res.unlabeled_assignments();
        // Anchor clusters keep their ground-truth ids, so a validation row
        // landing in one is a miss rather than a matching candidate.
        let free: Vec<usize> = (0..n_val).filter(|&i| !anchor_set.contains(&assigned[i])).collect();
        let acc = if free.is_empty() {
            0.0
        } else {
            let t: Vec<ClassId> = free.iter().map(|&i| val_truth[i]).collect();
            let p: Vec<ClassId> = free.iter().map(|&i| assigned[i]).collect();
            clustering_accuracy(&t, &p)?.0 * free.len() as f64 / n_val as f64
        };
        // Rejected rows are scored against the whole partition, so a novel
        // group absorbed by an anchor cluster pays for its distance to the
        // anchor exemplars.
        let all = &res.partition.assignments;
        let rows: Vec<usize> = (all.len() - rejected.len()..all.len()).collect();
        let sc = silhouette_subset(&everything, all, &rows, cfg.silhouette)?;
        Ok(ScoreTerms { acc, sc, score: acc + sc })
    };

    let mut scores: BTreeMap<usize, ScoreTerms> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut failure = None;
    // The search runs over ln k so the coarse large-k region does not
    // dominate the bracket.
    let to_k = |x: f64| (x.exp().round() as i64).clamp(lower as i64 + 1, upper as i64) as usize;
    let mut eval = |k: usize, scores: &mut BTreeMap<usize, ScoreTerms>, trace: &mut Vec<usize>| -> Option<f64> {
        if let Some(s) = scores.get(&k) {
            return Some(s.score);
        }
        match score(k) {
            Ok(s) => {
                let v = s.score;
                scores.insert(k, s);
                trace.push(k);
                Some(v)
            }
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    };
    let mut objective = |x: f64| {
        let k = to_k(x);
        if !scores.contains_key(&k) && scores.len() >= cfg.max_evals {
            return None;
        }
        eval(k, &mut scores, &mut trace).map(|s| -s)
    };
    // Bracket upward from the smallest admissible k, then refine with Brent.
    let lo = (lower as f64 + 0.5).ln();
    let hi = (upper as f64 + 0.5).ln();
    let first = ((lower + 1) as f64).ln();
    let second = ((lower + 2).min(upper) as f64).ln();
    if let Some(br) = bracket_minimum(&mut objective, first, second, lo, hi, 64) {
        let (a, c) = (br.a.min(br.c), br.a.max(br.c));
        let tol = 0.5 / (c.exp() + 0.5);
        if c > a {
            brent_from(&mut objective, a, c, br.b, tol, 200);
        }
    }
    let incumbent = |scores: &BTreeMap<usize, ScoreTerms>| {
        scores
            .iter()
            .fold(None::<(usize, f64)>, |best, (&k, s)| match best {
                Some((_, b)) if b >= s.score => best,
                _ => Some((k, s.score)),
            })
            .map(|(k, _)| k)
    };
    // Integer hill-climb: re-centre the +-2 neighbourhood on every new
    // incumbent, within the refinement allowance.
    let cap = cfg.max_evals + REFINE_EVALS;
    let mut centre = None;
    'climb: while let Some(best) = incumbent(&scores) {
        if centre == Some(best) {
            break;
        }
        centre = Some(best);
        for k in best.saturating_sub(2)..=best + 2 {
            if k > lower && k <= upper && !scores.contains_key(&k) && scores.len() < cap
                && eval(k, &mut scores, &mut trace).is_none() {
                    break 'climb;
                }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let k = incumbent(&scores).expect("at least one evaluation");
    let at_boundary = k + 1 >= upper && upper > lower + 2;
    if at_boundary {
        tracing::warn!(k, upper, "class-count estimate sits at the upper end of the search interval");
    }
    Ok(ClassCountEstimate { k, anchor, validation, lower, upper, scores, trace, at_boundary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub estimate: ClassCountEstimate,
    /// Cluster count actually used (at least the number of known classes).
    pub k: usize,
    /// Clustering of `buffer ++ rejected`.
    pub clustering: SsKmeansResult,
    /// Cluster label of every rejected row, in input order.
    pub rejected_assignments: Vec<ClassId>,
    /// Rejected rows that landed in known-class clusters, labeled with that class.
    pub returned_to_known: FeatureSet,
    /// Rejected rows in fresh clusters, labeled with their cluster id.
    pub novel: FeatureSet,
}

pub fn discover_categories(
    buffer: &ExemplarBuffer,
    rejected: &FeatureSet,
    est: &EstimationConfig,
    km: &SsKmeansConfig,
    rng: &mut Rng,
) -> Result<Discovery> {
    let estimate = estimate_class_count(buffer, rejected, est, rng)?;
    let known = buffer.entries().classes().len();
    let k = if estimate.k <= known {
        tracing::warn!(estimate = estimate.k, known, "estimate leaves no room for new classes");
        known
    } else {
        estimate.k.min(known + rejected.len())
    };
    let clustering = ss_kmeans_pp(buffer.entries(), &rejected.clone().without_labels(), &SsKmeansConfig { k, ..km.clone() })?;
    let rejected_assignments = clustering.unlabeled_assignments().to_vec();
    let part = &clustering.partition;
    let plain = rejected.clone().without_labels();
    let known_rows: Vec<usize> = (0..rejected.len()).filter(|&i| !part.is_novel(rejected_assignments[i])).collect();
    let novel_rows: Vec<usize> = (0..rejected.len()).filter(|&i| part.is_novel(rejected_assignments[i])).collect();
    let returned_to_known = plain
        .select(&known_rows)
        .with_labels(known_rows.iter().map(|&i| rejected_assignments[i]).collect())?;
    let novel = plain
        .select(&novel_rows)
        .with_labels(novel_rows.iter().map(|&i| rejected_assignments[i]).collect())?;
    Ok(Discovery { estimate, k, clustering, rejected_assignments, returned_to_known, novel })
}

/// On-disk result of `discover run`: cluster id per clustered row plus
/// references to the clustered features and the centroid archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub features: PathBuf,
    pub centroids: PathBuf,
    pub known: BTreeSet<ClassId>,
    pub novel: BTreeSet<ClassId>,
    pub k: usize,
    pub assignments: BTreeMap<u64, ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<ClassCountEstimate>,
}

impl PartitionFile {
    /// Describe `discovery` of the rows stored at `features`, writing the
    /// centroid archive to `centroids`.
    pub fn from_discovery(discovery: &Discovery, rejected: &FeatureSet, features: &Path, centroids: &Path) -> Result<Self> {
        let mut pf = Self::from_clustering(&discovery.clustering, rejected, features, centroids)?;
        pf.k = discovery.k;
        pf.estimate = Some(discovery.estimate.clone());
        Ok(pf)
    }

    /// Same for a plain clustering of `buffer ++ rejected`.
    pub fn from_clustering(
        clustering: &SsKmeansResult,
        rejected: &FeatureSet,
        features: &Path,
        centroids: &Path,
    ) -> Result<Self> {
        let assigned = clustering.unlabeled_assignments();
        if rejected.len() != assigned.len() {
            return invalid("rejected rows do not match the clustering");
        }
        let part = &clustering.partition;
        let ids: Vec<u64> = part.centroids.keys().map(|&c| u64::from(c)).collect();
        let labels: Vec<ClassId> = part.centroids.keys().copied().collect();
        let data: Vec<f64> = part.centroids.values().flatten().copied().collect();
        let table = FeatureSet::new(data, rejected.dim(), ids, Some(labels), None)?;
        write_archive(&table, centroids, Dtype::F64)?;
        Ok(Self {
            features: features.to_path_buf(),
            centroids: centroids.to_path_buf(),
            known: part.known_labels.clone(),
            novel: part.novel_labels.clone(),
            k: part.centroids.len(),
            assignments: rejected.ids().iter().copied().zip(assigned.iter().copied()).collect(),
            estimate: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Relative archive paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut pf: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut pf.features, &mut pf.centroids] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        pf.validate()?;
        Ok(pf)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.known.is_disjoint(&self.novel) {
            return invalid("known and novel label sets overlap");
        }
        if let Some(c) = self.assignments.values().find(|c| !self.known.contains(c) && !self.novel.contains(c)) {
            return invalid(format!("cluster {c} is neither known nor novel"));
        }
        Ok(())
    }

    /// Rows in novel clusters, labeled with their cluster id.
    pub fn zhat(&self) -> Result<FeatureSet> {
        let fs = read_archive(&self.features)?.without_labels();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, id) in fs.ids().iter().enumerate() {
            match self.assignments.get(id) {
                Some(c) if self.novel.contains(c) => {
                    rows.push(i);
                    labels.push(*c);
                }
                Some(_) => {}
                None => return Err(Error::NotFound(format!("row {id} has no assignment"))),
            }
        }
        if fs.len() != self.assignments.len() {
            return invalid("partition assigns ids missing from the feature archive");
        }
        fs.select(&rows).with_labels(labels)
    }
}
