//! Shared domain types and numeric kernels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Class identifier. `0` is reserved for "unknown".
pub type ClassId = u32;

pub const UNKNOWN: ClassId = 0;

/// Row-major matrix of embeddings plus per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    data: Vec<f64>,
    dim: usize,
    ids: Vec<u64>,
    labels: Option<Vec<ClassId>>,
    uris: Option<Vec<String>>,
}

impl FeatureSet {
    pub fn new(
        data: Vec<f64>,
        dim: usize,
        ids: Vec<u64>,
        labels: Option<Vec<ClassId>>,
        uris: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("feature dimension must be at least 1");
        }
        if !data.len().is_multiple_of(dim) {
            return invalid(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            ));
        }
        let n = data.len() / dim;
        if ids.len() != n {
            return invalid(format!("{} ids for {n} rows", ids.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite entry in row {}", pos / dim));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return invalid("instance ids must be unique");
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return invalid(format!("{} labels for {n} rows", l.len()));
            }
        }
        if let Some(u) = &uris {
            if u.len() != n {
                return invalid(format!("{} uris for {n} rows", u.len()));
            }
        }
        Ok(Self {
            data,
            dim,
            ids,
            labels,
            uris,
        })
    }

    /// Rows with ids `0..n` and no metadata.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(data, dim, (0..rows.len() as u64).collect(), None, None)
    }

    pub fn labeled(rows: &[Vec<f64>], labels: &[ClassId]) -> Result<Self> {
        Self::from_rows(rows)?.with_labels(labels.to_vec())
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            data: Vec::new(),
            dim: dim.max(1),
            ids: Vec::new(),
            labels: None,
            uris: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.len() {
            return invalid(format!("{} labels for {} rows", labels.len(), self.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn with_uris(mut self, uris: Vec<String>) -> Result<Self> {
        if uris.len() != self.len() {
            return invalid(format!("{} uris for {} rows", uris.len(), self.len()));
        }
        self.uris = Some(uris);
        Ok(self)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    pub fn uris(&self) -> Option<&[String]> {
        self.uris.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[ClassId]> {
        match &self.labels {
            Some(l) => Ok(l),
            None if self.is_empty() => Ok(&[]),
            None => invalid("feature set is unlabeled"),
        }
    }

    /// Sorted distinct labels (empty when unlabeled).
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.labels
            .as_deref()
            .map(|l| l.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Row indices per class, in row order.
    pub fn class_indices(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        if let Some(labels) = &self.labels {
            for (i, &c) in labels.iter().enumerate() {
                out.entry(c).or_default().push(i);
            }
        }
        out
    }

    /// Subset of rows in the given order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureSet {
            data,
            dim: self.dim,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            uris: self
                .uris
                .as_ref()
                .map(|u| indices.iter().map(|&i| u[i].clone()).collect()),
        }
    }

    /// Rows for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> FeatureSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select(&idx)
    }

    /// Row-wise concatenation. Labels survive only if every non-empty part is
    /// labeled; URIs likewise (missing URIs become empty strings when mixed).
    pub fn concat(parts: &[&FeatureSet]) -> Result<FeatureSet> {
        let dim = match parts.iter().find(|p| !p.is_empty()) {
            Some(p) => p.dim,
            None => return Ok(FeatureSet::empty(parts.first().map_or(1, |p| p.dim))),
        };
        let nonempty: Vec<&&FeatureSet> = parts.iter().filter(|p| !p.is_empty()).collect();
        if nonempty.iter().any(|p| p.dim != dim) {
            return invalid("cannot concatenate feature sets of different dimension");
        }
        let all_labeled = nonempty.iter().all(|p| p.labels.is_some());
        let any_uris = nonempty.iter().any(|p| p.uris.is_some());
        let mut data = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut uris = Vec::new();
        for p in nonempty {
            data.extend_from_slice(&p.data);
            ids.extend_from_slice(&p.ids);
            if all_labeled {
                labels.extend_from_slice(p.labels.as_ref().unwrap());
            }
            if any_uris {
                match &p.uris {
                    Some(u) => uris.extend(u.iter().cloned()),
                    None => uris.extend(std::iter::repeat_n(String::new(), p.len())),
                }
            }
        }
        FeatureSet::new(
            data,
            dim,
            ids,
            all_labeled.then_some(labels),
            any_uris.then_some(uris),
        )
    }

    /// Per-class mean vectors.
    pub fn class_means(&self) -> Result<BTreeMap<ClassId, Vec<f64>>> {
        self.require_labels()?;
        let mut out = BTreeMap::new();
        for (c, idx) in self.class_indices() {
            let mut mean = vec![0.0; self.dim];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(self.row(i)) {
                    *m += v;
                }
            }
            let n = idx.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            out.insert(c, mean);
        }
        Ok(out)
    }
}

/// Phase-indexed bookkeeping of known and newly discovered classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub phase: u32,
    pub known: BTreeSet<ClassId>,
    pub discovered_this_phase: BTreeSet<ClassId>,
    pub max_total: usize,
    pub estimated_total: Option<usize>,
}

impl ClassRegistry {
    pub fn new(known: impl IntoIterator<Item = ClassId>, max_total: usize) -> Result<Self> {
        let reg = Self {
            phase: 0,
            known: known.into_iter().collect(),
            discovered_this_phase: BTreeSet::new(),
            max_total,
            estimated_total: None,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.known.contains(&UNKNOWN) || self.discovered_this_phase.contains(&UNKNOWN) {
            return invalid("class id 0 is reserved for unknown");
        }
        if !self.known.is_disjoint(&self.discovered_this_phase) {
            return invalid("discovered classes overlap known classes");
        }
        if self.known.len() >= self.max_total {
            return invalid(format!(
                "{} known classes reach the maximum of {}",
                self.known.len(),
                self.max_total
            ));
        }
        Ok(())
    }

    pub fn max_id(&self) -> ClassId {
        self.known
            .iter()
            .chain(&self.discovered_this_phase)
            .copied()
            .max()
            .unwrap_or(UNKNOWN)
    }
}

/// Closed-set probabilities augmented with an "unknown" score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPrediction {
    pub closed_probs: Vec<f64>,
    pub uncertainty: f64,
    /// Index 0 is the unknown class; index `j + 1` is `closed_probs[j]`.
    pub augmented_probs: Vec<f64>,
    pub decision: ClassId,
}

impl OpenSetPrediction {
    pub fn is_rejected(&self) -> bool {
        self.decision == UNKNOWN
    }
}

/// Assignment of rows to known classes or fresh clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub assignments: Vec<ClassId>,
    pub centroids: BTreeMap<ClassId, Vec<f64>>,
    pub known_labels: BTreeSet<ClassId>,
    pub novel_labels: BTreeSet<ClassId>,
    pub iterations: usize,
    pub inertia: f64,
}

impl PartitionResult {
    pub fn is_novel(&self, label: ClassId) -> bool {
        self.novel_labels.contains(&label)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.known_labels.is_disjoint(&self.novel_labels) {
            return invalid("known and novel label sets overlap");
        }
        for a in &self.assignments {
            if !self.known_labels.contains(a) && !self.novel_labels.contains(a) {
                return invalid(format!("assignment label {a} is neither known nor novel"));
            }
            if !self.centroids.contains_key(a) {
                return invalid(format!("assignment label {a} has no centroid"));
            }
        }
        if !(self.inertia >= 0.0) {
            return invalid("inertia must be non-negative");
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("softmax input must be finite");
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len()));
    }
    Ok(sq_dist(a, b))
}

/// Unchecked squared distance for hot loops; callers guarantee equal lengths.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if x <= v[b] => {}
            _ => best = Some(i),
        }
    }
    best
}
