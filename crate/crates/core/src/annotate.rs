//! Annotation of discovered clusters: a ground-truth oracle for automated
//! runs and an edit-log session for human correction.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::types::{ClassId, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OracleConfig {
    /// Probability that a kept row receives a wrong novel label.
    pub noise_rate: f64,
    pub seed: u64,
}

/// Ground-truth label per instance id.
pub fn truth_by_id(fs: &FeatureSet) -> Result<BTreeMap<u64, ClassId>> {
    let labels = fs.require_labels()?;
    Ok(fs.ids().iter().copied().zip(labels.iter().copied()).collect())
}

/// Drop known-class rows and relabel the rest to their true class.
///
/// With noise, a corrupted row gets a uniformly drawn novel label other than
/// its own (when another novel label exists among the kept rows).
pub fn oracle_annotate(
    zhat: &FeatureSet,
    truth: &BTreeMap<u64, ClassId>,
    known: &BTreeSet<ClassId>,
    cfg: &OracleConfig,
) -> Result<FeatureSet> {
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return invalid(format!("noise_rate must lie in [0, 1), got {}", cfg.noise_rate));
    }
    let mut labels = Vec::with_capacity(zhat.len());
    for id in zhat.ids() {
        match truth.get(id) {
            Some(&l) => labels.push(l),
            None => return invalid(format!("no ground-truth label for instance {id}")),
        }
    }
    let keep: Vec<usize> = (0..zhat.len()).filter(|&i| !known.contains(&labels[i])).collect();
    let mut kept: Vec<ClassId> = keep.iter().map(|&i| labels[i]).collect();
    if cfg.noise_rate > 0.0 {
        let novel: Vec<ClassId> = kept.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut rng = Rng::new(cfg.seed);
        for l in kept.iter_mut() {
            if rng.uniform() < cfg.noise_rate && novel.len() > 1 {
                let others: Vec<ClassId> = novel.iter().copied().filter(|c| c != l).collect();
                *l = others[rng.below(others.len())];
            }
        }
    }
    zhat.select(&keep).with_labels(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Move { instance: u64, to: ClassId },
    Remove { instance: u64 },
    /// Assign a class: an explicit novel id, or a name that gets a fresh id.
    Label {
        cluster: ClassId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class_id: Option<ClassId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Merge { from: ClassId, into: ClassId },
    /// Move the listed instances into a new cluster.
    Split { instances: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub instance: u64,
    pub from: ClassId,
    pub to: ClassId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub class_id: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePage {
    pub cluster: ClassId,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub instances: Vec<InstanceView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub instances: usize,
    pub removed: usize,
    pub nonempty_clusters: usize,
    pub labeled_clusters: usize,
    pub unlabeled_clusters: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub state: SessionState,
    pub clusters: BTreeMap<ClassId, Vec<u64>>,
    pub cluster_labels: BTreeMap<ClassId, ClassLabel>,
    pub removals: BTreeSet<u64>,
    pub moves: Vec<MoveRecord>,
    pub edits: usize,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Commit {
    /// Labeled rows in input order, removals excluded.
    pub z_n: FeatureSet,
    /// Classes present in `z_n`, with their names when given.
    pub new_classes: BTreeMap<ClassId, Option<String>>,
}

#[derive(Debug, Clone)]
pub struct AnnotationSession {
    session_id: String,
    zhat: FeatureSet,
    known: BTreeSet<ClassId>,
    row_of: BTreeMap<u64, usize>,
    projection: Vec<[f64; 2]>,
    clusters: BTreeMap<ClassId, Vec<u64>>,
    cluster_of: BTreeMap<u64, ClassId>,
    moves: Vec<MoveRecord>,
    removals: BTreeSet<u64>,
    cluster_labels: BTreeMap<ClassId, ClassLabel>,
    names: BTreeMap<String, ClassId>,
    log: Vec<Edit>,
    state: SessionState,
}

impl AnnotationSession {
    /// `zhat` carries cluster ids as labels; `known` holds the classes new
    /// labels must avoid.
    pub fn open(session_id: impl Into<String>, zhat: &FeatureSet, known: BTreeSet<ClassId>) -> Result<Self> {
        if zhat.is_empty() {
            return invalid("cannot open a session on an empty partition");
        }
        let labels = zhat.require_labels()?;
        let mut clusters: BTreeMap<ClassId, Vec<u64>> = BTreeMap::new();
        for (&id, &c) in zhat.ids().iter().zip(labels) {
            clusters.entry(c).or_default().push(id);
        }
        let cluster_of = zhat.ids().iter().copied().zip(labels.iter().copied()).collect();
        let row_of = zhat.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self {
            session_id: session_id.into(),
            projection: principal_projection(zhat),
            zhat: zhat.clone(),
            known,
            row_of,
            clusters,
            cluster_of,
            moves: Vec::new(),
            removals: BTreeSet::new(),
            cluster_labels: BTreeMap::new(),
            names: BTreeMap::new(),
            log: Vec::new(),
            state: SessionState::Open,
        })
    }

    /// Fresh session with `edits` applied in order.
    pub fn replay(
        session_id: impl Into<String>,
        zhat: &FeatureSet,
        known: BTreeSet<ClassId>,
        edits: &[Edit],
    ) -> Result<Self> {
        let mut s = Self::open(session_id, zhat, known)?;
        for e in edits {
            s.apply(e.clone())?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.session_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn known(&self) -> &BTreeSet<ClassId> {
        &self.known
    }

    pub fn clusters(&self) -> &BTreeMap<ClassId, Vec<u64>> {
        &self.clusters
    }

    pub fn cluster_labels(&self) -> &BTreeMap<ClassId, ClassLabel> {
        &self.cluster_labels
    }

    pub fn removals(&self) -> &BTreeSet<u64> {
        &self.removals
    }

    pub fn moves(&self) -> &[MoveRecord] {
        &self.moves
    }

    pub fn edits(&self) -> &[Edit] {
        &self.log
    }

    pub fn cluster_of(&self, instance: u64) -> Option<ClassId> {
        self.cluster_of.get(&instance).copied()
    }

    fn require_open(&self) -> Result<()> {
        match self.state {
            SessionState::Open => Ok(()),
            SessionState::Committed => Err(Error::State(format!("session {} is committed", self.session_id))),
        }
    }

    fn require_cluster(&self, c: ClassId) -> Result<()> {
        if self.clusters.contains_key(&c) {
            Ok(())
        } else {
            Err(Error::NotFound(format!("cluster {c}")))
        }
    }

    fn current_cluster(&self, instance: u64) -> Result<ClassId> {
        self.cluster_of
            .get(&instance)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("instance {instance}")))
    }

    fn relocate(&mut self, instance: u64, to: ClassId) {
        let from = self.cluster_of[&instance];
        if from == to {
            return;
        }
        self.clusters.get_mut(&from).expect("tracked").retain(|&i| i != instance);
        self.clusters.entry(to).or_default().push(instance);
        self.cluster_of.insert(instance, to);
        self.moves.push(MoveRecord { instance, from, to });
    }

    fn next_class_id(&self) -> ClassId {
        let top = self
            .known
            .iter()
            .copied()
            .chain(self.cluster_labels.values().map(|l| l.class_id))
            .chain(self.names.values().copied())
            .max()
            .unwrap_or(0);
        top + 1
    }

    /// Apply one edit; on error the session is unchanged.
    pub fn apply(&mut self, edit: Edit) -> Result<()> {
        self.require_open()?;
        match &edit {
            Edit::Move { instance, to } => {
                self.current_cluster(*instance)?;
                self.require_cluster(*to)?;
                self.relocate(*instance, *to);
            }
            Edit::Remove { instance } => {
                let from = self.current_cluster(*instance)?;
                self.clusters.get_mut(&from).expect("tracked").retain(|i| i != instance);
                self.cluster_of.remove(instance);
                self.removals.insert(*instance);
            }
            Edit::Label { cluster, class_id, name } => {
                self.require_cluster(*cluster)?;
                let label = match (class_id, name) {
                    (Some(c), _) if self.known.contains(c) => {
                        return invalid(format!("class {c} is already known"));
                    }
                    (Some(0), _) => return invalid("class id 0 is reserved for unknown"),
                    (Some(c), name) => ClassLabel { class_id: *c, name: name.clone() },
                    (None, Some(n)) if n.trim().is_empty() => return invalid("class name is empty"),
                    (None, Some(n)) => {
                        let id = match self.names.get(n) {
                            Some(&id) => id,
                            None => self.next_class_id(),
                        };
                        self.names.insert(n.clone(), id);
                        ClassLabel { class_id: id, name: Some(n.clone()) }
                    }
                    (None, None) => return invalid("label needs a class_id or a name"),
                };
                self.cluster_labels.insert(*cluster, label);
            }
            Edit::Merge { from, into } => {
                self.require_cluster(*from)?;
                self.require_cluster(*into)?;
                if from == into {
                    return invalid("cannot merge a cluster into itself");
                }
                for instance in self.clusters[from].clone() {
                    self.relocate(instance, *into);
                }
                self.clusters.remove(from);
                self.cluster_labels.remove(from);
            }
            Edit::Split { instances } => {
                if instances.is_empty() {
                    return invalid("split needs at least one instance");
                }
                for &i in instances {
                    self.current_cluster(i)?;
                }
                if instances.iter().collect::<BTreeSet<_>>().len() != instances.len() {
                    return invalid("split lists an instance twice");
                }
                let fresh = self.clusters.keys().next_back().map_or(1, |c| c + 1);
                self.clusters.insert(fresh, Vec::new());
                for &i in instances {
                    self.relocate(i, fresh);
                }
            }
        }
        self.log.push(edit);
        Ok(())
    }

    pub fn progress(&self) -> Progress {
        let nonempty: Vec<ClassId> =
            self.clusters.iter().filter(|(_, v)| !v.is_empty()).map(|(&c, _)| c).collect();
        let unlabeled: Vec<ClassId> =
            nonempty.iter().copied().filter(|c| !self.cluster_labels.contains_key(c)).collect();
        Progress {
            instances: self.zhat.len(),
            removed: self.removals.len(),
            nonempty_clusters: nonempty.len(),
            labeled_clusters: nonempty.len() - unlabeled.len(),
            unlabeled_clusters: unlabeled,
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            session_id: self.session_id.clone(),
            state: self.state,
            clusters: self.clusters.clone(),
            cluster_labels: self.cluster_labels.clone(),
            removals: self.removals.clone(),
            moves: self.moves.clone(),
            edits: self.log.len(),
            progress: self.progress(),
        }
    }

    /// Page `page` (0-based) of a cluster's members with projection coordinates.
    pub fn instances(&self, cluster: ClassId, page: usize, page_size: usize) -> Result<InstancePage> {
        self.require_cluster(cluster)?;
        if page_size == 0 {
            return invalid("page_size must be positive");
        }
        let members = &self.clusters[&cluster];
        let uris = self.zhat.uris();
        let instances = members
            .iter()
            .skip(page.saturating_mul(page_size))
            .take(page_size)
            .map(|id| {
                let row = self.row_of[id];
                let [x, y] = self.projection[row];
                let uri = uris.map(|u| u[row].clone()).filter(|u| !u.is_empty());
                InstanceView { id: *id, uri, x, y }
            })
            .collect();
        Ok(InstancePage { cluster, page, page_size, total: members.len(), instances })
    }

    /// Materialize Z_t^n and freeze the session.
    pub fn commit(&mut self) -> Result<Commit> {
        self.require_open()?;
        let progress = self.progress();
        if !progress.unlabeled_clusters.is_empty() {
            let list: Vec<String> = progress.unlabeled_clusters.iter().map(|c| c.to_string()).collect();
            return Err(Error::Validation(format!("unlabeled clusters: {}", list.join(", "))));
        }
        let rows: Vec<usize> = (0..self.zhat.len())
            .filter(|&i| self.cluster_of.contains_key(&self.zhat.ids()[i]))
            .collect();
        let labels: Vec<ClassId> = rows
            .iter()
            .map(|&i| self.cluster_labels[&self.cluster_of[&self.zhat.ids()[i]]].class_id)
            .collect();
        let mut new_classes = BTreeMap::new();
        for l in self.cluster_labels.iter().filter(|(c, _)| !self.clusters[*c].is_empty()).map(|(_, l)| l) {
            let slot = new_classes.entry(l.class_id).or_insert(None);
            if slot.is_none() {
                *slot = l.name.clone();
            }
        }
        let z_n = self.zhat.select(&rows).with_labels(labels)?;
        self.state = SessionState::Committed;
        Ok(Commit { z_n, new_classes })
    }
}

/// First two principal-component scores of every row. Components are signed
/// so their largest loading is positive; missing components are zero.
pub fn principal_projection(fs: &FeatureSet) -> Vec<[f64; 2]> {
    let (n, d) = (fs.len(), fs.dim());
    if n == 0 {
        return Vec::new();
    }
    let x = DMatrix::from_row_slice(n, d, fs.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::new();
    for &c in order.iter().take(2) {
        if eig.eigenvalues[c] <= 1e-12 {
            break;
        }
        let mut v = eig.eigenvectors.column(c).clone_owned();
        let lead = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut out = [0.0; 2];
            for (k, v) in comps.iter().enumerate() {
                out[k] = row.dot(&v.transpose());
            }
            out
        })
        .collect()
}
