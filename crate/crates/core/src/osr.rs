//! Uncertainty-based open-set rejection.
//!
//! For closed-set probabilities `p` the uncertainty is `u = 1 - max p` and the
//! unknown score is `alpha * u`. The augmented distribution is the softmax of
//! `[alpha * u, p_1, ..., p_K]`. Softmax is strictly increasing, so a row is
//! rejected exactly when `alpha * u > max p`; on equality the known class wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{fit_labeled, ClassifierSpec, FittedClassifier};
use crate::error::{invalid, Result};
use crate::exemplar::ExemplarBuffer;
use crate::metrics;
use crate::rng::Rng;
use crate::types::{argmax, softmax, ClassId, FeatureSet, OpenSetPrediction, UNKNOWN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OsrConfig {
    pub alpha: f64,
    pub grid: Vec<f64>,
}

impl Default for OsrConfig {
    fn default() -> Self {
        Self { alpha: 1.0, grid: decade_grid(-10, 10) }
    }
}

/// `10^lo, 10^(lo+1), ..., 10^hi`.
pub fn decade_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| format!("1e{e}").parse().expect("valid literal")).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        invalid(format!("alpha must be positive and finite, got {alpha}"))
    }
}

/// Probabilities must be finite, non-negative and sum to at most one.
fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid("probability vector must be non-empty with finite non-negative entries");
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 || total > 1.0 + 1e-9 {
        return invalid(format!("probabilities sum to {total}"));
    }
    Ok(())
}

/// Score one probability vector; `classes[j]` is the id behind `p[j]`.
pub fn score_open_set(p: &[f64], alpha: f64, classes: &[ClassId]) -> Result<OpenSetPrediction> {
    check_alpha(alpha)?;
    check_probs(p)?;
    if classes.len() != p.len() {
        return invalid("one class id per probability is required");
    }
    let best = argmax(p).expect("non-empty");
    let top = p[best];
    let uncertainty = 1.0 - top;
    let unknown = alpha * uncertainty;
    let mut scores = Vec::with_capacity(p.len() + 1);
    scores.push(unknown);
    scores.extend_from_slice(p);
    let augmented_probs = softmax(&scores)?;
    let decision = if unknown > top { UNKNOWN } else { classes[best] };
    Ok(OpenSetPrediction { closed_probs: p.to_vec(), uncertainty, augmented_probs, decision })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetOutput {
    pub predictions: Vec<OpenSetPrediction>,
    /// Input row indices with decision 0.
    pub rejected_rows: Vec<usize>,
    /// The rejected rows with their ids preserved.
    pub rejected: FeatureSet,
}

impl OpenSetOutput {
    pub fn decisions(&self) -> Vec<ClassId> {
        self.predictions.iter().map(|p| p.decision).collect()
    }
}

pub fn predict_open_set(clf: &FittedClassifier, fs: &FeatureSet, alpha: f64) -> Result<OpenSetOutput> {
    check_alpha(alpha)?;
    let probs = clf.predict_proba(fs)?;
    let predictions = probs
        .par_iter()
        .map(|p| score_open_set(p, alpha, &clf.classes))
        .collect::<Result<Vec<_>>>()?;
    let rejected_rows: Vec<usize> = (0..predictions.len()).filter(|&i| predictions[i].is_rejected()).collect();
    let rejected = fs.select(&rejected_rows);
    Ok(OpenSetOutput { predictions, rejected_rows, rejected })
}

/// Outcome of the grid search, with the HNA obtained at every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    pub pseudo_known: Vec<ClassId>,
    pub pseudo_unknown: Vec<ClassId>,
    pub curve: Vec<(f64, f64)>,
}

/// Hold out a third of the known classes as pseudo-unknowns, fit on the rest
/// and pick the grid value maximizing HNA over the whole buffer.
pub fn calibrate_alpha(
    buffer: &ExemplarBuffer,
    spec: &ClassifierSpec,
    cfg: &OsrConfig,
    rng: &mut Rng,
) -> Result<Calibration> {
    let classes = buffer.entries().classes();
    if classes.len() < 3 {
        return invalid(format!("alpha calibration needs at least 3 known classes, got {}", classes.len()));
    }
    if cfg.grid.is_empty() {
        return invalid("alpha grid is empty");
    }
    cfg.grid.iter().try_for_each(|&a| check_alpha(a))?;
    let mut order: Vec<ClassId> = classes.into_iter().collect();
    rng.shuffle(&mut order);
    let n_unknown = ((order.len() as f64 / 3.0).round() as usize).max(1);
    let mut pseudo_unknown = order[..n_unknown].to_vec();
    let mut pseudo_known = order[n_unknown..].to_vec();
    pseudo_unknown.sort_unstable();
    pseudo_known.sort_unstable();

    let entries = buffer.entries();
    let labels = entries.require_labels()?;
    let train = entries.filter(|i| pseudo_known.contains(&labels[i]));
    let clf = fit_labeled(&train, &pseudo_known, spec)?;
    let truth: Vec<ClassId> = labels
        .iter()
        .map(|l| if pseudo_known.contains(l) { *l } else { UNKNOWN })
        .collect();
    let probs = clf.predict_proba(entries)?;

    let mut curve = Vec::with_capacity(cfg.grid.len());
    let mut grid = cfg.grid.clone();
    grid.sort_by(f64::total_cmp);
    for alpha in grid {
        let pred = probs
            .iter()
            .map(|p| score_open_set(p, alpha, &clf.classes).map(|s| s.decision))
            .collect::<Result<Vec<_>>>()?;
        let score = metrics::hna(&truth, &pred)?.hna.unwrap_or(0.0);
        curve.push((alpha, score));
    }
    Ok(Calibration { alpha: plateau_center(&curve), pseudo_known, pseudo_unknown, curve })
}

/// Middle of the longest run of grid points sharing the best score (first
/// run on ties, lower middle for even lengths).
fn plateau_center(curve: &[(f64, f64)]) -> f64 {
    let best = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut run_start, mut pick) = (None, (0usize, 0usize));
    for i in 0..=curve.len() {
        match (i < curve.len() && curve[i].1 == best, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s > pick.1 - pick.0 {
                    pick = (s, i);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    curve[pick.0 + (pick.1 - pick.0 - 1) / 2].0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn illustrative_vector() {
        let p = [0.1, 0.2, 0.6];
        let s = score_open_set(&p, 1.0, &[1, 2, 3]).unwrap();
        assert!((s.uncertainty - 0.4).abs() < 1e-15);
        assert_eq!(s.decision, 3);
        // softmax([0.4, 0.1, 0.2, 0.6]), evaluated independently.
        let want = [0.26448, 0.19593, 0.21654, 0.32304];
        for (a, b) in s.augmented_probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(score_open_set(&p, 2.0, &[1, 2, 3]).unwrap().decision, UNKNOWN);
    }

    #[test]
    fn confident_rows_stay_known() {
        let p = [1.0 - 1e-12, 1e-12];
        for alpha in decade_grid(-10, 0) {
            assert_eq!(score_open_set(&p, alpha, &[4, 5]).unwrap().decision, 4);
        }
    }

    #[test]
    fn equality_keeps_known_class() {
        // u = 0.5 and alpha * u = 0.5 = max p.
        let s = score_open_set(&[0.5, 0.5], 1.0, &[1, 2]).unwrap();
        assert_eq!(s.decision, 1);
    }

    #[test]
    fn invalid_inputs() {
        assert!(score_open_set(&[], 1.0, &[]).is_err());
        assert!(score_open_set(&[0.7, 0.7], 1.0, &[1, 2]).is_err());
        assert!(score_open_set(&[f64::NAN], 1.0, &[1]).is_err());
        assert!(score_open_set(&[1.0], 0.0, &[1]).is_err());
        assert!(score_open_set(&[1.0], 1.0, &[1, 2]).is_err());
    }

    #[test]
    fn plateau_center_picks_middle_of_longest_run() {
        let c = |v: &[f64]| v.iter().enumerate().map(|(i, &h)| (i as f64, h)).collect::<Vec<_>>();
        assert_eq!(plateau_center(&c(&[0.0, 1.0, 1.0, 1.0, 0.5])), 2.0);
        assert_eq!(plateau_center(&c(&[1.0, 0.0, 1.0, 1.0, 1.0, 1.0])), 3.0);
        assert_eq!(plateau_center(&c(&[0.2, 0.9, 0.1])), 1.0);
        assert_eq!(plateau_center(&c(&[0.3, 0.3])), 0.0);
    }

    #[test]
    fn grid_has_21_decades() {
        let g = OsrConfig::default().grid;
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 1e-10);
        assert_eq!(g[20], 1e10);
    }
}
