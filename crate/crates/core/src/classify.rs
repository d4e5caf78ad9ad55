//! Closed-set classifiers refit from scratch on the exemplar buffer.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exemplar::ExemplarBuffer;
use crate::ingest;
use crate::types::{argmax, softmax, ClassId, FeatureSet};

/// Lower bound applied to every output probability before renormalizing.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    LinearSoftmax,
    NearestClassMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::LinearSoftmax,
            epochs: 200,
            learning_rate: 0.1,
            l2_penalty: 1e-4,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl ClassifierSpec {
    pub fn ncm(temperature: f64) -> Self {
        Self { kind: ClassifierKind::NearestClassMean, temperature, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ClassifierKind::LinearSoftmax => {
                if self.epochs == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                    return invalid("linear classifier needs epochs > 0 and a positive learning rate");
                }
                if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
                    return invalid("l2_penalty must be non-negative");
                }
            }
            ClassifierKind::NearestClassMean => {
                if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                    return invalid("temperature must be positive");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameters {
    /// Row-major `classes x dim` weights acting on raw features.
    Linear { weights: Vec<f64>, bias: Vec<f64> },
    /// Row-major `classes x dim` class means.
    Means { means: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedClassifier {
    pub spec: ClassifierSpec,
    pub classes: Vec<ClassId>,
    pub dim: usize,
    pub parameters: Parameters,
}

/// Per-epoch training loss of the linear model (empty for nearest mean).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub loss: Vec<f64>,
}

pub fn fit(buffer: &ExemplarBuffer, spec: &ClassifierSpec) -> Result<FittedClassifier> {
    fit_labeled(buffer.entries(), &buffer.classes(), spec)
}

/// Fit on any labeled set; `classes` fixes the output order.
pub fn fit_labeled(fs: &FeatureSet, classes: &[ClassId], spec: &ClassifierSpec) -> Result<FittedClassifier> {
    fit_with_trace(fs, classes, spec).map(|(clf, _)| clf)
}

pub fn fit_with_trace(
    fs: &FeatureSet,
    classes: &[ClassId],
    spec: &ClassifierSpec,
) -> Result<(FittedClassifier, FitTrace)> {
    spec.validate()?;
    if fs.is_empty() || classes.is_empty() {
        return invalid("cannot fit a classifier without data");
    }
    let labels = fs.require_labels()?;
    let index: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if index.len() != classes.len() {
        return invalid("duplicate class ids");
    }
    let mut targets = Vec::with_capacity(labels.len());
    let mut counts = vec![0usize; classes.len()];
    for l in labels {
        let k = *index
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} is not among the classifier classes")))?;
        counts[k] += 1;
        targets.push(k);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return invalid(format!("class {} has no training instances", classes[k]));
    }
    let (parameters, trace) = match spec.kind {
        ClassifierKind::NearestClassMean => (class_means(fs, &targets, &counts), FitTrace::default()),
        ClassifierKind::LinearSoftmax => train_linear(fs, &targets, classes.len(), spec),
    };
    Ok((
        FittedClassifier { spec: spec.clone(), classes: classes.to_vec(), dim: fs.dim(), parameters },
        trace,
    ))
}

fn class_means(fs: &FeatureSet, targets: &[usize], counts: &[usize]) -> Parameters {
    let d = fs.dim();
    let mut means = vec![0.0; counts.len() * d];
    for (row, &k) in fs.rows().zip(targets) {
        for (m, v) in means[k * d..(k + 1) * d].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        means[k * d..(k + 1) * d].iter_mut().for_each(|m| *m /= n as f64);
    }
    Parameters::Means { means }
}

/// Full-batch gradient descent on standardized features; the standardization
/// is folded back into the returned weights.
fn train_linear(fs: &FeatureSet, targets: &[usize], k: usize, spec: &ClassifierSpec) -> (Parameters, FitTrace) {
    let (n, d) = (fs.len(), fs.dim());
    let mut mean = vec![0.0; d];
    for row in fs.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut scale = vec![0.0; d];
    for row in fs.rows() {
        scale.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n as f64);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
    let x: Vec<f64> = fs
        .rows()
        .flat_map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect::<Vec<_>>())
        .collect();

    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut loss = Vec::with_capacity(spec.epochs + 1);
    if k > 1 {
        let mut grad_w = vec![0.0; k * d];
        let mut grad_b = vec![0.0; k];
        let mut logits = vec![0.0; k];
        for epoch in 0..=spec.epochs {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let xi = &x[i * d..(i + 1) * d];
                for c in 0..k {
                    logits[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
                total += z.ln() + top - logits[t];
                for c in 0..k {
                    let p = (logits[c] - top).exp() / z;
                    let r = (p - if c == t { 1.0 } else { 0.0 }) / n as f64;
                    grad_b[c] += r;
                    grad_w[c * d..(c + 1) * d].iter_mut().zip(xi).for_each(|(g, v)| *g += r * v);
                }
            }
            let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() * 0.5 * spec.l2_penalty;
            loss.push(total / n as f64 + reg);
            if epoch == spec.epochs {
                break;
            }
            for (wv, g) in w.iter_mut().zip(&grad_w) {
                *wv -= spec.learning_rate * (g + spec.l2_penalty * *wv);
            }
            b.iter_mut().zip(&grad_b).for_each(|(bv, g)| *bv -= spec.learning_rate * g);
        }
    }
    // logits = W (x - mean) / scale + b
    let mut weights = vec![0.0; k * d];
    let mut bias = b;
    for c in 0..k {
        for j in 0..d {
            weights[c * d + j] = w[c * d + j] / scale[j];
            bias[c] -= weights[c * d + j] * mean[j];
        }
    }
    (Parameters::Linear { weights, bias }, FitTrace { loss })
}

impl FittedClassifier {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Raw scores whose softmax is the class distribution.
    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match &self.parameters {
            Parameters::Linear { weights, bias } => bias
                .iter()
                .enumerate()
                .map(|(c, b)| b + weights[c * d..(c + 1) * d].iter().zip(row).map(|(w, x)| w * x).sum::<f64>())
                .collect(),
            Parameters::Means { means } => means
                .chunks_exact(d)
                .map(|m| -m.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / self.spec.temperature)
                .collect(),
        }
    }

    /// Floored and renormalized class probabilities for one row.
    pub fn proba_row(&self, row: &[f64]) -> Vec<f64> {
        let mut p = softmax(&self.logits(row)).expect("finite logits");
        p.iter_mut().for_each(|v| *v = v.max(PROBABILITY_FLOOR));
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        p
    }

    pub fn predict_proba(&self, fs: &FeatureSet) -> Result<Vec<Vec<f64>>> {
        self.check_dim(fs)?;
        Ok((0..fs.len()).into_par_iter().map(|i| self.proba_row(fs.row(i))).collect())
    }

    /// Closed-set argmax labels.
    pub fn predict(&self, fs: &FeatureSet) -> Result<Vec<ClassId>> {
        Ok(self
            .predict_proba(fs)?
            .iter()
            .map(|p| self.classes[argmax(p).expect("non-empty")])
            .collect())
    }

    fn check_dim(&self, fs: &FeatureSet) -> Result<()> {
        if fs.dim() != self.dim {
            return invalid(format!("feature dimension {} does not match classifier dimension {}", fs.dim(), self.dim));
        }
        Ok(())
    }

    /// Header JSON + little-endian f64 parameter payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (kind, payload): (&str, Vec<f64>) = match &self.parameters {
            Parameters::Linear { weights, bias } => ("linear", weights.iter().chain(bias).copied().collect()),
            Parameters::Means { means } => ("means", means.clone()),
        };
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            classes: self.classes.clone(),
            dim: self.dim,
            parameters: kind.into(),
            values: payload.len(),
        };
        let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
        ingest::write_container(path, &header, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = ingest::read_container(path)?;
        let header: ModelHeader = serde_json::from_value(c.header).map_err(|e| Error::Format {
            offset: 9,
            message: format!("not a model header: {e}"),
        })?;
        if header.format != MODEL_FORMAT || header.version != 1 {
            return Err(Error::Format { offset: 9, message: "unsupported model format".into() });
        }
        if c.body.len() != header.values * 8 {
            return Err(Error::Truncated {
                offset: c.body_offset,
                expected: (header.values * 8) as u64,
                found: c.body.len() as u64,
            });
        }
        let values: Vec<f64> = c.body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let k = header.classes.len();
        let d = header.dim;
        let parameters = match header.parameters.as_str() {
            "linear" if values.len() == k * d + k => Parameters::Linear {
                weights: values[..k * d].to_vec(),
                bias: values[k * d..].to_vec(),
            },
            "means" if values.len() == k * d => Parameters::Means { means: values },
            other => {
                return Err(Error::Format {
                    offset: c.body_offset,
                    message: format!("parameter block `{other}` has the wrong size"),
                })
            }
        };
        Ok(Self { spec: header.spec, classes: header.classes, dim: d, parameters })
    }
}

const MODEL_FORMAT: &str = "owr-model";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    spec: ClassifierSpec,
    classes: Vec<ClassId>,
    dim: usize,
    parameters: String,
    values: usize,
}
