//! Extreme Value Machine: per-point Weibull inclusion models, set-cover
//! reduction, K+1 probabilities and an equal-error-rate novelty threshold.

pub mod io;
pub mod weibull;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::FeatureVector;
pub use weibull::{Weibull, WeibullError};

pub const DEFAULT_TAIL_SIZE: usize = 1000;
pub const DEFAULT_COVER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_DISTANCE_MULTIPLIER: f64 = 0.5;
/// Label reported for the extra (K+1-th) class.
pub const NOVEL_LABEL: &str = "NOVEL";

#[derive(Debug, thiserror::Error)]
pub enum EvmError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
    #[error("at least 2 classes are needed, got {0}")]
    TooFewClasses(usize),
    #[error("class {0:?} has no points")]
    EmptyClass(String),
    #[error("class {0:?} appears twice")]
    DuplicateClass(String),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("model was trained on {model:?} features but received {features:?}")]
    ExtractorMismatch { model: String, features: String },
    #[error("class {class:?}: margins of point {point} are degenerate (all equal)")]
    DegenerateMargins { class: String, point: usize },
    #[error("class {class:?}: {source}")]
    Weibull {
        class: String,
        #[source]
        source: WeibullError,
    },
    #[error("the novelty threshold has not been calibrated")]
    Uncalibrated,
    #[error("calibration needs both known and novel samples ({known} known, {novel} novel)")]
    SingleClassCalibration { known: usize, novel: usize },
    #[error("corrupt model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("model file {path} has format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("model file {0} failed its checksum")]
    Checksum(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Cosine,
    Euclidean,
}

impl Distance {
    /// Cosine distance is `1 - cos`, and 1 when either vector is zero.
    pub fn eval(self, a: &[f64], b: &[f32]) -> f64 {
        match self {
            Distance::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x - f64::from(y)).powi(2))
                .sum::<f64>()
                .sqrt(),
            Distance::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (&x, &y) in a.iter().zip(b) {
                    let y = f64::from(y);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
                }
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Distance::Cosine => 0,
            Distance::Euclidean => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Distance::Cosine),
            1 => Some(Distance::Euclidean),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvmHyperparams {
    pub tail_size: usize,
    pub cover_threshold: f64,
    pub distance: Distance,
    pub distance_multiplier: f64,
}

impl Default for EvmHyperparams {
    fn default() -> Self {
        EvmHyperparams {
            tail_size: DEFAULT_TAIL_SIZE,
            cover_threshold: DEFAULT_COVER_THRESHOLD,
            distance: Distance::Cosine,
            distance_multiplier: DEFAULT_DISTANCE_MULTIPLIER,
        }
    }
}

impl EvmHyperparams {
    pub fn validate(&self) -> Result<(), EvmError> {
        let bad = |m: String| Err(EvmError::InvalidHyperparams(m));
        if self.tail_size == 0 {
            return bad("tail_size must be at least 1".into());
        }
        if !(self.cover_threshold > 0.0 && self.cover_threshold <= 1.0) {
            return bad(format!("cover_threshold {} is outside (0, 1]", self.cover_threshold));
        }
        if !(self.distance_multiplier > 0.0 && self.distance_multiplier <= 1.0) {
            return bad(format!(
                "distance_multiplier {} is outside (0, 1]",
                self.distance_multiplier
            ));
        }
        Ok(())
    }
}

/// A retained training point with its Weibull inclusion model.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremeVector {
    pub anchor: Vec<f32>,
    pub weibull: Weibull,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvmClass {
    pub label: String,
    pub vectors: Vec<ExtremeVector>,
}

/// Training points of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClass {
    pub label: String,
    pub points: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvmModel {
    pub hyperparams: EvmHyperparams,
    pub extractor: String,
    pub dimension: usize,
    pub classes: Vec<EvmClass>,
    pub threshold: Option<f64>,
}

/// K known-class probabilities followed by the novel-class probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(pub Vec<f64>);

impl ProbabilityVector {
    pub fn known(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn novel(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Index of the most probable known class; ties go to the lowest index.
    pub fn argmax_known(&self) -> usize {
        argmax(self.known())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Normalizes class scores and scales them by `k_m`, appending `1 - k_m`.
pub fn probabilities(scores: &[f64]) -> ProbabilityVector {
    let k_m = scores.iter().copied().fold(0.0, f64::max);
    let total: f64 = scores.iter().sum();
    let mut out: Vec<f64> = if total > 0.0 {
        scores.iter().map(|s| s / total * k_m).collect()
    } else {
        vec![0.0; scores.len()]
    };
    out.push(1.0 - k_m);
    ProbabilityVector(out)
}

/// Outcome of equal-error-rate calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub equal_error_rate: f64,
}

/// Rates at threshold `delta` (novel when `k_m < delta`): known samples
/// flagged, and novel samples missed.
pub fn error_rates(known: &[f64], novel: &[f64], delta: f64) -> (f64, f64) {
    let fp = known.iter().filter(|&&s| s < delta).count();
    let fnr = novel.iter().filter(|&&s| s >= delta).count();
    (fp as f64 / known.len() as f64, fnr as f64 / novel.len() as f64)
}

/// Smallest threshold minimizing |FPR - FNR| over the calibration scores.
/// Candidates are 0, every observed score and the next float above it.
pub fn eer_threshold(known: &[f64], novel: &[f64]) -> Result<Calibration, EvmError> {
    if known.is_empty() || novel.is_empty() {
        return Err(EvmError::SingleClassCalibration {
            known: known.len(),
            novel: novel.len(),
        });
    }
    let mut candidates = BTreeSet::new();
    candidates.insert(0.0f64.to_bits());
    for &s in known.iter().chain(novel) {
        for c in [s, s.next_up()] {
            if (0.0..=1.0).contains(&c) {
                candidates.insert(c.to_bits());
            }
        }
    }
    let mut best: Option<(f64, Calibration)> = None;
    // bit order equals numeric order for non-negative floats
    for bits in candidates {
        let delta = f64::from_bits(bits);
        let (fpr, fnr) = error_rates(known, novel, delta);
        let gap = (fpr - fnr).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((
                gap,
                Calibration {
                    threshold: delta,
                    false_positive_rate: fpr,
                    false_negative_rate: fnr,
                    equal_error_rate: 0.5 * (fpr + fnr),
                },
            ));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

fn check_finite(label: &str, points: &[Vec<f64>]) -> Result<(), EvmError> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvmError::NonFinite(label.to_string()));
    }
    Ok(())
}

/// Smallest `k` values of `v` in ascending order.
fn smallest(mut v: Vec<f64>, k: usize) -> Vec<f64> {
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, f64::total_cmp);
        v.truncate(k);
    }
    v.sort_by(f64::total_cmp);
    v
}

/// Greedy set cover: repeatedly keep the vector covering the most still
/// uncovered points, ties to the lowest index.
fn greedy_cover(covers: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut kept = Vec::new();
    while remaining > 0 {
        let (best, gain) = covers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.iter().filter(|&&u| !covered[u]).count()))
            .fold((0, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
        // every point covers itself, so gain is positive while points remain
        debug_assert!(gain > 0);
        for &u in &covers[best] {
            if !covered[u] {
                covered[u] = true;
                remaining -= 1;
            }
        }
        kept.push(best);
    }
    kept.sort_unstable();
    kept
}

fn to_f32(p: &[f64]) -> Vec<f32> {
    p.iter().map(|&v| v as f32).collect()
}

fn widen(p: &[f32]) -> Vec<f64> {
    p.iter().map(|&v| f64::from(v)).collect()
}

/// Fits an uncalibrated model. Points are stored as `f32`, and all
/// distances during fitting are taken against the stored values so a
/// reloaded model behaves identically.
pub fn fit(
    classes: &[TrainingClass],
    extractor: &str,
    hyperparams: EvmHyperparams,
) -> Result<EvmModel, EvmError> {
    hyperparams.validate()?;
    if classes.len() < 2 {
        return Err(EvmError::TooFewClasses(classes.len()));
    }
    let mut seen = BTreeSet::new();
    for c in classes {
        if c.points.is_empty() {
            return Err(EvmError::EmptyClass(c.label.clone()));
        }
        if !seen.insert(c.label.as_str()) {
            return Err(EvmError::DuplicateClass(c.label.clone()));
        }
        check_finite(&c.label, &c.points)?;
    }
    let dimension = classes[0].points[0].len();
    for p in classes.iter().flat_map(|c| &c.points) {
        if p.len() != dimension {
            return Err(EvmError::DimensionMismatch {
                expected: dimension,
                got: p.len(),
            });
        }
    }
    let stored: Vec<Vec<Vec<f32>>> = classes
        .iter()
        .map(|c| c.points.iter().map(|p| to_f32(p)).collect())
        .collect();
    let widened: Vec<Vec<Vec<f64>>> = stored
        .iter()
        .map(|c| c.iter().map(|p| widen(p)).collect())
        .collect();
    let dist = hyperparams.distance;
    let fitted: Vec<EvmClass> = (0..classes.len())
        .into_par_iter()
        .map(|ci| {
            let label = &classes[ci].label;
            let weibulls: Vec<Weibull> = widened[ci]
                .par_iter()
                .enumerate()
                .map(|(pi, x)| {
                    let negatives: Vec<f64> = stored
                        .iter()
                        .enumerate()
                        .filter(|&(cj, _)| cj != ci)
                        .flat_map(|(_, other)| other.iter().map(|y| dist.eval(x, y)))
                        .collect();
                    let margins: Vec<f64> = smallest(negatives, hyperparams.tail_size)
                        .into_iter()
                        .map(|d| d * hyperparams.distance_multiplier)
                        .collect();
                    weibull::fit(&margins).map_err(|e| match e {
                        WeibullError::Degenerate(_) => EvmError::DegenerateMargins {
                            class: label.clone(),
                            point: pi,
                        },
                        source => EvmError::Weibull {
                            class: label.clone(),
                            source,
                        },
                    })
                })
                .collect::<Result<_, _>>()?;
            let n = weibulls.len();
            let covers: Vec<Vec<usize>> = (0..n)
                .map(|v| {
                    (0..n)
                        .filter(|&u| {
                            u == v
                                || weibulls[v].psi(dist.eval(&widened[ci][u], &stored[ci][v]))
                                    >= hyperparams.cover_threshold
                        })
                        .collect()
                })
                .collect();
            let vectors = greedy_cover(&covers, n)
                .into_iter()
                .map(|v| ExtremeVector {
                    anchor: stored[ci][v].clone(),
                    weibull: weibulls[v],
                })
                .collect();
            Ok(EvmClass {
                label: label.clone(),
                vectors,
            })
        })
        .collect::<Result<_, EvmError>>()?;
    Ok(EvmModel {
        hyperparams,
        extractor: extractor.to_string(),
        dimension,
        classes: fitted,
        threshold: None,
    })
}

/// Groups labeled feature vectors by label (in order of first appearance)
/// and fits a model bound to their extractor.
pub fn fit_labeled(
    samples: &[(String, FeatureVector)],
    hyperparams: EvmHyperparams,
) -> Result<EvmModel, EvmError> {
    let Some((_, first)) = samples.first() else {
        return Err(EvmError::TooFewClasses(0));
    };
    let mut order: Vec<TrainingClass> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (label, fv) in samples {
        if fv.extractor != first.extractor {
            return Err(EvmError::ExtractorMismatch {
                model: first.extractor.clone(),
                features: fv.extractor.clone(),
            });
        }
        let i = *index.entry(label.as_str()).or_insert_with(|| {
            order.push(TrainingClass {
                label: label.clone(),
                points: Vec::new(),
            });
            order.len() - 1
        });
        order[i].points.push(fv.values.clone());
    }
    fit(&order, &first.extractor, hyperparams)
}

impl EvmModel {
    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn extreme_vector_count(&self) -> usize {
        self.classes.iter().map(|c| c.vectors.len()).sum()
    }

    /// Per-class score: the largest inclusion probability of the class's
    /// extreme vectors. Unchecked except for dimension.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>, EvmError> {
        if x.len() != self.dimension {
            return Err(EvmError::DimensionMismatch {
                expected: self.dimension,
                got: x.len(),
            });
        }
        let d = self.hyperparams.distance;
        Ok(self
            .classes
            .iter()
            .map(|c| {
                c.vectors
                    .iter()
                    .map(|v| v.weibull.psi(d.eval(x, &v.anchor)))
                    .fold(0.0, f64::max)
            })
            .collect())
    }

    fn check_extractor(&self, x: &FeatureVector) -> Result<(), EvmError> {
        if x.extractor != self.extractor {
            return Err(EvmError::ExtractorMismatch {
                model: self.extractor.clone(),
                features: x.extractor.clone(),
            });
        }
        Ok(())
    }

    pub fn class_scores(&self, x: &FeatureVector) -> Result<Vec<f64>, EvmError> {
        self.check_extractor(x)?;
        self.scores(&x.values)
    }

    /// Maximum known-class score.
    pub fn k_m(&self, x: &FeatureVector) -> Result<f64, EvmError> {
        Ok(self.class_scores(x)?.into_iter().fold(0.0, f64::max))
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<ProbabilityVector, EvmError> {
        if self.threshold.is_none() {
            return Err(EvmError::Uncalibrated);
        }
        Ok(probabilities(&self.class_scores(x)?))
    }

    /// True when `k_m` falls below the calibrated threshold.
    pub fn is_novel(&self, p: &ProbabilityVector) -> Result<bool, EvmError> {
        let delta = self.threshold.ok_or(EvmError::Uncalibrated)?;
        Ok(1.0 - p.novel() < delta)
    }

    /// Sets the novelty threshold at the equal-error point of the given
    /// known-class and novel-class samples.
    pub fn calibrate(
        &mut self,
        known: &[FeatureVector],
        novel: &[FeatureVector],
    ) -> Result<Calibration, EvmError> {
        let km = |xs: &[FeatureVector]| {
            xs.iter().map(|x| self.k_m(x)).collect::<Result<Vec<f64>, _>>()
        };
        let cal = eer_threshold(&km(known)?, &km(novel)?)?;
        self.threshold = Some(cal.threshold);
        Ok(cal)
    }
}
