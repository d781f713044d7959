//! Scoring: edit-distance accuracies, NMI, purity, top-k accuracy, confusion
//! matrices and correlations. Clustering and grouped reports live in the
//! submodules.

pub mod cluster;
pub mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::evm::NOVEL_LABEL;
use crate::runner::PredictionRecord;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no items to score")]
    Empty,
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("k = {k} exceeds the {available} ranked predictions of record {id:?}")]
    KTooLarge { k: usize, available: usize, id: String },
    #[error("{samples} samples cannot form {k} clusters")]
    TooFewSamples { samples: usize, k: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn edit_accuracy<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// `1 - L(truth, pred) / max(|truth|, |pred|)` over characters; 1 when both
/// are empty.
pub fn char_accuracy(truth: &str, pred: &str) -> f64 {
    let a: Vec<char> = truth.chars().collect();
    let b: Vec<char> = pred.chars().collect();
    edit_accuracy(&a, &b)
}

/// Splits on single ASCII spaces; the empty string has no tokens.
pub fn tokens(s: &str) -> Vec<&str> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(' ').collect()
    }
}

/// Same formula as [`char_accuracy`] at token granularity.
pub fn word_accuracy(truth: &str, pred: &str) -> f64 {
    edit_accuracy(&tokens(truth), &tokens(pred))
}

/// Normalization of mutual information.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiVariant {
    #[default]
    Geometric,
    Arithmetic,
    Min,
    Max,
}

/// Joint counts of two labelings.
struct Contingency {
    n: f64,
    joint: Vec<f64>,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

fn contingency<A: Ord, B: Ord>(a: &[A], b: &[B]) -> Result<Contingency, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut ia = BTreeMap::new();
    let mut ib = BTreeMap::new();
    for x in a {
        let n = ia.len();
        ia.entry(x).or_insert(n);
    }
    for y in b {
        let n = ib.len();
        ib.entry(y).or_insert(n);
    }
    let (ra, cb) = (ia.len(), ib.len());
    let mut joint = vec![0.0; ra * cb];
    let mut rows = vec![0.0; ra];
    let mut cols = vec![0.0; cb];
    for (x, y) in a.iter().zip(b) {
        let (i, j) = (ia[x], ib[y]);
        joint[i * cb + j] += 1.0;
        rows[i] += 1.0;
        cols[j] += 1.0;
    }
    Ok(Contingency {
        n: a.len() as f64,
        joint,
        rows,
        cols,
    })
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

pub fn nmi<A: Ord, B: Ord>(a: &[A], b: &[B]) -> Result<f64, MetricsError> {
    nmi_with(a, b, NmiVariant::Geometric)
}

/// Normalized mutual information. Two single-cluster labelings score 1;
/// a single-cluster labeling against anything else scores 0.
pub fn nmi_with<A: Ord, B: Ord>(a: &[A], b: &[B], variant: NmiVariant) -> Result<f64, MetricsError> {
    let t = contingency(a, b)?;
    let (ha, hb) = (entropy(&t.rows, t.n), entropy(&t.cols, t.n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let cb = t.cols.len();
    let mut mi = 0.0;
    for (i, &r) in t.rows.iter().enumerate() {
        for (j, &c) in t.cols.iter().enumerate() {
            let nij = t.joint[i * cb + j];
            if nij > 0.0 {
                mi += nij / t.n * (t.n * nij / (r * c)).ln();
            }
        }
    }
    let norm = match variant {
        NmiVariant::Geometric => (ha * hb).sqrt(),
        NmiVariant::Arithmetic => 0.5 * (ha + hb),
        NmiVariant::Min => ha.min(hb),
        NmiVariant::Max => ha.max(hb),
    };
    Ok((mi / norm).clamp(0.0, 1.0))
}

/// Fraction of items sharing their cluster's majority truth label.
pub fn purity<C: Ord, T: Ord>(clusters: &[C], truth: &[T]) -> Result<f64, MetricsError> {
    let t = contingency(clusters, truth)?;
    let cb = t.cols.len();
    let hits: f64 = (0..t.rows.len())
        .map(|i| t.joint[i * cb..(i + 1) * cb].iter().copied().fold(0.0, f64::max))
        .sum();
    Ok(hits / t.n)
}

/// Truth label as seen by a K+1 classifier: unknown labels become the
/// novel slot.
pub fn open_set_label(label: &str, known: &[String]) -> String {
    if known.iter().any(|k| k == label) {
        label.to_string()
    } else {
        NOVEL_LABEL.to_string()
    }
}

/// Fraction of records whose truth is among their first `k` ranked labels.
pub fn topk_accuracy(records: &[PredictionRecord], truth: &[String], k: usize) -> Result<f64, MetricsError> {
    if records.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(records.len(), truth.len()));
    }
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0usize;
    for (r, t) in records.iter().zip(truth) {
        if k > r.top_k.len() {
            return Err(MetricsError::KTooLarge {
                k,
                available: r.top_k.len(),
                id: r.id.clone(),
            });
        }
        hits += usize::from(r.top_k[..k].contains(t));
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Counts with truth as rows and predictions as columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Label set is `labels` followed by the novel slot; anything outside
    /// it is counted as novel.
    pub fn new(labels: &[String], truth: &[String], predicted: &[String]) -> Result<Self, MetricsError> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch(truth.len(), predicted.len()));
        }
        let mut all: Vec<String> = labels.to_vec();
        all.push(NOVEL_LABEL.to_string());
        let index = |s: &str| all.iter().position(|l| l == s).unwrap_or(all.len() - 1);
        let mut counts = vec![vec![0u64; all.len()]; all.len()];
        for (t, p) in truth.iter().zip(predicted) {
            counts[index(t)][index(p)] += 1;
        }
        Ok(ConfusionMatrix { labels: all, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(&csv_field(l));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::Empty);
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&ranks(x), &ranks(y))
}
