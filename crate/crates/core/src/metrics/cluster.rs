//! k-means and the characterization table.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nmi, purity, MetricsError};
use crate::corpus::NoveltyType;
use crate::seed;
use crate::style_metrics::StyleVector;

pub const RESTARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;
/// Trailing samples of each test used for characterization.
pub const EVALUATION_WINDOW: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Number of non-empty clusters.
    pub k_effective: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding. Stops early when every point already sits on a
/// center, so identical data yields fewer than `k` centers.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = d2.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (mut best, mut bd) = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < bd {
                    best = j;
                    bd = d;
                }
            }
            inertia += bd;
            best
        })
        .collect();
    (a, inertia)
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> KMeans {
    let dim = points[0].len();
    let (mut assignments, mut inertia) = assign(points, &centers);
    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            // an emptied cluster keeps its previous center
            if counts[j] > 0 {
                *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (a, next) = assign(points, &centers);
        assignments = a;
        let done = (inertia - next).abs() <= TOLERANCE * inertia.max(1e-300) || next == 0.0;
        inertia = next;
        if done {
            break;
        }
    }
    let mut used: Vec<usize> = assignments.clone();
    used.sort_unstable();
    used.dedup();
    KMeans {
        assignments,
        centroids: centers,
        inertia,
        k_effective: used.len(),
    }
}

/// Lloyd's algorithm from k-means++ seeds, best inertia over restarts
/// (ties keep the earliest restart).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed_value: u64) -> Result<KMeans, MetricsError> {
    if k == 0 || points.len() < k {
        return Err(MetricsError::TooFewSamples {
            samples: points.len(),
            k,
        });
    }
    let mut best: Option<KMeans> = None;
    for r in 0..RESTARTS {
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "metrics.kmeans", r as u64));
        let run = lloyd(points, seed_centers(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterGroup {
    /// Pen pressure.
    PP,
    /// Character size.
    CS,
    /// Word spacing.
    WS,
    /// Slant angle.
    SA,
    /// Novelty category.
    NC,
}

impl ClusterGroup {
    pub const ALL: [ClusterGroup; 5] = [Self::PP, Self::CS, Self::WS, Self::SA, Self::NC];

    /// Cluster count for the group ("up to" this many).
    pub fn max_clusters(self) -> usize {
        match self {
            Self::SA => 4,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PP => "PP",
            Self::CS => "CS",
            Self::WS => "WS",
            Self::SA => "SA",
            Self::NC => "NC",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CharacterizationRow {
    Style,
    Background,
    Pen,
    #[serde(rename = "No Novelty")]
    NoNovelty,
}

impl CharacterizationRow {
    pub const ALL: [CharacterizationRow; 4] = [Self::Style, Self::Background, Self::Pen, Self::NoNovelty];

    pub fn of(t: NoveltyType) -> Self {
        match t {
            NoveltyType::Writer | NoveltyType::Letter => Self::Style,
            NoveltyType::Background => Self::Background,
            NoveltyType::Pen => Self::Pen,
            NoveltyType::None => Self::NoNovelty,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Style => "Style",
            Self::Background => "Background",
            Self::Pen => "Pen",
            Self::NoNovelty => "No Novelty",
        }
    }
}

/// One sample as seen by the characterization.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacterizationSample {
    pub novelty_type: NoveltyType,
    /// Ground-truth label the style groups are scored against. The novelty
    /// category group is scored against `novelty_type` instead.
    pub truth: String,
    pub style: StyleVector,
    /// Measurement for the novelty-category group, e.g. the agent's
    /// predicted novelty category as an indicator vector.
    pub category: Vec<f64>,
}

impl CharacterizationSample {
    fn measurement(&self, g: ClusterGroup) -> Vec<f64> {
        match g {
            ClusterGroup::PP => vec![self.style.pen_pressure],
            ClusterGroup::CS => vec![self.style.character_size],
            ClusterGroup::WS => vec![self.style.word_spacing],
            ClusterGroup::SA => vec![f64::from(self.style.slant_angle)],
            ClusterGroup::NC => self.category.clone(),
        }
    }

    fn truth_for(&self, g: ClusterGroup) -> String {
        match g {
            ClusterGroup::NC => self.novelty_type.to_string(),
            _ => self.truth.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationCell {
    pub purity: f64,
    pub nmi: f64,
    pub k_effective: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationTable {
    pub cells: BTreeMap<CharacterizationRow, BTreeMap<ClusterGroup, CharacterizationCell>>,
    pub warnings: Vec<String>,
}

impl CharacterizationTable {
    pub fn get(&self, row: CharacterizationRow, group: ClusterGroup) -> Option<&CharacterizationCell> {
        self.cells.get(&row).and_then(|r| r.get(&group))
    }

    /// Purity table, blank where a cell could not be computed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Novelty");
        for g in ClusterGroup::ALL {
            out.push(',');
            out.push_str(g.name());
        }
        out.push('\n');
        for row in CharacterizationRow::ALL {
            out.push_str(row.name());
            for g in ClusterGroup::ALL {
                out.push(',');
                if let Some(c) = self.get(row, g) {
                    out.push_str(&format!("{:.4}", c.purity));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Clusters one group's measurement over the given samples.
pub fn characterize_cell(
    samples: &[&CharacterizationSample],
    group: ClusterGroup,
    seed_value: u64,
) -> Result<CharacterizationCell, MetricsError> {
    let points: Vec<Vec<f64>> = samples.iter().map(|s| s.measurement(group)).collect();
    let km = kmeans(&points, group.max_clusters(), seed_value)?;
    let truth: Vec<String> = samples.iter().map(|s| s.truth_for(group)).collect();
    Ok(CharacterizationCell {
        purity: purity(&km.assignments, &truth)?,
        nmi: nmi(&km.assignments, &truth)?,
        k_effective: km.k_effective,
        samples: samples.len(),
    })
}

/// Rows by novelty category, one cell per cluster group. Cells that cannot
/// be formed are left out and noted in `warnings`.
pub fn characterize(samples: &[CharacterizationSample], seed_value: u64) -> CharacterizationTable {
    let mut table = CharacterizationTable::default();
    for row in CharacterizationRow::ALL {
        let members: Vec<&CharacterizationSample> = samples
            .iter()
            .filter(|s| CharacterizationRow::of(s.novelty_type) == row)
            .collect();
        if members.is_empty() {
            table.warnings.push(format!("no samples in row {}", row.name()));
            continue;
        }
        for g in ClusterGroup::ALL {
            let cell_seed = seed::derive_indexed(seed_value, row.name(), g as u64);
            match characterize_cell(&members, g, cell_seed) {
                Ok(c) => {
                    table.cells.entry(row).or_default().insert(g, c);
                }
                Err(e) => table.warnings.push(format!("{} / {}: {e}", row.name(), g.name())),
            }
        }
    }
    table
}
