//! HOG descriptors and the width-invariant Mean HOG / M-Mean HOG features,
//! plus the feature-matrix file formats.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::resample;
use crate::corpus::{CorpusError, LineImage, Manifest};

pub const CELL: usize = 8;
pub const BINS: usize = 9;
pub const BLOCK_CELLS: usize = 2;
pub const BLOCK_LEN: usize = BINS * BLOCK_CELLS * BLOCK_CELLS;
pub const NORMALIZED_HEIGHT: u32 = 64;
pub const DEFAULT_SECTIONS: usize = 10;
const L2HYS_CLIP: f64 = 0.2;
const L2HYS_EPS: f64 = 1e-3;

const FEATURE_MAGIC: &[u8; 5] = b"FEAT1";

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("image is {width} px wide after height normalization; at least {min} px are needed for one block")]
    TooNarrow { width: u32, min: u32 },
    #[error("{columns} block columns cannot form {sections} sections")]
    TooFewColumns { columns: usize, sections: usize },
    #[error("unknown extractor {0:?}")]
    UnknownExtractor(String),
    #[error("record {id:?}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("record {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("sample {id:?}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<FeatureError>,
    },
    #[error("corrupt feature file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("feature file {0} failed its checksum")]
    Checksum(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Per-cell orientation histograms and their block-normalized descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct HogGrid {
    pub cells_wide: usize,
    pub cells_high: usize,
    /// Row-major raw cell histograms.
    pub cells: Vec<[f64; BINS]>,
    pub blocks_wide: usize,
    pub blocks_high: usize,
    /// Row-major L2-Hys normalized 2x2-cell block descriptors.
    pub blocks: Vec<[f64; BLOCK_LEN]>,
}

impl HogGrid {
    pub fn cell(&self, cx: usize, cy: usize) -> &[f64; BINS] {
        &self.cells[cy * self.cells_wide + cx]
    }

    pub fn block(&self, bx: usize, by: usize) -> &[f64; BLOCK_LEN] {
        &self.blocks[by * self.blocks_wide + bx]
    }
}

/// Rescales to 64 px tall, preserving aspect ratio, with bilinear resampling.
pub fn normalize_height(image: &LineImage) -> LineImage {
    if image.height() == NORMALIZED_HEIGHT {
        return image.clone();
    }
    let scale = f64::from(NORMALIZED_HEIGHT) / f64::from(image.height());
    let w = ((f64::from(image.width()) * scale).round() as u32).max(1);
    resample(image, w, NORMALIZED_HEIGHT)
}

fn l2_hys(v: &mut [f64; BLOCK_LEN]) {
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + L2HYS_EPS * L2HYS_EPS).sqrt();
    let n = norm(v);
    for x in v.iter_mut() {
        *x = (*x / n).min(L2HYS_CLIP);
    }
    let n = norm(v);
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// HOG over an image of any height (normalize first for feature use).
///
/// Centred `[-1, 0, 1]` gradients with replicated borders, 8x8 cells, nine
/// unsigned bins centred at 0°, 20°, …, 160° with linear vote splitting,
/// 2x2-cell blocks at one-cell stride, L2-Hys block normalization.
pub fn hog_cells(image: &LineImage) -> Result<HogGrid, FeatureError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let cells_wide = w / CELL;
    let cells_high = h / CELL;
    if cells_wide < BLOCK_CELLS || cells_high < BLOCK_CELLS {
        return Err(FeatureError::TooNarrow {
            width: image.width(),
            min: (CELL * BLOCK_CELLS) as u32,
        });
    }
    let px = |x: usize, y: usize| f64::from(image.get(x as u32, y as u32));
    let mut cells = vec![[0.0f64; BINS]; cells_wide * cells_high];
    let bin_width = 180.0 / BINS as f64;
    for y in 0..cells_high * CELL {
        for x in 0..cells_wide * CELL {
            let gx = px((x + 1).min(w - 1), y) - px(x.saturating_sub(1), y);
            let gy = px(x, (y + 1).min(h - 1)) - px(x, y.saturating_sub(1));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let pos = angle / bin_width;
            let lower = pos.floor();
            let frac = pos - lower;
            let lo = (lower as usize) % BINS;
            let hi = (lo + 1) % BINS;
            let cell = &mut cells[(y / CELL) * cells_wide + x / CELL];
            cell[lo] += mag * (1.0 - frac);
            cell[hi] += mag * frac;
        }
    }
    let blocks_wide = cells_wide - 1;
    let blocks_high = cells_high - 1;
    let mut blocks = Vec::with_capacity(blocks_wide * blocks_high);
    for by in 0..blocks_high {
        for bx in 0..blocks_wide {
            let mut d = [0.0f64; BLOCK_LEN];
            let mut k = 0;
            for cy in by..by + BLOCK_CELLS {
                for cx in bx..bx + BLOCK_CELLS {
                    d[k..k + BINS].copy_from_slice(&cells[cy * cells_wide + cx]);
                    k += BINS;
                }
            }
            l2_hys(&mut d);
            blocks.push(d);
        }
    }
    Ok(HogGrid {
        cells_wide,
        cells_high,
        cells,
        blocks_wide,
        blocks_high,
        blocks,
    })
}

/// Feature vector tagged with the extractor that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub extractor: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

fn mean_of_columns(grid: &HogGrid, columns: std::ops::Range<usize>) -> [f64; BLOCK_LEN] {
    let mut acc = [0.0f64; BLOCK_LEN];
    let mut n = 0usize;
    for by in 0..grid.blocks_high {
        for bx in columns.clone() {
            for (a, v) in acc.iter_mut().zip(grid.block(bx, by)) {
                *a += v;
            }
            n += 1;
        }
    }
    acc.map(|v| v / n as f64)
}

/// Mean block descriptor after height normalization.
pub fn mean_hog(image: &LineImage) -> Result<FeatureVector, FeatureError> {
    let grid = hog_cells(&normalize_height(image))?;
    Ok(FeatureVector {
        extractor: Extractor::MeanHog.id(),
        values: mean_of_columns(&grid, 0..grid.blocks_wide).to_vec(),
    })
}

/// Global mean followed by the means of `sections` contiguous block-column
/// sections; earlier sections absorb the remainder.
pub fn m_mean_hog(image: &LineImage, sections: usize) -> Result<FeatureVector, FeatureError> {
    let grid = hog_cells(&normalize_height(image))?;
    let cols = grid.blocks_wide;
    if sections == 0 || cols < sections {
        return Err(FeatureError::TooFewColumns {
            columns: cols,
            sections,
        });
    }
    let mut values = Vec::with_capacity((sections + 1) * BLOCK_LEN);
    values.extend_from_slice(&mean_of_columns(&grid, 0..cols));
    let (base, extra) = (cols / sections, cols % sections);
    let mut start = 0;
    for s in 0..sections {
        let len = base + usize::from(s < extra);
        values.extend_from_slice(&mean_of_columns(&grid, start..start + len));
        start += len;
    }
    Ok(FeatureVector {
        extractor: Extractor::MMeanHog(sections).id(),
        values,
    })
}

/// Named feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Extractor {
    MeanHog,
    MMeanHog(usize),
}

impl Extractor {
    pub fn id(self) -> String {
        self.to_string()
    }

    pub fn dimension(self) -> usize {
        match self {
            Extractor::MeanHog => BLOCK_LEN,
            Extractor::MMeanHog(m) => (m + 1) * BLOCK_LEN,
        }
    }

    pub fn extract(self, image: &LineImage) -> Result<FeatureVector, FeatureError> {
        match self {
            Extractor::MeanHog => mean_hog(image),
            Extractor::MMeanHog(m) => m_mean_hog(image, m),
        }
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extractor::MeanHog => f.write_str("mean-hog"),
            Extractor::MMeanHog(DEFAULT_SECTIONS) => f.write_str("m-mean-hog"),
            Extractor::MMeanHog(m) => write!(f, "m-mean-hog:{m}"),
        }
    }
}

impl FromStr for Extractor {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean-hog" => Ok(Extractor::MeanHog),
            "m-mean-hog" => Ok(Extractor::MMeanHog(DEFAULT_SECTIONS)),
            other => other
                .strip_prefix("m-mean-hog:")
                .and_then(|m| m.parse().ok())
                .filter(|&m: &usize| m > 0)
                .map(Extractor::MMeanHog)
                .ok_or_else(|| FeatureError::UnknownExtractor(other.to_string())),
        }
    }
}

/// Id-keyed feature matrix from one extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSet {
    pub extractor: String,
    pub dimension: usize,
    pub records: Vec<FeatureRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub values: Vec<f64>,
}

impl FeatureSet {
    pub fn new(extractor: impl Into<String>, dimension: usize) -> Self {
        Self {
            extractor: extractor.into(),
            dimension,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<(), FeatureError> {
        let id = id.into();
        if values.len() != self.dimension {
            return Err(FeatureError::DimensionMismatch {
                id,
                expected: self.dimension,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(id));
        }
        self.records.push(FeatureRecord { id, values });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .map(|r| r.values.as_slice())
    }

    pub fn vector(&self, id: &str) -> Option<FeatureVector> {
        self.get(id).map(|v| FeatureVector {
            extractor: self.extractor.clone(),
            values: v.to_vec(),
        })
    }

    fn validate(&self) -> Result<(), FeatureError> {
        for r in &self.records {
            if r.values.len() != self.dimension {
                return Err(FeatureError::DimensionMismatch {
                    id: r.id.clone(),
                    expected: self.dimension,
                    got: r.values.len(),
                });
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::NonFinite(r.id.clone()));
            }
        }
        Ok(())
    }

    /// Binary layout: magic, extractor, dimension, records, CRC32 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        put_str(&mut out, &self.extractor);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.id);
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, FeatureError> {
        let corrupt = |reason: &str| FeatureError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < FEATURE_MAGIC.len() + 4 || &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_le_bytes() != trailer {
            return Err(FeatureError::Checksum(path.to_path_buf()));
        }
        let mut r = Reader::new(&body[FEATURE_MAGIC.len()..]);
        let extractor = r.string().ok_or_else(|| corrupt("truncated header"))?;
        let dimension = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let n = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let mut set = FeatureSet::new(extractor, dimension);
        for _ in 0..n {
            let id = r.string().ok_or_else(|| corrupt("truncated record"))?;
            let values = (0..dimension)
                .map(|_| r.f64())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("truncated record"))?;
            set.records.push(FeatureRecord { id, values });
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        set.validate()?;
        Ok(set)
    }

    /// `.json` files are written as JSON, anything else as binary.
    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let bytes = if is_json(path) {
            let mut s = serde_json::to_string(self).expect("feature set serializes");
            s.push('\n');
            s.into_bytes()
        } else {
            self.to_bytes()
        };
        fs::write(path, bytes).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let bytes = fs::read(path).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if is_json(path) {
            let set: FeatureSet =
                serde_json::from_slice(&bytes).map_err(|e| FeatureError::Format {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
            set.validate()?;
            Ok(set)
        } else {
            Self::from_bytes(&bytes, path)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

/// Featurizes every record of a manifest in parallel, preserving order.
pub fn featurize_manifest(manifest: &Manifest, extractor: Extractor) -> Result<FeatureSet, FeatureError> {
    let rows: Vec<(String, Vec<f64>)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let sample = manifest.load_sample(r)?;
            let v = extractor
                .extract(&sample.image)
                .map_err(|e| FeatureError::Sample {
                    id: r.id.clone(),
                    source: Box::new(e),
                })?;
            Ok((r.id.clone(), v.values))
        })
        .collect::<Result<_, FeatureError>>()?;
    let mut set = FeatureSet::new(extractor.id(), extractor.dimension());
    for (id, values) in rows {
        set.push(id, values)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::reflect_vertical_axis;
    use crate::synth::{self, LineStyle};
    use proptest::prelude::*;

    fn line(seed_value: u64) -> LineImage {
        synth::text_line(&LineStyle::random(&mut crate::seed::rng(seed_value)), 4, seed_value)
    }

    #[test]
    fn constant_image_gives_zero() {
        let img = LineImage::filled(200, 64, 140);
        let grid = hog_cells(&img).unwrap();
        assert!(grid.cells.iter().all(|c| c.iter().all(|&v| v == 0.0)));
        assert!(mean_hog(&img).unwrap().values.iter().all(|&v| v == 0.0));
        let m = m_mean_hog(&img, 10).unwrap();
        assert_eq!(m.dimension(), 11 * BLOCK_LEN);
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_votes_for_horizontal_gradient() {
        let img = LineImage::from_fn(64, 64, |x, _| if x < 36 { 0 } else { 255 });
        let grid = hog_cells(&img).unwrap();
        // the edge sits inside cell column 4: gradient is purely along x (0°)
        let cell = grid.cell(4, 3);
        let total: f64 = cell.iter().sum();
        assert!(total > 0.0);
        assert_eq!(cell[0], total);
        assert!(grid.cell(1, 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_grids() {
        let img = line(3);
        assert_eq!(hog_cells(&img).unwrap(), hog_cells(&img).unwrap());
    }

    #[test]
    fn tiling_leaves_mean_unchanged() {
        // symmetric period-8 pattern: replicated borders agree with the periodic extension
        let profile = [30.0, 90.0, 160.0, 220.0, 220.0, 160.0, 90.0, 30.0];
        let make = |w: u32| {
            LineImage::from_fn(w, 64, |x, y| {
                let v = profile[(x % 8) as usize] * 0.7 + f64::from(y % 16) * 4.0;
                v as u8
            })
        };
        let a = mean_hog(&make(80)).unwrap();
        let b = mean_hog(&make(160)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_is_width_invariant() {
        for w in [64, 320, 1024] {
            let img = LineImage::from_fn(w, 64, |x, y| ((x * 7 + y * 3) % 251) as u8);
            assert_eq!(mean_hog(&img).unwrap().dimension(), BLOCK_LEN);
            assert_eq!(m_mean_hog(&img, 5).unwrap().dimension(), 6 * BLOCK_LEN);
        }
    }

    #[test]
    fn single_section_repeats_global_mean() {
        let v = m_mean_hog(&line(5), 1).unwrap();
        assert_eq!(v.values[..BLOCK_LEN], v.values[BLOCK_LEN..]);
    }

    #[test]
    fn too_narrow_and_too_few_sections() {
        assert!(matches!(
            mean_hog(&LineImage::filled(12, 64, 0)),
            Err(FeatureError::TooNarrow { .. })
        ));
        // 48 px wide -> 6 cells -> 5 block columns
        assert!(matches!(
            m_mean_hog(&LineImage::filled(48, 64, 0), 10),
            Err(FeatureError::TooFewColumns { columns: 5, sections: 10 })
        ));
    }

    #[test]
    fn height_is_normalized() {
        let img = line(8);
        let n = normalize_height(&img);
        assert_eq!(n.height(), NORMALIZED_HEIGHT);
    }

    #[test]
    fn extractor_ids_round_trip() {
        for e in [Extractor::MeanHog, Extractor::MMeanHog(10), Extractor::MMeanHog(4)] {
            assert_eq!(e.id().parse::<Extractor>().unwrap(), e);
        }
        assert!("sift".parse::<Extractor>().is_err());
    }

    #[test]
    fn feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = FeatureSet::new("mean-hog", 3);
        set.push("a", vec![0.1, 1.0 / 3.0, 2.5e-300]).unwrap();
        set.push("b", vec![-0.0, 7.0, f64::MIN_POSITIVE]).unwrap();
        for name in ["f.json", "f.bin"] {
            let p = dir.path().join(name);
            set.save(&p).unwrap();
            let back = FeatureSet::load(&p).unwrap();
            assert_eq!(back, set);
            for (x, y) in back.records.iter().zip(&set.records) {
                for (a, b) in x.values.iter().zip(&y.values) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        let p = dir.path().join("f.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(FeatureSet::load(&p).is_err());
        assert!(matches!(set.push("c", vec![1.0]), Err(FeatureError::DimensionMismatch { .. })));
        assert!(matches!(set.push("c", vec![1.0, f64::NAN, 0.0]), Err(FeatureError::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn descriptors_are_bounded(seed_value in any::<u64>()) {
            let img = line(seed_value);
            let grid = hog_cells(&normalize_height(&img)).unwrap();
            for b in &grid.blocks {
                for &v in b.iter() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn mirror_keeps_mean_norm(seed_value in any::<u64>(), cells in 2u32..40) {
            let mut rng = crate::seed::rng(seed_value);
            let img = LineImage::from_fn(cells * 8, 64, |_, _| rand::Rng::random(&mut rng));
            let norm = |v: &FeatureVector| v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            let a = mean_hog(&img).unwrap();
            let b = mean_hog(&reflect_vertical_axis(&img)).unwrap();
            prop_assert!((norm(&a) - norm(&b)).abs() < 1e-6);
        }
    }
}
