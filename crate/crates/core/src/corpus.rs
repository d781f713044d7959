//! Line samples, manifests and fold splitting.
//!
//! A manifest is a UTF-8 JSON-lines file. An optional first line of the form
//! `{"header": {...}}` declares the alphabet and writer sets; every other
//! line is one sample record:
//!
//! ```text
//! {"header":{"version":1,"alphabet":"abc ","known_writers":["w1"],"novel_writers":["w9"]}}
//! {"id":"a01","image":"img/a01.png","writer":"w1","transcript":"ab c","appearance":"OriginalWhite","novelty_type":"None","novelty_subtype":"","difficulty":"Unassigned"}
//! ```
//!
//! Image paths are resolved relative to the manifest's directory and are only
//! checked for existence at load time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::seed;

/// Writer id used for samples whose author is not identified.
pub const UNKNOWN_WRITER: &str = "UNKNOWN";

/// Current manifest header version.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?}: image file {path} does not exist")]
    MissingImage { id: String, path: PathBuf },
    #[error("sample {id:?}: writer {writer:?} is neither known, novel nor {UNKNOWN_WRITER}")]
    UndeclaredWriter { id: String, writer: String },
    #[error("sample {id:?}: {reason}")]
    LabelInvariant { id: String, reason: String },
    #[error("too few writers for {folds} folds: need at least {needed}, found {available}")]
    TooFewWriters {
        folds: usize,
        needed: usize,
        available: usize,
    },
    #[error("fold count must be at least 3, got {0}")]
    InvalidFoldCount(usize),
}

/// Row-major 8-bit grayscale image of one text line.
#[derive(Clone, PartialEq, Eq)]
pub struct LineImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for LineImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LineImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl LineImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, CorpusError> {
        if width == 0 || height == 0 {
            return Err(CorpusError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(CorpusError::InvalidImage(format!(
                "expected {expected} pixels for {width}x{height}, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Uniform image. Panics on zero dimensions.
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    /// Builds an image from a per-pixel function `f(x, y)`. Panics on zero dimensions.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = value;
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let w = self.width as usize;
        &self.pixels[y as usize * w..(y as usize + 1) * w]
    }

    pub fn map(&self, mut f: impl FnMut(u8) -> u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Decodes a PNG or PGM file to 8-bit grayscale. Colour inputs are
    /// converted with ITU-R BT.601 luma weights; alpha is ignored.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let decoded = image::open(path).map_err(|source| CorpusError::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = match decoded {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                let rgb = other.to_rgb8();
                image::GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                    let [r, g, b] = rgb.get_pixel(x, y).0;
                    image::Luma([bt601_luma(r, g, b)])
                })
            }
        };
        let (w, h) = gray.dimensions();
        Self::new(w, h, gray.into_raw())
    }

    /// Writes the image as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), CorpusError> {
        let buf = image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("pixel buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| CorpusError::ImageDecode {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// ITU-R BT.601 luma, rounded to nearest.
pub fn bt601_luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

/// Global document appearance class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Appearance {
    OriginalWhite,
    Noise,
    Antique,
    /// Flipped over the horizontal axis.
    Reflect0,
    Blur,
    /// Mirrored over the vertical axis.
    Reflect1,
    InvertColor,
    Other(String),
}

impl Appearance {
    const OTHER_PREFIX: &'static str = "other:";
}

impl fmt::Display for Appearance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Appearance::OriginalWhite => f.write_str("OriginalWhite"),
            Appearance::Noise => f.write_str("Noise"),
            Appearance::Antique => f.write_str("Antique"),
            Appearance::Reflect0 => f.write_str("Reflect0"),
            Appearance::Blur => f.write_str("Blur"),
            Appearance::Reflect1 => f.write_str("Reflect1"),
            Appearance::InvertColor => f.write_str("InvertColor"),
            Appearance::Other(tag) => write!(f, "{}{tag}", Self::OTHER_PREFIX),
        }
    }
}

impl FromStr for Appearance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "OriginalWhite" => Appearance::OriginalWhite,
            "Noise" => Appearance::Noise,
            "Antique" => Appearance::Antique,
            "Reflect0" | "Reflect_0" => Appearance::Reflect0,
            "Blur" => Appearance::Blur,
            "Reflect1" | "Reflect_1" => Appearance::Reflect1,
            "InvertColor" => Appearance::InvertColor,
            other => match other.strip_prefix(Self::OTHER_PREFIX) {
                Some(tag) if !tag.is_empty() => Appearance::Other(tag.to_string()),
                _ => {
                    return Err(format!(
                        "unknown appearance {other:?} (custom classes need the {:?} prefix)",
                        Self::OTHER_PREFIX
                    ))
                }
            },
        })
    }
}

impl Serialize for Appearance {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Appearance {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum NoveltyType {
    #[default]
    None,
    Writer,
    /// Letter/style manipulation.
    #[serde(alias = "Style", alias = "Letter/Style")]
    Letter,
    Pen,
    Background,
}

impl NoveltyType {
    pub fn is_novel(self) -> bool {
        self != NoveltyType::None
    }
}

impl fmt::Display for NoveltyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoveltyType::None => "None",
            NoveltyType::Writer => "Writer",
            NoveltyType::Letter => "Letter",
            NoveltyType::Pen => "Pen",
            NoveltyType::Background => "Background",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    #[default]
    Unassigned,
}

/// Oracle labels attached to a sample.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SampleLabels {
    pub writer: Option<String>,
    pub transcript: Option<String>,
    pub appearance: Option<Appearance>,
    pub novelty_type: NoveltyType,
    pub novelty_subtype: String,
    pub difficulty: Difficulty,
}

impl SampleLabels {
    /// Checks that non-novel samples carry no subtype and no difficulty.
    pub fn validate(&self, id: &str) -> Result<(), CorpusError> {
        if self.novelty_type == NoveltyType::None {
            if !self.novelty_subtype.is_empty() {
                return Err(CorpusError::LabelInvariant {
                    id: id.to_string(),
                    reason: format!(
                        "non-novel sample has novelty subtype {:?}",
                        self.novelty_subtype
                    ),
                });
            }
            if self.difficulty != Difficulty::Unassigned {
                return Err(CorpusError::LabelInvariant {
                    id: id.to_string(),
                    reason: format!("non-novel sample has difficulty {:?}", self.difficulty),
                });
            }
        }
        Ok(())
    }
}

/// One decoded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LineSample {
    pub id: String,
    pub image: LineImage,
    pub labels: SampleLabels,
}

/// One manifest line: labels plus the (unresolved) image path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub labels: SampleLabels,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    writer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    appearance: Option<Appearance>,
    #[serde(default)]
    novelty_type: NoveltyType,
    #[serde(default)]
    novelty_subtype: String,
    #[serde(default)]
    difficulty: Difficulty,
}

impl From<RecordLine> for ManifestRecord {
    fn from(r: RecordLine) -> Self {
        ManifestRecord {
            id: r.id,
            image: r.image,
            labels: SampleLabels {
                writer: r.writer,
                transcript: r.transcript,
                appearance: r.appearance,
                novelty_type: r.novelty_type,
                novelty_subtype: r.novelty_subtype,
                difficulty: r.difficulty,
            },
        }
    }
}

impl From<&ManifestRecord> for RecordLine {
    fn from(r: &ManifestRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            image: r.image.clone(),
            writer: r.labels.writer.clone(),
            transcript: r.labels.transcript.clone(),
            appearance: r.labels.appearance.clone(),
            novelty_type: r.labels.novelty_type,
            novelty_subtype: r.labels.novelty_subtype.clone(),
            difficulty: r.labels.difficulty,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderBody {
    version: u32,
    alphabet: String,
    known_writers: Vec<String>,
    #[serde(default)]
    novel_writers: Vec<String>,
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    header: &'a HeaderBody,
}

/// Validated collection of sample records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub alphabet: BTreeSet<char>,
    pub known_writers: BTreeSet<String>,
    pub novel_writers: BTreeSet<String>,
    base_dir: PathBuf,
}

impl Manifest {
    /// Validates ids, label invariants and writer membership.
    pub fn new(
        records: Vec<ManifestRecord>,
        alphabet: BTreeSet<char>,
        known_writers: BTreeSet<String>,
        novel_writers: BTreeSet<String>,
    ) -> Result<Self, CorpusError> {
        let m = Manifest {
            records,
            alphabet,
            known_writers,
            novel_writers,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Derives the header from the records themselves: known writers are the
    /// identified writers of samples not labelled as writer novelty, the
    /// alphabet is every character transcribed for a known writer.
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self, CorpusError> {
        let mut known = BTreeSet::new();
        let mut novel = BTreeSet::new();
        let mut alphabet = BTreeSet::new();
        for r in &records {
            let Some(w) = r.labels.writer.as_deref() else {
                continue;
            };
            if w == UNKNOWN_WRITER {
                continue;
            }
            if r.labels.novelty_type == NoveltyType::Writer {
                novel.insert(w.to_string());
            } else {
                known.insert(w.to_string());
            }
        }
        for r in &records {
            let is_known = r
                .labels
                .writer
                .as_deref()
                .is_some_and(|w| known.contains(w));
            if is_known && r.labels.novelty_type != NoveltyType::Writer {
                if let Some(t) = &r.labels.transcript {
                    alphabet.extend(t.chars());
                }
            }
        }
        let novel = novel.difference(&known).cloned().collect();
        Manifest::new(records, alphabet, known, novel)
    }

    /// Directory against which relative image paths resolve.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
            r.labels.validate(&r.id)?;
            if let Some(w) = r.labels.writer.as_deref() {
                if w != UNKNOWN_WRITER
                    && !self.known_writers.contains(w)
                    && !self.novel_writers.contains(w)
                {
                    return Err(CorpusError::UndeclaredWriter {
                        id: r.id.clone(),
                        writer: w.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        if record.image.is_absolute() {
            record.image.clone()
        } else {
            self.base_dir.join(&record.image)
        }
    }

    /// Decodes the record's image.
    pub fn load_sample(&self, record: &ManifestRecord) -> Result<LineSample, CorpusError> {
        Ok(LineSample {
            id: record.id.clone(),
            image: LineImage::load(&self.image_path(record))?,
            labels: record.labels.clone(),
        })
    }

    /// Transcript characters outside the alphabet.
    pub fn unknown_characters(&self, record: &ManifestRecord) -> BTreeSet<char> {
        record
            .labels
            .transcript
            .as_deref()
            .unwrap_or("")
            .chars()
            .filter(|c| !self.alphabet.contains(c))
            .collect()
    }

    /// Ids of records whose transcript contains characters outside the alphabet.
    pub fn flagged_unknown_characters(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| !self.unknown_characters(r).is_empty())
            .map(|r| r.id.as_str())
            .collect()
    }

    /// Identified writers (excluding [`UNKNOWN_WRITER`]) in record order of first appearance.
    pub fn writers(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if let Some(w) = r.labels.writer.as_deref() {
                if w != UNKNOWN_WRITER && seen.insert(w) {
                    out.push(w.to_string());
                }
            }
        }
        out
    }

    /// Serializes to JSON lines, header first.
    pub fn to_jsonl(&self) -> String {
        let header = HeaderBody {
            version: MANIFEST_VERSION,
            alphabet: self.alphabet.iter().collect(),
            known_writers: self.known_writers.iter().cloned().collect(),
            novel_writers: self.novel_writers.iter().cloned().collect(),
        };
        let mut out = serde_json::to_string(&HeaderLine { header: &header })
            .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON lines without touching the filesystem.
    pub fn parse_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut header: Option<HeaderBody> = None;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let malformed = |e: serde_json::Error| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            };
            match value.as_object().and_then(|o| o.get("header")) {
                Some(h) => {
                    if header.is_some() || !records.is_empty() {
                        return Err(CorpusError::MalformedRecord {
                            line: line_no,
                            reason: "header must be the first line".into(),
                        });
                    }
                    let body: HeaderBody = serde_json::from_value(h.clone()).map_err(malformed)?;
                    if body.version != MANIFEST_VERSION {
                        return Err(CorpusError::MalformedRecord {
                            line: line_no,
                            reason: format!("unsupported manifest version {}", body.version),
                        });
                    }
                    header = Some(body);
                }
                None => {
                    let rec: RecordLine = serde_json::from_value(value).map_err(malformed)?;
                    if rec.id.is_empty() {
                        return Err(CorpusError::MalformedRecord {
                            line: line_no,
                            reason: "empty sample id".into(),
                        });
                    }
                    records.push(ManifestRecord::from(rec));
                }
            }
        }
        match header {
            Some(h) => Manifest::new(
                records,
                h.alphabet.chars().collect(),
                h.known_writers.into_iter().collect(),
                h.novel_writers.into_iter().collect(),
            ),
            None => Manifest::from_records(records),
        }
    }

    /// Restricts to the given record ids (order preserved), keeping the header sets.
    pub fn subset(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            alphabet: self.alphabet.clone(),
            known_writers: self.known_writers.clone(),
            novel_writers: self.novel_writers.clone(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Loads and validates a manifest; referenced images must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::parse_jsonl(&text)?.with_base_dir(base);
    for r in &manifest.records {
        let p = manifest.image_path(r);
        if !p.is_file() {
            return Err(CorpusError::MissingImage {
                id: r.id.clone(),
                path: p,
            });
        }
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), CorpusError> {
    fs::write(path, manifest.to_jsonl()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One cross-validation round.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Writer-disjoint cross-validation.
///
/// Writers are shuffled and halved. Half A is stratified: each of its writers'
/// samples are dealt across the folds, so every fold represents every half-A
/// writer. Half B is partitioned into `folds` disjoint writer groups.
/// Round `i` tests on fold `i`, validates on fold `i+1` and trains on the
/// rest, so validation and test always contain half-B writers absent from
/// training. Samples of [`UNKNOWN_WRITER`] or without writer are dealt
/// randomly across folds.
pub fn split_folds(manifest: &Manifest, folds: usize, seed: u64) -> Result<Vec<FoldSplit>, CorpusError> {
    if folds < 3 {
        return Err(CorpusError::InvalidFoldCount(folds));
    }
    let mut rng = seed::rng(seed::derive(seed, "corpus.split_folds"));
    let mut writers = manifest.writers();
    writers.sort();
    writers.shuffle(&mut rng);
    let half_a_len = writers.len() / 2;
    let half_b_len = writers.len() - half_a_len;
    if half_a_len < 2 || half_b_len < folds {
        return Err(CorpusError::TooFewWriters {
            folds,
            needed: folds * 2,
            available: writers.len(),
        });
    }
    let (half_a, half_b) = writers.split_at(half_a_len);

    // fold index per record
    let mut fold_of = vec![0usize; manifest.records.len()];
    let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut anonymous = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        match r.labels.writer.as_deref() {
            Some(w) if w != UNKNOWN_WRITER => by_writer.entry(w).or_default().push(i),
            _ => anonymous.push(i),
        }
    }
    for w in half_a {
        let mut idx = by_writer[w.as_str()].clone();
        idx.shuffle(&mut rng);
        let offset = rand::Rng::random_range(&mut rng, 0..folds);
        for (k, i) in idx.into_iter().enumerate() {
            fold_of[i] = (k + offset) % folds;
        }
    }
    for (g, w) in half_b.iter().enumerate() {
        for &i in &by_writer[w.as_str()] {
            fold_of[i] = g % folds;
        }
    }
    anonymous.shuffle(&mut rng);
    for (k, i) in anonymous.into_iter().enumerate() {
        fold_of[i] = k % folds;
    }

    let mut out = Vec::with_capacity(folds);
    for round in 0..folds {
        let test_fold = round;
        let val_fold = (round + 1) % folds;
        let pick = |want: &dyn Fn(usize) -> bool| -> Vec<ManifestRecord> {
            manifest
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| want(fold_of[*i]))
                .map(|(_, r)| r.clone())
                .collect()
        };
        let train_records = pick(&|f| f != test_fold && f != val_fold);
        let val_records = pick(&|f| f == val_fold);
        let test_records = pick(&|f| f == test_fold);
        let train_writers: BTreeSet<String> = train_records
            .iter()
            .filter_map(|r| r.labels.writer.clone())
            .filter(|w| w != UNKNOWN_WRITER)
            .collect();
        let build = |records: Vec<ManifestRecord>| -> Result<Manifest, CorpusError> {
            let novel: BTreeSet<String> = records
                .iter()
                .filter_map(|r| r.labels.writer.clone())
                .filter(|w| w != UNKNOWN_WRITER && !train_writers.contains(w))
                .collect();
            Ok(Manifest::new(records, manifest.alphabet.clone(), train_writers.clone(), novel)?
                .with_base_dir(manifest.base_dir.clone()))
        };
        out.push(FoldSplit {
            train: build(train_records)?,
            val: build(val_records)?,
            test: build(test_records)?,
        });
    }
    Ok(out)
}

/// Per-category ground-truth novelty answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Novel,
    Known,
    /// The category's label is absent on the sample.
    Unlabeled,
}

impl Verdict {
    fn from_bool(novel: bool) -> Self {
        if novel {
            Verdict::Novel
        } else {
            Verdict::Known
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoveltyFlags {
    pub character: Verdict,
    pub writer: Verdict,
    pub appearance: Verdict,
}

/// Oracle novelty of a sample relative to what the agent was trained on.
pub fn ground_truth_novelty(
    labels: &SampleLabels,
    alphabet: &BTreeSet<char>,
    known_writers: &BTreeSet<String>,
    training_appearances: &BTreeSet<Appearance>,
) -> NoveltyFlags {
    let character = match &labels.transcript {
        Some(t) => Verdict::from_bool(t.chars().any(|c| !alphabet.contains(&c))),
        None => Verdict::Unlabeled,
    };
    let writer = match &labels.writer {
        Some(w) => Verdict::from_bool(!known_writers.contains(w)),
        None => Verdict::Unlabeled,
    };
    let appearance = match &labels.appearance {
        Some(a) => Verdict::from_bool(!training_appearances.contains(a)),
        None => Verdict::Unlabeled,
    };
    NoveltyFlags {
        character,
        writer,
        appearance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, writer: &str, transcript: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.to_string(),
            image: PathBuf::from(format!("{id}.png")),
            labels: SampleLabels {
                writer: Some(writer.to_string()),
                transcript: Some(transcript.to_string()),
                appearance: Some(Appearance::OriginalWhite),
                ..Default::default()
            },
        }
    }

    fn ascii_alphabet() -> BTreeSet<char> {
        (' '..='~').collect()
    }

    #[test]
    fn image_rejects_bad_buffers() {
        assert!(LineImage::new(0, 3, vec![]).is_err());
        assert!(LineImage::new(2, 2, vec![0; 3]).is_err());
        assert!(LineImage::new(2, 2, vec![0; 4]).is_ok());
    }

    #[test]
    fn bt601_weights() {
        assert_eq!(bt601_luma(255, 255, 255), 255);
        assert_eq!(bt601_luma(255, 0, 0), 76);
        assert_eq!(bt601_luma(0, 255, 0), 150);
        assert_eq!(bt601_luma(0, 0, 255), 29);
    }

    #[test]
    fn loads_three_records_and_checks_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = LineImage::filled(4, 2, 200);
        for id in ["a", "b", "c"] {
            img.save_png(&dir.path().join(format!("{id}.png"))).unwrap();
        }
        let text = ["a", "b", "c"]
            .iter()
            .map(|id| serde_json::to_string(&RecordLine::from(&record(id, "w1", "hi"))).unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        let path = dir.path().join("m.jsonl");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        let s = m.load_sample(&m.records[1]).unwrap();
        assert_eq!(s.image, img);

        fs::remove_file(dir.path().join("b.png")).unwrap();
        match load_manifest(&path) {
            Err(CorpusError::MissingImage { id, .. }) => assert_eq!(id, "b"),
            other => panic!("expected missing image, got {other:?}"),
        }
    }

    #[test]
    fn pgm_and_colour_images_decode_to_gray() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("x.pgm");
        fs::write(&pgm, b"P5\n2 1\n255\n\x10\xf0").unwrap();
        let img = LineImage::load(&pgm).unwrap();
        assert_eq!(img.pixels(), &[0x10, 0xf0]);

        let rgb = image::RgbImage::from_raw(1, 1, vec![255, 0, 0]).unwrap();
        let p = dir.path().join("c.png");
        rgb.save(&p).unwrap();
        assert_eq!(LineImage::load(&p).unwrap().pixels(), &[76]);
    }

    #[test]
    fn duplicate_id_is_named() {
        let recs = vec![record("a01", "w1", "x"), record("a01", "w1", "y")];
        match Manifest::from_records(recs) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "a01"),
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = serde_json::to_string(&RecordLine::from(&record("a", "w1", "x"))).unwrap();
        let text = format!("{good}\n{{\"id\": 3}}\n");
        match Manifest::parse_jsonl(&text) {
            Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn unknown_characters_are_flagged_not_rejected() {
        let m = Manifest::new(
            vec![record("a", "w1", "cafe"), record("b", "w1", "café")],
            ascii_alphabet(),
            ["w1".to_string()].into(),
            BTreeSet::new(),
        )
        .unwrap();
        // set-difference oracle
        let expected: BTreeSet<char> = "café"
            .chars()
            .collect::<BTreeSet<_>>()
            .difference(&ascii_alphabet())
            .copied()
            .collect();
        assert_eq!(m.unknown_characters(&m.records[1]), expected);
        assert_eq!(m.flagged_unknown_characters(), vec!["b"]);
    }

    #[test]
    fn non_novel_sample_with_subtype_is_rejected() {
        let mut r = record("a", "w1", "x");
        r.labels.novelty_subtype = "Dilate".into();
        assert!(matches!(
            Manifest::from_records(vec![r]),
            Err(CorpusError::LabelInvariant { .. })
        ));
    }

    #[test]
    fn undeclared_writer_is_rejected() {
        let r = record("a", "w7", "x");
        let err = Manifest::new(vec![r], BTreeSet::new(), ["w1".into()].into(), BTreeSet::new());
        assert!(matches!(err, Err(CorpusError::UndeclaredWriter { .. })));
        let unknown = record("b", UNKNOWN_WRITER, "x");
        assert!(Manifest::new(vec![unknown], BTreeSet::new(), BTreeSet::new(), BTreeSet::new()).is_ok());
    }

    #[test]
    fn appearance_strings_round_trip() {
        for a in [
            Appearance::OriginalWhite,
            Appearance::Reflect0,
            Appearance::InvertColor,
            Appearance::Other("Sepia".into()),
        ] {
            assert_eq!(a.to_string().parse::<Appearance>().unwrap(), a);
        }
        assert!("Sepia".parse::<Appearance>().is_err());
    }

    #[test]
    fn ground_truth_examples() {
        let known: BTreeSet<String> = (1..=50).map(|i| format!("w{i}")).collect();
        let apps: BTreeSet<Appearance> = [Appearance::OriginalWhite].into();
        let mut labels = record("a", "w51", "cafe").labels;
        let f = ground_truth_novelty(&labels, &ascii_alphabet(), &known, &apps);
        assert_eq!(f.character, Verdict::Known);
        assert_eq!(f.writer, Verdict::Novel);
        assert_eq!(f.appearance, Verdict::Known);

        labels.transcript = Some("café".into());
        labels.appearance = None;
        let f = ground_truth_novelty(&labels, &ascii_alphabet(), &known, &apps);
        assert_eq!(f.character, Verdict::Novel);
        assert_eq!(f.appearance, Verdict::Unlabeled);

        labels.transcript = None;
        labels.writer = None;
        let f = ground_truth_novelty(&labels, &ascii_alphabet(), &known, &apps);
        assert_eq!(f.character, Verdict::Unlabeled);
        assert_eq!(f.writer, Verdict::Unlabeled);
    }

    fn corpus(writers: usize, per_writer: usize) -> Manifest {
        let mut recs = Vec::new();
        for w in 0..writers {
            for s in 0..per_writer {
                recs.push(record(&format!("w{w}-{s}"), &format!("w{w}"), "ab"));
            }
        }
        Manifest::from_records(recs).unwrap()
    }

    #[test]
    fn every_test_fold_has_unseen_writers() {
        let m = corpus(10, 6);
        let splits = split_folds(&m, 5, 11).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            let train: BTreeSet<_> = s.train.writers().into_iter().collect();
            let test: BTreeSet<_> = s.test.writers().into_iter().collect();
            assert!(test.difference(&train).count() >= 1);
            assert_eq!(s.test.known_writers, train);
            assert!(!s.test.novel_writers.is_empty());
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let m = corpus(12, 5);
        let a = split_folds(&m, 5, 3).unwrap();
        let b = split_folds(&m, 5, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.val, y.val);
            assert_eq!(x.test, y.test);
        }
    }

    #[test]
    fn half_b_groups_cover_exactly_once() {
        let m = corpus(20, 5);
        let splits = split_folds(&m, 5, 9).unwrap();
        // writers present in every test fold form half A
        let sets: Vec<BTreeSet<String>> =
            splits.iter().map(|s| s.test.writers().into_iter().collect()).collect();
        let half_a: BTreeSet<String> = sets
            .iter()
            .skip(1)
            .fold(sets[0].clone(), |acc, s| acc.intersection(s).cloned().collect());
        assert_eq!(half_a.len(), 10);
        let mut seen = BTreeSet::new();
        for s in &sets {
            for w in s.difference(&half_a) {
                assert!(seen.insert(w.clone()), "writer {w} in two half-B groups");
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn five_fold_writer_counts_match_reported_scale() {
        let m = corpus(432, 5);
        let splits = split_folds(&m, 5, 1).unwrap();
        let mean = |f: &dyn Fn(&FoldSplit) -> usize| {
            splits.iter().map(f).sum::<usize>() as f64 / splits.len() as f64
        };
        let train = mean(&|s| s.train.writers().len());
        let val = mean(&|s| s.val.writers().len());
        let test = mean(&|s| s.test.writers().len());
        for (got, want) in [(train, 354.0), (val, 251.0), (test, 259.0)] {
            assert!((got - want).abs() <= 0.1 * want, "got {got}, want ~{want}");
        }
    }

    #[test]
    fn too_few_writers() {
        let m = corpus(6, 3);
        assert!(matches!(split_folds(&m, 5, 0), Err(CorpusError::TooFewWriters { .. })));
        assert!(matches!(split_folds(&m, 2, 0), Err(CorpusError::InvalidFoldCount(2))));
    }

    proptest! {
        #[test]
        fn enlarging_alphabet_never_creates_character_novelty(
            text in "[a-f]{0,12}",
            base in proptest::collection::btree_set(proptest::char::range('a', 'f'), 0..6),
            extra in proptest::collection::btree_set(proptest::char::range('a', 'z'), 0..6),
        ) {
            let labels = SampleLabels { transcript: Some(text), ..Default::default() };
            let empty = BTreeSet::new();
            let small = ground_truth_novelty(&labels, &base, &empty, &BTreeSet::new());
            let big_alpha: BTreeSet<char> = base.union(&extra).copied().collect();
            let big = ground_truth_novelty(&labels, &big_alpha, &empty, &BTreeSet::new());
            if small.character == Verdict::Known {
                prop_assert_eq!(big.character, Verdict::Known);
            }
        }

        #[test]
        fn jsonl_round_trip_is_byte_stable(
            ids in proptest::collection::btree_set("[a-z]{1,6}", 1..8),
            text in "[a-z ]{0,10}",
        ) {
            let recs: Vec<_> = ids.iter().map(|id| record(id, "w1", &text)).collect();
            let m = Manifest::from_records(recs).unwrap();
            let once = m.to_jsonl();
            let twice = Manifest::parse_jsonl(&once).unwrap().to_jsonl();
            prop_assert_eq!(once, twice);
        }
    }
}
