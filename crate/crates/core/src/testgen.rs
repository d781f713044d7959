//! Parameterized novelty-stream tests: enumeration of the condition grid,
//! stream generation with skewed novelty placement, and reorderings.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Difficulty, Manifest, NoveltyType};
use crate::seed;

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_JITTER: f64 = 0.05;
pub const MAX_REORDER: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum TestgenError {
    #[error("value set {0:?} is empty")]
    EmptyValueSet(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} pool has {available} samples, {needed} needed")]
    InsufficientPool {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("density {density} over a {post}-sample window yields {count} novel samples")]
    UnsatisfiableDensity {
        density: f64,
        post: usize,
        count: usize,
    },
    #[error("reorder index {0} is outside 1..={MAX_REORDER}")]
    ReorderOutOfRange(usize),
    #[error("oracle for {0} does not match its seal")]
    SealMismatch(String),
    #[error("stream {stream} and oracle {oracle} disagree")]
    OracleMismatch { stream: String, oracle: String },
    #[error("malformed test file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Positional skew of novel samples within the post-novelty window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistributionType {
    /// Dense early (positive skew).
    High,
    /// Dense late (negative skew).
    Low,
    Mid,
    Flat,
}

impl DistributionType {
    pub const ALL: [DistributionType; 4] = [Self::High, Self::Low, Self::Mid, Self::Flat];

    pub fn beta(self) -> (f64, f64) {
        match self {
            Self::High => (1.5, 4.0),
            Self::Low => (4.0, 1.5),
            Self::Mid => (4.0, 4.0),
            Self::Flat => (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    pub introduction_points: Vec<f64>,
    pub densities: Vec<f64>,
    pub novelty_types: Vec<NoveltyType>,
    pub difficulties: Vec<Difficulty>,
    pub distributions: Vec<DistributionType>,
    pub lengths: Vec<usize>,
    /// Half-width of the uniform jitter on the introduction point, as a
    /// fraction of the length.
    pub jitter: f64,
    pub batch_size: usize,
    /// Reorderings generated per canonical stream.
    pub reorderings: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            introduction_points: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            densities: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            novelty_types: vec![NoveltyType::Writer, NoveltyType::Letter, NoveltyType::Background],
            difficulties: vec![Difficulty::Easy, Difficulty::Medium, Difficulty::Hard],
            distributions: DistributionType::ALL.to_vec(),
            lengths: vec![512, 768, 1024],
            jitter: DEFAULT_JITTER,
            batch_size: DEFAULT_BATCH_SIZE,
            reorderings: MAX_REORDER,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<(), TestgenError> {
        let empty = [
            ("introduction_points", self.introduction_points.is_empty()),
            ("densities", self.densities.is_empty()),
            ("novelty_types", self.novelty_types.is_empty()),
            ("difficulties", self.difficulties.is_empty()),
            ("distributions", self.distributions.is_empty()),
            ("lengths", self.lengths.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(TestgenError::EmptyValueSet(name));
        }
        let bad = |m: String| Err(TestgenError::InvalidConfig(m));
        if let Some(p) = self.introduction_points.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return bad(format!("introduction point {p} is outside (0, 1)"));
        }
        if let Some(d) = self.densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return bad(format!("density {d} is outside (0, 1]"));
        }
        if self.novelty_types.iter().any(|t| !t.is_novel()) {
            return bad("novelty type None cannot form a test".into());
        }
        if self.difficulties.contains(&Difficulty::Unassigned) {
            return bad("difficulty Unassigned cannot form a test".into());
        }
        if self.lengths.iter().any(|&l| l < 2) {
            return bad("test lengths must be at least 2".into());
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad(format!("jitter {} is outside [0, 0.5)", self.jitter));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.reorderings > MAX_REORDER {
            return bad(format!("at most {MAX_REORDER} reorderings"));
        }
        Ok(())
    }

    fn introduction_bounds(&self) -> (f64, f64) {
        let lo = self.introduction_points.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.introduction_points.iter().copied().fold(0.0, f64::max);
        (lo, hi)
    }
}

/// One experimental condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub index: usize,
    pub mean_introduction_point: f64,
    pub novelty_density: f64,
    pub novelty_type: NoveltyType,
    pub difficulty: Difficulty,
    pub distribution_type: DistributionType,
    pub test_length: usize,
    pub seed: u64,
    pub reorder_index: usize,
}

impl TestSpec {
    pub fn test_id(&self) -> String {
        format!("t{:05}-r{}", self.index, self.reorder_index)
    }
}

/// Cartesian product of the configured value sets, in a fixed nesting order.
pub fn enumerate_specs(config: &TestConfig, seed_value: u64) -> Result<Vec<TestSpec>, TestgenError> {
    config.validate()?;
    let mut out = Vec::new();
    for &p in &config.introduction_points {
        for &d in &config.densities {
            for &t in &config.novelty_types {
                for &diff in &config.difficulties {
                    for &dist in &config.distributions {
                        for &len in &config.lengths {
                            let index = out.len();
                            out.push(TestSpec {
                                index,
                                mean_introduction_point: p,
                                novelty_density: d,
                                novelty_type: t,
                                difficulty: diff,
                                distribution_type: dist,
                                test_length: len,
                                seed: seed::derive_indexed(seed_value, "testgen.spec", index as u64),
                                reorder_index: 0,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovelCandidate {
    pub id: String,
    pub novelty_type: NoveltyType,
    pub difficulty: Difficulty,
}

/// Sample ids available to the generator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pools {
    pub non_novel: Vec<String>,
    pub novel: Vec<NovelCandidate>,
}

impl Pools {
    /// Records labeled non-novel go to the non-novel pool unless their writer
    /// is one of the manifest's novel writers; novel records with an assigned
    /// difficulty go to the novel pool. Ids are sorted for stability.
    pub fn from_manifests<'a>(manifests: impl IntoIterator<Item = &'a Manifest>) -> Self {
        let mut pools = Pools::default();
        for m in manifests {
            for r in &m.records {
                if r.labels.novelty_type.is_novel() {
                    if r.labels.difficulty != Difficulty::Unassigned {
                        pools.novel.push(NovelCandidate {
                            id: r.id.clone(),
                            novelty_type: r.labels.novelty_type,
                            difficulty: r.labels.difficulty,
                        });
                    }
                } else if !r
                    .labels
                    .writer
                    .as_deref()
                    .is_some_and(|w| m.novel_writers.contains(w))
                {
                    pools.non_novel.push(r.id.clone());
                }
            }
        }
        pools.non_novel.sort();
        pools.non_novel.dedup();
        pools.novel.sort_by(|a, b| a.id.cmp(&b.id));
        pools.novel.dedup_by(|a, b| a.id == b.id);
        pools
    }

    fn novel_ids(&self, t: NoveltyType, d: Difficulty) -> Vec<&str> {
        self.novel
            .iter()
            .filter(|c| c.novelty_type == t && c.difficulty == d)
            .map(|c| c.id.as_str())
            .collect()
    }
}

/// A generated test with its oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestStream {
    pub spec: TestSpec,
    pub samples: Vec<String>,
    pub introduction_index: usize,
    pub is_novel: Vec<bool>,
    pub batch_size: usize,
}

impl TestStream {
    pub fn test_id(&self) -> String {
        self.spec.test_id()
    }

    pub fn post_len(&self) -> usize {
        self.samples.len() - self.introduction_index
    }

    pub fn novel_count(&self) -> usize {
        self.is_novel.iter().filter(|&&n| n).count()
    }

    /// Novel fraction of the post-novelty window.
    pub fn empirical_density(&self) -> f64 {
        self.novel_count() as f64 / self.post_len() as f64
    }

    /// Mean novel position relative to the post-novelty window, in [0, 1].
    pub fn mean_normalized_novel_position(&self) -> f64 {
        let post = self.post_len();
        let span = (post.max(2) - 1) as f64;
        let positions: Vec<f64> = self
            .is_novel
            .iter()
            .enumerate()
            .filter(|(_, &n)| n)
            .map(|(i, _)| (i - self.introduction_index) as f64 / span)
            .collect();
        positions.iter().sum::<f64>() / positions.len().max(1) as f64
    }
}

/// Realized introduction index: the mean point jittered by up to `jitter`
/// of the length, kept inside the configured range of mean points.
fn introduction_index(spec: &TestSpec, config: &TestConfig, rng: &mut impl Rng) -> usize {
    let len = spec.test_length as f64;
    let j = if config.jitter > 0.0 {
        rng.random_range(-config.jitter..=config.jitter)
    } else {
        0.0
    };
    let (lo, hi) = config.introduction_bounds();
    let lo = (lo.min(spec.mean_introduction_point) * len).round();
    let hi = (hi.max(spec.mean_introduction_point) * len).round();
    let idx = ((spec.mean_introduction_point + j) * len).round().clamp(lo, hi);
    (idx as usize).clamp(1, spec.test_length - 1)
}

/// Strictly increasing slots in `0..post` following sorted Beta draws.
fn place(dist: DistributionType, n: usize, post: usize, rng: &mut impl Rng) -> Vec<usize> {
    let (a, b) = dist.beta();
    let beta = Beta::new(a, b).expect("valid beta parameters");
    let mut u: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    u.sort_by(f64::total_cmp);
    let mut slots = Vec::with_capacity(n);
    for (i, v) in u.into_iter().enumerate() {
        let target = (v * (post - 1) as f64).round() as usize;
        let floor = slots.last().map_or(0, |&s: &usize| s + 1);
        slots.push(target.max(floor).min(post - n + i));
    }
    slots
}

/// Generates the canonical (reorder 0) stream of `spec`.
pub fn generate(spec: &TestSpec, config: &TestConfig, pools: &Pools) -> Result<TestStream, TestgenError> {
    let mut rng = seed::rng(seed::derive(spec.seed, "testgen.generate"));
    let len = spec.test_length;
    let intro = introduction_index(spec, config, &mut rng);
    let post = len - intro;
    let n_novel = (spec.novelty_density * post as f64).round() as usize;
    if n_novel == 0 || n_novel > post {
        return Err(TestgenError::UnsatisfiableDensity {
            density: spec.novelty_density,
            post,
            count: n_novel,
        });
    }
    let candidates = pools.novel_ids(spec.novelty_type, spec.difficulty);
    if candidates.len() < n_novel {
        return Err(TestgenError::InsufficientPool {
            what: format!("{:?}/{:?} novel", spec.novelty_type, spec.difficulty),
            needed: n_novel,
            available: candidates.len(),
        });
    }
    let n_known = len - n_novel;
    if pools.non_novel.len() < n_known {
        return Err(TestgenError::InsufficientPool {
            what: "non-novel".into(),
            needed: n_known,
            available: pools.non_novel.len(),
        });
    }
    let novel: Vec<&str> = rand::seq::index::sample(&mut rng, candidates.len(), n_novel)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let known: Vec<&str> = rand::seq::index::sample(&mut rng, pools.non_novel.len(), n_known)
        .into_iter()
        .map(|i| pools.non_novel[i].as_str())
        .collect();
    let mut is_novel = vec![false; len];
    for s in place(spec.distribution_type, n_novel, post, &mut rng) {
        is_novel[intro + s] = true;
    }
    let (mut ni, mut ki) = (novel.into_iter(), known.into_iter());
    let samples = is_novel
        .iter()
        .map(|&n| {
            let next = if n { ni.next() } else { ki.next() };
            next.expect("pool sizes match the mask").to_string()
        })
        .collect();
    Ok(TestStream {
        spec: spec.clone(),
        samples,
        introduction_index: intro,
        is_novel,
        batch_size: config.batch_size,
    })
}

/// Permutes samples within the novel and non-novel positions, keeping the
/// mask and introduction index.
pub fn reorder(stream: &TestStream, k: usize) -> Result<TestStream, TestgenError> {
    if !(1..=MAX_REORDER).contains(&k) {
        return Err(TestgenError::ReorderOutOfRange(k));
    }
    let mut rng = seed::rng(seed::derive_indexed(stream.spec.seed, "testgen.reorder", k as u64));
    let mut out = stream.clone();
    out.spec.reorder_index = k;
    for class in [false, true] {
        let positions: Vec<usize> = (0..stream.samples.len())
            .filter(|&i| stream.is_novel[i] == class)
            .collect();
        let mut ids: Vec<String> = positions.iter().map(|&i| stream.samples[i].clone()).collect();
        ids.shuffle(&mut rng);
        for (p, id) in positions.into_iter().zip(ids) {
            out.samples[p] = id;
        }
    }
    Ok(out)
}

/// Canonical stream plus `config.reorderings` reorderings for every spec.
pub fn generate_all(
    specs: &[TestSpec],
    config: &TestConfig,
    pools: &Pools,
) -> Result<Vec<TestStream>, TestgenError> {
    let nested: Vec<Vec<TestStream>> = specs
        .par_iter()
        .map(|spec| {
            let base = generate(spec, config, pools)?;
            let mut all = vec![base.clone()];
            for k in 1..=config.reorderings {
                all.push(reorder(&base, k)?);
            }
            Ok(all)
        })
        .collect::<Result<_, TestgenError>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Agent-visible part of a test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamFile {
    pub test_id: String,
    pub batch_size: usize,
    pub samples: Vec<String>,
}

/// Ground truth, sealed with a SHA-256 over its content and the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFile {
    pub test_id: String,
    pub spec: TestSpec,
    pub introduction_index: usize,
    pub is_novel: Vec<bool>,
    pub seal: String,
}

fn seal_of(stream: &StreamFile, oracle: &OracleFile) -> String {
    let body = serde_json::json!({
        "stream": stream,
        "test_id": oracle.test_id,
        "spec": oracle.spec,
        "introduction_index": oracle.introduction_index,
        "is_novel": oracle.is_novel,
    });
    let digest = Sha256::digest(body.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl TestStream {
    pub fn split(&self) -> (StreamFile, OracleFile) {
        let stream = StreamFile {
            test_id: self.test_id(),
            batch_size: self.batch_size,
            samples: self.samples.clone(),
        };
        let mut oracle = OracleFile {
            test_id: self.test_id(),
            spec: self.spec.clone(),
            introduction_index: self.introduction_index,
            is_novel: self.is_novel.clone(),
            seal: String::new(),
        };
        oracle.seal = seal_of(&stream, &oracle);
        (stream, oracle)
    }

    pub fn join(stream: StreamFile, oracle: OracleFile) -> Result<Self, TestgenError> {
        if stream.test_id != oracle.test_id || stream.samples.len() != oracle.is_novel.len() {
            return Err(TestgenError::OracleMismatch {
                stream: stream.test_id,
                oracle: oracle.test_id,
            });
        }
        if seal_of(&stream, &oracle) != oracle.seal {
            return Err(TestgenError::SealMismatch(oracle.test_id));
        }
        Ok(TestStream {
            spec: oracle.spec,
            samples: stream.samples,
            introduction_index: oracle.introduction_index,
            is_novel: oracle.is_novel,
            batch_size: stream.batch_size,
        })
    }
}

pub fn stream_path(dir: &Path, test_id: &str) -> PathBuf {
    dir.join(format!("{test_id}.stream.json"))
}

pub fn oracle_path(dir: &Path, test_id: &str) -> PathBuf {
    dir.join(format!("{test_id}.oracle.json"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), TestgenError> {
    let mut s = serde_json::to_string(value).expect("test files serialize");
    s.push('\n');
    fs::write(path, s).map_err(|source| TestgenError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, TestgenError> {
    let text = fs::read_to_string(path).map_err(|source| TestgenError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| TestgenError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_test(dir: &Path, stream: &TestStream) -> Result<(), TestgenError> {
    let (s, o) = stream.split();
    write_json(&stream_path(dir, &s.test_id), &s)?;
    write_json(&oracle_path(dir, &o.test_id), &o)
}

pub fn read_stream(path: &Path) -> Result<StreamFile, TestgenError> {
    read_json(path)
}

/// Reads a stream with its sibling oracle and checks the seal.
pub fn read_test(dir: &Path, test_id: &str) -> Result<TestStream, TestgenError> {
    let s: StreamFile = read_json(&stream_path(dir, test_id))?;
    let o: OracleFile = read_json(&oracle_path(dir, test_id))?;
    TestStream::join(s, o)
}

/// Test ids of every `*.stream.json` in `dir`, sorted.
pub fn list_tests(dir: &Path) -> Result<Vec<String>, TestgenError> {
    let entries = fs::read_dir(dir).map_err(|source| TestgenError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut ids = BTreeSet::new();
    for e in entries {
        let e = e.map_err(|source| TestgenError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        if let Some(id) = e.file_name().to_str().and_then(|n| n.strip_suffix(".stream.json")) {
            ids.insert(id.to_string());
        }
    }
    Ok(ids.into_iter().collect())
}
