//! Streaming test execution: per-sample K+1 predictions, a CUSUM world-change
//! detector that reweights instance novelty, and transcript novelty.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evm::{EvmError, EvmModel, ProbabilityVector, NOVEL_LABEL};
use crate::features::FeatureSet;
use crate::seed;
use crate::testgen::TestStream;

/// Character a transcriber emits for a symbol it does not know.
pub const NOVEL_CHAR_MARKER: char = '#';
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("no features for sample {0:?}")]
    MissingFeatures(String),
    #[error("no scripted score for sample {0:?}")]
    MissingScore(String),
    #[error(transparent)]
    Evm(#[from] EvmError),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: id {id:?} is not in the stream")]
    UnknownId { line: usize, id: String },
    #[error("transcripts were supplied but the agent has no alphabet")]
    MissingAlphabet,
    #[error("invalid detector setting: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that maps a sample to a K+1 probability vector.
pub trait Agent: Sync {
    /// Known class labels, in probability-vector order.
    fn labels(&self) -> Vec<String>;
    /// Novelty threshold δ_o on k_m.
    fn threshold(&self) -> f64;
    fn predict(&self, sample_id: &str) -> Result<ProbabilityVector, RunnerError>;
    /// Predicted transcript, when the agent has a transcription source.
    fn transcript(&self, _sample_id: &str) -> Option<&str> {
        None
    }
    fn alphabet(&self) -> Option<&BTreeSet<char>> {
        None
    }
}

/// Calibrated EVM writer model over precomputed features, with optional
/// external transcripts.
pub struct EvmAgent {
    pub writer_model: EvmModel,
    features: FeatureSet,
    index: HashMap<String, usize>,
    transcripts: BTreeMap<String, String>,
    alphabet: Option<BTreeSet<char>>,
    threshold: f64,
}

impl EvmAgent {
    pub fn new(writer_model: EvmModel, features: FeatureSet) -> Result<Self, RunnerError> {
        let threshold = writer_model.threshold.ok_or(EvmError::Uncalibrated)?;
        if features.extractor != writer_model.extractor {
            return Err(EvmError::ExtractorMismatch {
                model: writer_model.extractor.clone(),
                features: features.extractor.clone(),
            }
            .into());
        }
        let index = features
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(EvmAgent {
            writer_model,
            features,
            index,
            transcripts: BTreeMap::new(),
            alphabet: None,
            threshold,
        })
    }

    pub fn with_transcripts(
        mut self,
        transcripts: BTreeMap<String, String>,
        alphabet: BTreeSet<char>,
    ) -> Result<Self, RunnerError> {
        if alphabet.is_empty() && !transcripts.is_empty() {
            return Err(RunnerError::MissingAlphabet);
        }
        self.transcripts = transcripts;
        self.alphabet = Some(alphabet);
        Ok(self)
    }
}

impl Agent for EvmAgent {
    fn labels(&self) -> Vec<String> {
        self.writer_model.labels().into_iter().map(String::from).collect()
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn predict(&self, sample_id: &str) -> Result<ProbabilityVector, RunnerError> {
        let i = *self
            .index
            .get(sample_id)
            .ok_or_else(|| RunnerError::MissingFeatures(sample_id.to_string()))?;
        let values = &self.features.records[i].values;
        let scores = self.writer_model.scores(values)?;
        Ok(crate::evm::probabilities(&scores))
    }

    fn transcript(&self, sample_id: &str) -> Option<&str> {
        self.transcripts.get(sample_id).map(String::as_str)
    }

    fn alphabet(&self) -> Option<&BTreeSet<char>> {
        self.alphabet.as_ref()
    }
}

/// Single-class agent returning a preset novelty score per sample.
pub struct ScriptedAgent {
    scores: HashMap<String, f64>,
    threshold: f64,
}

impl ScriptedAgent {
    pub fn new(scores: HashMap<String, f64>, threshold: f64) -> Self {
        ScriptedAgent { scores, threshold }
    }

    /// Scores drawn from `pre` before the introduction index and from `post`
    /// from it onwards, regardless of sample labels.
    pub fn by_phase(stream: &TestStream, pre: (f64, f64), post: (f64, f64), threshold: f64, seed_value: u64) -> Self {
        Self::draw(stream, threshold, seed_value, |i, _| {
            if i < stream.introduction_index {
                pre
            } else {
                post
            }
        })
    }

    /// Scores drawn from `novel` for novel samples and `known` otherwise.
    pub fn by_label(stream: &TestStream, known: (f64, f64), novel: (f64, f64), threshold: f64, seed_value: u64) -> Self {
        Self::draw(stream, threshold, seed_value, |_, n| if n { novel } else { known })
    }

    fn draw(
        stream: &TestStream,
        threshold: f64,
        seed_value: u64,
        params: impl Fn(usize, bool) -> (f64, f64),
    ) -> Self {
        let mut rng = seed::rng(seed::derive(seed_value, "runner.scripted"));
        let scores = stream
            .samples
            .iter()
            .zip(&stream.is_novel)
            .enumerate()
            .map(|(i, (id, &n))| {
                let (mu, sd) = params(i, n);
                let v = Normal::new(mu, sd).expect("valid normal").sample(&mut rng);
                (id.clone(), v.clamp(0.0, 1.0))
            })
            .collect();
        ScriptedAgent { scores, threshold }
    }
}

impl Agent for ScriptedAgent {
    fn labels(&self) -> Vec<String> {
        vec!["known".into()]
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn predict(&self, sample_id: &str) -> Result<ProbabilityVector, RunnerError> {
        let s = *self
            .scores
            .get(sample_id)
            .ok_or_else(|| RunnerError::MissingScore(sample_id.to_string()))?;
        Ok(ProbabilityVector(vec![1.0 - s, s]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Leading samples treated as the non-novel prior.
    pub prior_window: usize,
    pub slack_sigma: f64,
    pub alarm_sigma: f64,
    /// Lower bound on the baseline deviation, so a constant prior cannot
    /// make every fluctuation an alarm.
    pub min_sigma: f64,
    pub w_pre: f64,
    pub ramp: usize,
    pub top_k: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            prior_window: 64,
            slack_sigma: 0.5,
            alarm_sigma: 5.0,
            min_sigma: 0.01,
            w_pre: 0.25,
            ramp: 32,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: &str| Err(RunnerError::InvalidConfig(m.to_string()));
        if self.prior_window < 2 {
            return bad("prior_window must be at least 2");
        }
        if !(self.slack_sigma >= 0.0 && self.alarm_sigma > 0.0 && self.min_sigma > 0.0) {
            return bad("slack must be non-negative, alarm and min_sigma positive");
        }
        if !(0.0..=1.0).contains(&self.w_pre) {
            return bad("w_pre must lie in [0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        Ok(())
    }

    /// Instance weight at `position` given a detection at `detected`.
    pub fn weight(&self, position: usize, detected: Option<usize>) -> f64 {
        match detected {
            Some(d) if position > d => {
                if self.ramp == 0 {
                    1.0
                } else {
                    let t = ((position - d) as f64 / self.ramp as f64).min(1.0);
                    self.w_pre + (1.0 - self.w_pre) * t
                }
            }
            _ => self.w_pre,
        }
    }
}

/// One-sided CUSUM over batch means of raw novelty scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeDetector {
    pub config: DetectorConfig,
    prior: Vec<f64>,
    pub baseline: Option<(f64, f64)>,
    pub statistic: f64,
    pub detection: Option<usize>,
}

impl ChangeDetector {
    pub fn new(config: DetectorConfig) -> Self {
        ChangeDetector {
            config,
            prior: Vec::new(),
            baseline: None,
            statistic: 0.0,
            detection: None,
        }
    }

    /// Feeds one batch starting at `start`; `scores` are its raw scores.
    pub fn update(&mut self, start: usize, scores: &[f64]) {
        let cfg = self.config;
        for (i, &s) in scores.iter().enumerate() {
            if start + i < cfg.prior_window {
                self.prior.push(s);
            }
        }
        if self.baseline.is_none() && self.prior.len() >= cfg.prior_window {
            let n = self.prior.len() as f64;
            let mean = self.prior.iter().sum::<f64>() / n;
            let var = self.prior.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            self.baseline = Some((mean, var.sqrt().max(cfg.min_sigma)));
        }
        let Some((mu, sigma)) = self.baseline else {
            return;
        };
        if self.detection.is_some() || start < cfg.prior_window || scores.is_empty() {
            return;
        }
        let m = scores.iter().sum::<f64>() / scores.len() as f64;
        self.statistic = (self.statistic + m - mu - cfg.slack_sigma * sigma).max(0.0);
        if self.statistic > cfg.alarm_sigma * sigma {
            self.detection = Some(start + scores.len() - 1);
        }
    }
}

/// Per-sample agent output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub position: usize,
    pub probabilities: Vec<f64>,
    pub top_k: Vec<String>,
    pub raw_novelty: f64,
    pub weighted_novelty: f64,
    pub novel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_novel: Option<bool>,
    pub world_changed: bool,
}

/// Labels of the `k` most probable entries, the novel slot included.
pub fn top_k(p: &ProbabilityVector, labels: &[String], k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..p.0.len()).collect();
    order.sort_by(|&a, &b| p.0[b].total_cmp(&p.0[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| labels.get(i).cloned().unwrap_or_else(|| NOVEL_LABEL.to_string()))
        .collect()
}

/// True when the transcript contains the novel-character marker or any
/// character outside the alphabet.
pub fn transcript_novelty(transcript: &str, alphabet: &BTreeSet<char>) -> bool {
    transcript
        .chars()
        .any(|c| c == NOVEL_CHAR_MARKER || !alphabet.contains(&c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub test_id: String,
    pub records: Vec<PredictionRecord>,
    pub detection: Option<usize>,
}

/// Runs one stream batch by batch. Records of a batch depend only on that
/// batch's samples and the detector state after the preceding batches.
pub fn run_test(agent: &dyn Agent, stream: &TestStream, config: &DetectorConfig) -> Result<RunOutput, RunnerError> {
    run_ids(agent, &stream.test_id(), &stream.samples, stream.batch_size.max(1), config)
}

pub fn run_ids(
    agent: &dyn Agent,
    test_id: &str,
    samples: &[String],
    batch_size: usize,
    config: &DetectorConfig,
) -> Result<RunOutput, RunnerError> {
    config.validate()?;
    let labels = agent.labels();
    let cut = 1.0 - agent.threshold();
    let mut detector = ChangeDetector::new(*config);
    let mut records = Vec::with_capacity(samples.len());
    for (b, batch) in samples.chunks(batch_size).enumerate() {
        let start = b * batch_size;
        let known_detection = detector.detection;
        let mut raws = Vec::with_capacity(batch.len());
        for (i, id) in batch.iter().enumerate() {
            let position = start + i;
            let p = agent.predict(id)?;
            let raw = p.novel();
            let weighted = (raw * config.weight(position, known_detection)).clamp(0.0, 1.0);
            let transcript = agent.transcript(id).map(String::from);
            let transcript_novel = match (&transcript, agent.alphabet()) {
                (Some(t), Some(a)) => Some(transcript_novelty(t, a)),
                _ => None,
            };
            raws.push(raw);
            records.push(PredictionRecord {
                id: id.clone(),
                position,
                top_k: top_k(&p, &labels, config.top_k),
                probabilities: p.0,
                raw_novelty: raw,
                weighted_novelty: weighted,
                novel: weighted >= cut,
                transcript,
                transcript_novel,
                world_changed: known_detection.is_some_and(|d| position > d),
            });
        }
        detector.update(start, &raws);
    }
    Ok(RunOutput {
        test_id: test_id.to_string(),
        records,
        detection: detector.detection,
    })
}

/// Runs tests in parallel; results keep the input order.
pub fn run_tests(
    agent: &dyn Agent,
    streams: &[TestStream],
    config: &DetectorConfig,
) -> Vec<Result<RunOutput, RunnerError>> {
    streams.par_iter().map(|s| run_test(agent, s, config)).collect()
}

pub fn records_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<(), RunnerError> {
    let io = |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(records_to_jsonl(records).as_bytes()).map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, RunnerError> {
    let text = fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunnerError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptLine {
    id: String,
    transcript: String,
}

/// Parses `{"id": .., "transcript": ..}` lines, rejecting duplicates and,
/// when `known_ids` is given, ids outside it.
pub fn parse_external_predictions(
    text: &str,
    known_ids: Option<&BTreeSet<String>>,
) -> Result<BTreeMap<String, String>, RunnerError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let rec: TranscriptLine = serde_json::from_str(line).map_err(|e| RunnerError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        if known_ids.is_some_and(|k| !k.contains(&rec.id)) {
            return Err(RunnerError::UnknownId {
                line: line_no,
                id: rec.id,
            });
        }
        if out.contains_key(&rec.id) {
            return Err(RunnerError::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        out.insert(rec.id, rec.transcript);
    }
    Ok(out)
}

pub fn ingest_external_predictions(
    path: &Path,
    known_ids: Option<&BTreeSet<String>>,
) -> Result<BTreeMap<String, String>, RunnerError> {
    let text = fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_external_predictions(&text, known_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Difficulty, NoveltyType};
    use crate::testgen::{DistributionType, TestSpec};
    use proptest::prelude::*;

    fn stream(len: usize, intro: usize, novel: bool) -> TestStream {
        TestStream {
            spec: TestSpec {
                index: 0,
                mean_introduction_point: intro as f64 / len as f64,
                novelty_density: 1.0,
                novelty_type: NoveltyType::Writer,
                difficulty: Difficulty::Easy,
                distribution_type: DistributionType::Flat,
                test_length: len,
                seed: 1,
                reorder_index: 0,
            },
            samples: (0..len).map(|i| format!("s{i}")).collect(),
            introduction_index: intro,
            is_novel: (0..len).map(|i| novel && i >= intro).collect(),
            batch_size: 16,
        }
    }

    #[test]
    fn detects_a_phase_shift_promptly() {
        let s = stream(512, 256, true);
        let agent = ScriptedAgent::by_phase(&s, (0.2, 0.05), (0.8, 0.05), 0.7, 4);
        let out = run_test(&agent, &s, &DetectorConfig::default()).unwrap();
        let d = out.detection.unwrap();
        assert!((256..256 + 16).contains(&d), "{d}");
        assert!(out.records.iter().all(|r| r.world_changed == (r.position > d)));
        let w: Vec<f64> = out
            .records
            .iter()
            .map(|r| r.weighted_novelty / r.raw_novelty.max(1e-300))
            .collect();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[511] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_stream_never_changes() {
        let s = stream(512, 256, false);
        let agent = ScriptedAgent::by_label(&s, (0.2, 0.05), (0.8, 0.05), 0.7, 9);
        let out = run_test(&agent, &s, &DetectorConfig::default()).unwrap();
        assert_eq!(out.detection, None);
        assert!(out.records.iter().all(|r| !r.world_changed));
    }

    #[test]
    fn unit_pre_weight_is_identity() {
        let s = stream(256, 128, true);
        let agent = ScriptedAgent::by_phase(&s, (0.2, 0.05), (0.8, 0.05), 0.7, 2);
        let cfg = DetectorConfig {
            w_pre: 1.0,
            ..Default::default()
        };
        let out = run_test(&agent, &s, &cfg).unwrap();
        assert!(out.records.iter().all(|r| r.weighted_novelty == r.raw_novelty));
    }

    #[test]
    fn transcript_rule() {
        let ascii: BTreeSet<char> = (' '..='~').filter(|&c| c != '#').collect();
        assert!(!transcript_novelty("hello", &ascii));
        assert!(transcript_novelty("he#lo", &ascii));
        assert!(transcript_novelty("héllo", &ascii));
    }

    #[test]
    fn external_predictions() {
        let ids: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let text = "{\"id\":\"a\",\"transcript\":\"x\"}\n{\"id\":\"b\",\"transcript\":\"y\"}\n{\"id\":\"c\",\"transcript\":\"z\"}\n";
        assert_eq!(parse_external_predictions(text, Some(&ids)).unwrap().len(), 3);
        let dup = "{\"id\":\"a\",\"transcript\":\"x\"}\n{\"id\":\"a\",\"transcript\":\"y\"}\n";
        assert!(matches!(
            parse_external_predictions(dup, Some(&ids)),
            Err(RunnerError::DuplicateId { line: 2, .. })
        ));
        let unknown = "{\"id\":\"zz\",\"transcript\":\"x\"}\n";
        match parse_external_predictions(unknown, Some(&ids)) {
            Err(e @ RunnerError::UnknownId { .. }) => assert!(e.to_string().contains("zz")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn top_k_includes_novel_slot() {
        let p = ProbabilityVector(vec![0.1, 0.3, 0.6]);
        let labels = vec!["a".to_string(), "b".to_string()];
        assert_eq!(top_k(&p, &labels, 2), vec!["NOVEL", "b"]);
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let s = stream(64, 32, true);
        let agent = ScriptedAgent::by_phase(&s, (0.2, 0.05), (0.8, 0.05), 0.7, 1);
        let out = run_test(&agent, &s, &DetectorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        write_records(&p, &out.records).unwrap();
        assert_eq!(read_records(&p).unwrap(), out.records);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn no_look_ahead(seed_value in any::<u64>(), cut in 1usize..400, intro in 100usize..380) {
            let s = stream(400, intro, true);
            let agent = ScriptedAgent::by_phase(&s, (0.2, 0.05), (0.8, 0.05), 0.7, seed_value);
            let cfg = DetectorConfig::default();
            let full = run_test(&agent, &s, &cfg).unwrap();
            let prefix = run_ids(&agent, "p", &s.samples[..cut], 16, &cfg).unwrap();
            prop_assert_eq!(&full.records[..cut], &prefix.records[..]);
        }

        #[test]
        fn weights_are_monotone(d in 0usize..500, ramp in 0usize..64, w_pre in 0.0f64..=1.0) {
            let cfg = DetectorConfig { ramp, w_pre, ..Default::default() };
            let w: Vec<f64> = (0..600).map(|p| cfg.weight(p, Some(d))).collect();
            prop_assert!(w.windows(2).all(|x| x[0] <= x[1]));
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
