//! Synthetic acceptance suite.
//!
//! Every check generates its own data from the root seed, compares library
//! output against an independent oracle and reports a one-line verdict.
//! Details never contain timings, so two runs print the same report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Weibull as WeibullDist};
use thiserror::Error;

use crate::augment::{self, AssetStore};
use crate::corpus::{Appearance, Difficulty, Manifest, ManifestRecord, NoveltyType, SampleLabels};
use crate::evm::{self, Distance, EvmHyperparams, EvmModel, TrainingClass};
use crate::features::{FeatureSet, FeatureVector};
use crate::metrics::cluster::{characterize_cell, CharacterizationSample, ClusterGroup};
use crate::metrics::{self, report};
use crate::runner::{self, DetectorConfig, ScriptedAgent};
use crate::seed;
use crate::style_metrics::{self, ForegroundMask, Region, SLANT_ANGLES};
use crate::synth::{self, LineStyle};
use crate::testgen::{self, DistributionType, NovelCandidate, Pools, TestConfig, TestStream};
use crate::LineImage;

#[derive(Debug, Error)]
pub enum SelfcheckError {
    #[error("unknown criterion {0}; valid ids are 1 to {max}", max = CRITERIA.len())]
    UnknownCriterion(u8),
}

/// Id, name and runtime limit in seconds of each criterion.
pub const CRITERIA: [(u8, &str, Option<u64>); 11] = [
    (1, "metric oracles", Some(10)),
    (2, "purity formula", None),
    (3, "style metrics on synthetic strokes", Some(30)),
    (4, "background compositing invariance", None),
    (5, "EVM open-set synthetic benchmark", Some(60)),
    (6, "K+1 probability contract", None),
    (7, "test generator", Some(60)),
    (8, "change detection", Some(60)),
    (9, "characterization", None),
    (10, "transform involutions and morphology", None),
    (11, "determinism and round trips", None),
];

/// Budget for the whole suite.
pub const SUITE_LIMIT: Duration = Duration::from_secs(300);

#[derive(Clone, Debug, Default)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Replaces the calibrated EVM threshold in the open-set benchmark.
    pub threshold_override: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl CriterionResult {
    /// Verdict line without timing, stable across runs.
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("[{verdict}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({:.2} s", self.summary(), self.elapsed.as_secs_f64())?;
        if let Some(l) = self.limit {
            write!(f, ", limit {} s", l.as_secs())?;
        }
        f.write_str(")")
    }
}

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        // bound first so NaN comparisons count as failures
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)+));
        }
    };
}

fn lib<T, E: fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn run_one(id: u8, options: &SelfcheckOptions) -> Result<CriterionResult, SelfcheckError> {
    let &(_, name, limit) = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .ok_or(SelfcheckError::UnknownCriterion(id))?;
    let s = seed::derive_indexed(options.seed, "selfcheck", u64::from(id));
    let start = Instant::now();
    let outcome = match id {
        1 => metric_oracles(s),
        2 => purity_formula(),
        3 => style_on_strokes(s),
        4 => compositing_invariance(s),
        5 => evm_benchmark(s, options.threshold_override),
        6 => probability_contract(s),
        7 => test_generator(s),
        8 => change_detection(s),
        9 => characterization(s),
        10 => involutions(s),
        _ => round_trips(s),
    };
    let elapsed = start.elapsed();
    let limit = limit.map(Duration::from_secs);
    let (mut passed, mut detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if let Some(l) = limit {
        if elapsed > l {
            passed = false;
            detail.push_str(&format!("; exceeded the {} s budget", l.as_secs()));
        }
    }
    Ok(CriterionResult {
        id,
        name,
        passed,
        detail,
        elapsed,
        limit,
    })
}

pub fn run_all(options: &SelfcheckOptions) -> Vec<CriterionResult> {
    CRITERIA
        .iter()
        .map(|c| run_one(c.0, options).expect("listed criterion"))
        .collect()
}

// ---------------------------------------------------------------- oracles

/// All set partitions of `n` items as restricted growth strings.
pub fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for v in 0..=next {
            prefix.push(v);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::with_capacity(n), n, &mut out);
    out
}

fn distinct(v: &[usize]) -> Vec<usize> {
    v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

fn count_where(a: &[usize], b: &[usize], x: usize, y: usize) -> usize {
    a.iter().zip(b).filter(|&(&p, &q)| p == x && q == y).count()
}

/// Geometric NMI straight from the definition, scanning the items for
/// every cell of the contingency table.
fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (la, lb) = (distinct(a), distinct(b));
    let h = |labels: &[usize], v: &[usize]| -> f64 {
        labels
            .iter()
            .map(|&l| {
                let p = v.iter().filter(|&&x| x == l).count() as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (h(&la, a), h(&lb, b));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for &x in &la {
        let pa = a.iter().filter(|&&v| v == x).count() as f64 / n;
        for &y in &lb {
            let pb = b.iter().filter(|&&v| v == y).count() as f64 / n;
            let pab = count_where(a, b, x, y) as f64 / n;
            if pab > 0.0 {
                mi += pab * (pab / (pa * pb)).ln();
            }
        }
    }
    (mi / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

fn purity_oracle(clusters: &[usize], truth: &[usize]) -> f64 {
    let hits: usize = distinct(clusters)
        .into_iter()
        .map(|c| {
            distinct(truth)
                .into_iter()
                .map(|t| count_where(clusters, truth, c, t))
                .max()
                .unwrap_or(0)
        })
        .sum();
    hits as f64 / clusters.len() as f64
}

/// Full-matrix Levenshtein distance.
fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

fn metric_oracles(s: u64) -> Check {
    let mut pairs = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=6 {
        let parts = partitions(n);
        for a in &parts {
            for b in &parts {
                let nmi = lib(metrics::nmi(a, b))?;
                let pur = lib(metrics::purity(a, b))?;
                let dn = (nmi - nmi_oracle(a, b)).abs();
                let dp = (pur - purity_oracle(a, b)).abs();
                ensure!(dn <= 1e-12, "nmi {a:?} vs {b:?}: off by {dn:e}");
                ensure!(dp <= 1e-12, "purity {a:?} vs {b:?}: off by {dp:e}");
                worst = worst.max(dn).max(dp);
                pairs += 1;
            }
        }
    }
    let mut rng = seed::rng(s);
    let alphabet: Vec<char> = "abcde fgé".chars().collect();
    let word = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
        let len = rng.random_range(0..=24);
        (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    };
    for _ in 0..1000 {
        let (t, p) = (word(&mut rng), word(&mut rng));
        let (tc, pc): (Vec<char>, Vec<char>) = (t.chars().collect(), p.chars().collect());
        let longest = tc.len().max(pc.len());
        let want = if longest == 0 {
            1.0
        } else {
            1.0 - levenshtein_oracle(&tc, &pc) as f64 / longest as f64
        };
        let got = metrics::char_accuracy(&t, &p);
        ensure!(got == want, "char_accuracy({t:?}, {p:?}) = {got}, oracle {want}");
    }
    Ok(format!(
        "{pairs} partition pairs (max deviation {worst:.1e}); 1000 edit-distance pairs exact"
    ))
}

fn purity_formula() -> Check {
    let clusters = [0, 0, 0, 1, 1, 1];
    let truth = ["a", "a", "b", "b", "b", "a"];
    let got = lib(metrics::purity(&clusters, &truth))?;
    // majority of {a,a,b} is 2, of {b,b,a} is 2
    let want = (2.0 + 2.0) / 6.0;
    ensure!((got - want).abs() <= 1e-9, "purity {got}, expected {want}");
    Ok(format!("purity {got:.4}"))
}

// ---------------------------------------------------------- style metrics

fn style_on_strokes(s: u64) -> Check {
    let mut slant_cases = 0;
    for seed_value in 0..10u64 {
        for &angle in &SLANT_ANGLES {
            let img = synth::stroke_image(f64::from(angle), seed::derive_indexed(s, "strokes", seed_value));
            let mask = style_metrics::foreground_mask(&img);
            let got = lib(style_metrics::slant_angle(&img, &mask))?;
            ensure!(got == angle, "stroke sheared by {angle} measured {got} (seed {seed_value})");
            slant_cases += 1;
        }
    }

    let mut rng = seed::rng(seed::derive(s, "pen"));
    for case in 0..50 {
        let (w, h) = (rng.random_range(8..64u32), rng.random_range(8..48u32));
        let bg: u8 = rng.random_range(200..=255);
        let mut bits = Vec::with_capacity((w * h) as usize);
        let mut pixels = Vec::with_capacity((w * h) as usize);
        let (mut sum, mut count) = (0u64, 0u64);
        for i in 0..w * h {
            let ink = i == 0 || rng.random_bool(0.2);
            bits.push(ink);
            if ink {
                let v: u8 = rng.random_range(0..=60);
                sum += u64::from(v);
                count += 1;
                pixels.push(v);
            } else {
                pixels.push(bg);
            }
        }
        let img = lib(LineImage::new(w, h, pixels))?;
        let mask = ForegroundMask::new(w, h, bits);
        ensure!(style_metrics::foreground_mask(&img) == mask, "case {case}: Otsu mask differs from construction");
        let got = lib(style_metrics::pen_pressure(&img, &mask))?;
        let want = sum as f64 / count as f64;
        ensure!(got == want, "case {case}: pen pressure {got}, constructed mean {want}");
    }

    let full = |w: u32| ForegroundMask::new(w, 1, vec![true; w as usize]);
    let flat = lib(LineImage::new(16, 1, vec![77; 16]))?;
    let two = lib(LineImage::new(16, 1, (0..16).map(|i| if i % 2 == 0 { 10 } else { 200 }).collect()))?;
    let all = lib(LineImage::new(256, 1, (0..=255).collect()))?;
    let e0 = lib(style_metrics::region_entropy(&flat, &full(16), Region::Foreground))?;
    let e1 = lib(style_metrics::region_entropy(&two, &full(16), Region::Foreground))?;
    let e8 = lib(style_metrics::region_entropy(&all, &full(256), Region::Foreground))?;
    for (got, want) in [(e0, 0.0), (e1, 1.0), (e8, 8.0)] {
        ensure!((got - want).abs() <= 1e-12, "entropy {got}, expected {want}");
    }
    Ok(format!(
        "{slant_cases} sheared strokes recovered; 50 constructed pen means exact; entropies 0, 1, 8"
    ))
}

fn compositing_invariance(s: u64) -> Check {
    let assets = AssetStore::synthetic(seed::derive(s, "assets"));
    let ids: Vec<&String> = assets.background.keys().collect();
    let mut rng = seed::rng(seed::derive(s, "compose"));
    for case in 0..50u64 {
        let style = LineStyle::random(&mut rng);
        let img = synth::text_line(&style, rng.random_range(2..=4), seed::derive_indexed(s, "line", case));
        let asset = &assets.background[ids[rng.random_range(0..ids.len())]];
        let patch = lib(augment::fit_asset(asset, img.width(), img.height(), &mut rng))?;
        let out = lib(augment::composite_background(&img, &patch, &asset.id))?;
        let (m0, m1) = (style_metrics::foreground_mask(&img), style_metrics::foreground_mask(&out));
        ensure!(m0 == m1, "case {case}: ink mask changed");
        let before = lib(style_metrics::pen_pressure(&img, &m0))?;
        let after = lib(style_metrics::pen_pressure(&out, &m1))?;
        ensure!(before == after, "case {case}: pen pressure {before} became {after}");
    }
    Ok("50 composited lines keep pen pressure exactly".into())
}

// -------------------------------------------------------------------- EVM

/// Five classes on a radius-5 pentagon plus a novel class at the origin.
fn pentagon(rng: &mut impl Rng, per_class: usize) -> (Vec<TrainingClass>, Vec<Vec<f64>>) {
    let known = synth::polygon_centers(5, 5.0)
        .into_iter()
        .enumerate()
        .map(|(i, c)| TrainingClass {
            label: format!("c{i}"),
            points: synth::gaussian_blob(c, 0.1, per_class, rng),
        })
        .collect();
    let novel = synth::gaussian_blob([0.0, 0.0], 0.1, per_class, rng);
    (known, novel)
}

fn features(points: &[Vec<f64>]) -> Vec<FeatureVector> {
    points
        .iter()
        .map(|p| FeatureVector {
            extractor: "blobs".into(),
            values: p.clone(),
        })
        .collect()
}

/// Smallest threshold minimizing |FPR - FNR|, searched over 0, every score
/// and the float just above each score.
fn eer_oracle(known: &[f64], novel: &[f64]) -> f64 {
    let mut candidates: Vec<f64> = known
        .iter()
        .chain(novel)
        .flat_map(|&s| [s, s.next_up()])
        .chain([0.0])
        .filter(|c| (0.0..=1.0).contains(c))
        .collect();
    candidates.sort_by(f64::total_cmp);
    let gap = |d: f64| {
        let fpr = known.iter().filter(|&&s| s < d).count() as f64 / known.len() as f64;
        let fnr = novel.iter().filter(|&&s| s >= d).count() as f64 / novel.len() as f64;
        (fpr - fnr).abs()
    };
    let mut best = (f64::INFINITY, 0.0);
    for c in candidates {
        let g = gap(c);
        if g < best.0 {
            best = (g, c);
        }
    }
    best.1
}

fn evm_benchmark(s: u64, threshold_override: Option<f64>) -> Check {
    let hp = EvmHyperparams {
        distance: Distance::Euclidean,
        ..Default::default()
    };
    let mut rng = seed::rng(seed::derive(s, "blobs"));
    let (train, _) = pentagon(&mut rng, 200);
    let (cal_known, cal_novel) = pentagon(&mut rng, 200);
    let (test_known, test_novel) = pentagon(&mut rng, 200);
    let mut model = lib(evm::fit(&train, "blobs", hp))?;

    let flat = |classes: &[TrainingClass]| -> Vec<Vec<f64>> {
        classes.iter().flat_map(|c| c.points.iter().cloned()).collect()
    };
    let (cal_known, cal_novel) = (features(&flat(&cal_known)), features(&cal_novel));
    let cal = lib(model.calibrate(&cal_known, &cal_novel))?;
    if let Some(t) = threshold_override {
        model.threshold = Some(t);
    }
    let delta = model.threshold.expect("calibrated");
    let km = |xs: &[FeatureVector]| xs.iter().map(|x| model.k_m(x)).collect::<Result<Vec<f64>, _>>();
    let eer = eer_oracle(&lib(km(&cal_known))?, &lib(km(&cal_novel))?);
    ensure!(
        delta == eer,
        "threshold {delta} is not the equal-error-rate threshold {eer} of the calibration scores"
    );

    let (mut top1, mut known_total, mut correct) = (0usize, 0usize, 0usize);
    for (ci, class) in test_known.iter().enumerate() {
        for x in features(&class.points) {
            let p = lib(model.predict(&x))?;
            top1 += usize::from(p.argmax_known() == ci);
            correct += usize::from(!lib(model.is_novel(&p))?);
            known_total += 1;
        }
    }
    for x in features(&test_novel) {
        let p = lib(model.predict(&x))?;
        correct += usize::from(lib(model.is_novel(&p))?);
    }
    let closed = top1 as f64 / known_total as f64;
    let detection = correct as f64 / (known_total + test_novel.len()) as f64;

    let mut shapes = 0.0;
    let mut scales = 0.0;
    let truth = WeibullDist::new(1.0, 2.0).expect("valid Weibull");
    for k in 0..20u64 {
        let mut r = seed::rng(seed::derive_indexed(s, "weibull", k));
        let data: Vec<f64> = (0..1000).map(|_| truth.sample(&mut r)).collect();
        let w = lib(evm::weibull::fit(&data))?;
        shapes += w.shape;
        scales += w.scale;
    }
    let (shape, scale) = (shapes / 20.0, scales / 20.0);

    let detail = format!(
        "closed-set top-1 {closed:.4}, detection {detection:.4} at delta {delta:.4} (calibration EER {:.4}), \
         Weibull fit mean shape {shape:.4} scale {scale:.4}",
        cal.equal_error_rate
    );
    ensure!(closed >= 0.99, "{detail}: closed-set accuracy below 0.99");
    ensure!(detection >= 0.95, "{detail}: detection accuracy below 0.95");
    ensure!((shape - 2.0).abs() <= 0.1 && (scale - 1.0).abs() <= 0.05, "{detail}: Weibull fit off");
    Ok(detail)
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn probability_contract(s: u64) -> Check {
    const TOTAL: usize = 10_000;
    let mut done = 0usize;
    let mut models = 0usize;
    let mut attempt = 0u64;
    while done < TOTAL {
        let mut rng = seed::rng(seed::derive_indexed(s, "model", attempt));
        attempt += 1;
        ensure!(attempt < 1000, "could not fit enough random models");
        let dim = rng.random_range(2..=5);
        let k = rng.random_range(2..=6);
        let hp = EvmHyperparams {
            tail_size: rng.random_range(5..=50),
            cover_threshold: rng.random_range(0.3..=1.0),
            distance: if rng.random_bool(0.5) { Distance::Euclidean } else { Distance::Cosine },
            distance_multiplier: 0.5,
        };
        let classes: Vec<TrainingClass> = (0..k)
            .map(|c| {
                let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let spread = rng.random_range(0.2..1.0);
                let n = rng.random_range(10..=30);
                TrainingClass {
                    label: format!("k{c}"),
                    points: (0..n)
                        .map(|_| center.iter().map(|m| m + rng.random_range(-spread..spread)).collect())
                        .collect(),
                }
            })
            .collect();
        let Ok(mut model) = evm::fit(&classes, "fuzz", hp) else {
            continue;
        };
        model.threshold = Some(0.5);
        models += 1;
        for _ in 0..(TOTAL - done).min(500) {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-8.0..8.0)).collect();
            let raw = lib(model.scores(&x))?;
            let fv = FeatureVector {
                extractor: "fuzz".into(),
                values: x,
            };
            let p = lib(model.predict(&fv))?;
            let sum: f64 = p.0.iter().sum();
            ensure!(p.0.len() == k + 1, "vector of length {} for {k} classes", p.0.len());
            ensure!((sum - 1.0).abs() <= 1e-9, "probabilities sum to {sum}");
            ensure!(p.0.iter().all(|v| (0.0..=1.0).contains(v)), "entry outside [0, 1]: {:?}", p.0);
            ensure!(
                p.argmax_known() == first_argmax(&raw),
                "argmax {} but raw scores {raw:?}",
                p.argmax_known()
            );
            done += 1;
        }
    }
    Ok(format!("{done} predictions over {models} random models"))
}

// ----------------------------------------------------------- test streams

/// Id-only pools large enough for every default condition.
pub fn synthetic_pools(non_novel: usize, per_cell: usize) -> Pools {
    let mut pools = Pools {
        non_novel: (0..non_novel).map(|i| format!("k{i:05}")).collect(),
        novel: Vec::new(),
    };
    for t in [NoveltyType::Writer, NoveltyType::Letter, NoveltyType::Pen, NoveltyType::Background] {
        for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            for i in 0..per_cell {
                pools.novel.push(NovelCandidate {
                    id: format!("n-{t}-{d:?}-{i:04}"),
                    novelty_type: t,
                    difficulty: d,
                });
            }
        }
    }
    pools.novel.sort_by(|a, b| a.id.cmp(&b.id));
    pools
}

fn stream_invariants(stream: &TestStream) -> Result<(), String> {
    let id = stream.test_id();
    let intro = stream.introduction_index;
    ensure!(stream.is_novel[..intro].iter().all(|n| !n), "{id}: novel sample before the introduction");
    let post = stream.post_len() as f64;
    let err = (stream.empirical_density() - stream.spec.novelty_density).abs();
    ensure!(err <= 0.5 / post + 1e-12, "{id}: density off by {err}");
    let mut base = stream.samples.clone();
    base.sort();
    for k in 1..=testgen::MAX_REORDER {
        let r = lib(testgen::reorder(stream, k))?;
        ensure!(r.is_novel == stream.is_novel, "{id}: reorder {k} moved the novelty mask");
        let mut ids = r.samples.clone();
        ids.sort();
        ensure!(ids == base, "{id}: reorder {k} changed the sample multiset");
    }
    Ok(())
}

fn test_generator(s: u64) -> Check {
    let config = TestConfig::default();
    let specs = lib(testgen::enumerate_specs(&config, s))?;
    ensure!(specs.len() == 3888, "{} specs enumerated", specs.len());
    let pools = synthetic_pools(1100, 400);
    let step = specs.len() / 200;
    for spec in specs.iter().step_by(step).take(200) {
        let stream = lib(testgen::generate(spec, &config, &pools))?;
        stream_invariants(&stream)?;
    }

    let mut mean = BTreeMap::new();
    let template = specs[0].clone();
    for dist in DistributionType::ALL {
        let mut acc = 0.0;
        for k in 0..100u64 {
            let spec = testgen::TestSpec {
                novelty_density: 0.3,
                test_length: 1024,
                distribution_type: dist,
                seed: seed::derive_indexed(s, "positional", k),
                ..template.clone()
            };
            acc += lib(testgen::generate(&spec, &config, &pools))?.mean_normalized_novel_position();
        }
        mean.insert(dist, acc / 100.0);
    }
    let m = |d| mean[&d];
    let (high, low, mid, flat) = (
        m(DistributionType::High),
        m(DistributionType::Low),
        m(DistributionType::Mid),
        m(DistributionType::Flat),
    );
    let detail = format!(
        "3888 specs; 200 streams valid; mean positions Low {low:.3} Flat {flat:.3} Mid {mid:.3} High {high:.3}"
    );
    ensure!(low - flat.max(mid) >= 0.05, "{detail}: Low not above Flat/Mid");
    ensure!(flat.min(mid) - high >= 0.05, "{detail}: High not below Flat/Mid");
    ensure!((flat - mid).abs() < 0.05, "{detail}: Flat and Mid differ");
    Ok(detail)
}

/// Single-cell Writer/Easy/Flat design without jitter.
pub fn harness_config(intro: f64, densities: Vec<f64>, lengths: Vec<usize>) -> TestConfig {
    TestConfig {
        introduction_points: vec![intro],
        densities,
        novelty_types: vec![NoveltyType::Writer],
        difficulties: vec![Difficulty::Easy],
        distributions: vec![DistributionType::Flat],
        lengths,
        jitter: 0.0,
        ..Default::default()
    }
}

/// Streams of `config` with fresh seeds, `per_spec` per condition.
fn harness_streams(config: &TestConfig, pools: &Pools, per_spec: usize, s: u64) -> Result<Vec<TestStream>, String> {
    let specs = lib(testgen::enumerate_specs(config, s))?;
    let mut out = Vec::with_capacity(specs.len() * per_spec);
    for spec in &specs {
        for k in 0..per_spec {
            let spec = testgen::TestSpec {
                seed: seed::derive_indexed(spec.seed, "harness", k as u64),
                ..spec.clone()
            };
            out.push(lib(testgen::generate(&spec, config, pools))?);
        }
    }
    Ok(out)
}

fn change_detection(s: u64) -> Check {
    let pools = synthetic_pools(1100, 700);
    let detector = DetectorConfig::default();

    let config = harness_config(0.5, vec![0.3], vec![512, 768, 1024]);
    let streams = harness_streams(&config, &pools, 67, seed::derive(s, "detection"))?;
    let mut hits = 0usize;
    let mut early = 0usize;
    let total = streams.len().min(200);
    for (i, stream) in streams.iter().take(total).enumerate() {
        let agent = ScriptedAgent::by_phase(
            stream,
            (0.2, 0.05),
            (0.8, 0.05),
            0.5,
            seed::derive_indexed(s, "phase", i as u64),
        );
        let out = lib(runner::run_test(&agent, stream, &detector))?;
        let intro = stream.introduction_index;
        match out.detection {
            Some(d) if d < intro => early += 1,
            Some(d) if d < intro + 16 => hits += 1,
            _ => {}
        }
    }
    let rate = hits as f64 / total as f64;

    let densities = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let config = harness_config(0.2, densities.clone(), vec![1024]);
    let streams = harness_streams(&config, &pools, 100, seed::derive(s, "fp"))?;
    let mut fp: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (i, stream) in streams.iter().enumerate() {
        let agent = ScriptedAgent::by_label(
            stream,
            (0.2, 0.05),
            (0.8, 0.05),
            0.75,
            seed::derive_indexed(s, "label", i as u64),
        );
        let out = lib(runner::run_test(&agent, stream, &detector))?;
        let e = fp.entry(stream.spec.novelty_density.to_bits()).or_default();
        e.0 += report::false_positives(stream, &out.records) as f64;
        e.1 += 1;
    }
    let means: Vec<f64> = densities
        .iter()
        .map(|d| {
            let (sum, n) = fp[&d.to_bits()];
            sum / n as f64
        })
        .collect();
    let rho = lib(metrics::spearman(&densities, &means))?;
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.2}")).collect();
    let detail = format!(
        "detected within 16 samples in {hits}/{total} ({rate:.3}), {early} early alarms; \
         mean false positives by density [{}], Spearman {rho:.3}",
        shown.join(", ")
    );
    ensure!(rate >= 0.95, "{detail}: detection rate below 0.95");
    ensure!(rho < -0.8, "{detail}: false positives do not fall with density");
    Ok(detail)
}

// ------------------------------------------------------- characterization

fn characterization(s: u64) -> Check {
    let mut rng = seed::rng(seed::derive(s, "modes"));
    let mut samples = Vec::new();
    for (mode, pen) in [20u8, 70, 120].into_iter().enumerate() {
        for i in 0..30u64 {
            let style = LineStyle {
                pen,
                ..LineStyle::random(&mut rng)
            };
            let img = synth::text_line(&style, 3, seed::derive_indexed(s, "mode", mode as u64 * 100 + i));
            samples.push(CharacterizationSample {
                novelty_type: NoveltyType::Pen,
                truth: format!("mode{mode}"),
                style: lib(style_metrics::style_vector(&img))?,
                category: vec![1.0],
            });
        }
    }
    let refs: Vec<&CharacterizationSample> = samples.iter().collect();
    let pp = lib(characterize_cell(&refs, ClusterGroup::PP, seed::derive(s, "pp")))?;

    let plain: Vec<CharacterizationSample> = samples
        .iter()
        .enumerate()
        .map(|(i, x)| CharacterizationSample {
            novelty_type: NoveltyType::None,
            truth: format!("w{}", i % 7),
            category: vec![0.0],
            ..x.clone()
        })
        .collect();
    let refs: Vec<&CharacterizationSample> = plain.iter().collect();
    let nc = lib(characterize_cell(&refs, ClusterGroup::NC, seed::derive(s, "nc")))?;
    let detail = format!(
        "PP purity {:.4}; non-novel NC clusters {} with purity {:.4}",
        pp.purity, nc.k_effective, nc.purity
    );
    ensure!(pp.purity >= 0.95, "{detail}: PP purity below 0.95");
    ensure!(nc.k_effective == 1 && nc.purity == 1.0, "{detail}: non-novel samples split");
    Ok(detail)
}

// ------------------------------------------------------------- transforms

fn dilate_oracle(m: &ForegroundMask, r: u32) -> ForegroundMask {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let r = i64::from(r);
    let mut bits = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut hit = false;
            for v in 0..h {
                for u in 0..w {
                    if (x - u).abs() + (y - v).abs() <= r && m.get(u as u32, v as u32) {
                        hit = true;
                    }
                }
            }
            bits.push(hit);
        }
    }
    ForegroundMask::new(m.width(), m.height(), bits)
}

fn erode_oracle(m: &ForegroundMask, r: u32) -> ForegroundMask {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let r = i64::from(r);
    let mut bits = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut keep = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs() + dy.abs() > r {
                        continue;
                    }
                    let (u, v) = (x + dx, y + dy);
                    let inside = (0..w).contains(&u) && (0..h).contains(&v);
                    if !inside || !m.get(u as u32, v as u32) {
                        keep = false;
                    }
                }
            }
            bits.push(keep);
        }
    }
    ForegroundMask::new(m.width(), m.height(), bits)
}

fn involutions(s: u64) -> Check {
    let mut rng = seed::rng(seed::derive(s, "images"));
    for case in 0..100 {
        let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=32u32));
        let img = lib(LineImage::new(w, h, (0..w * h).map(|_| rng.random()).collect()))?;
        ensure!(
            augment::reflect_horizontal_axis(&augment::reflect_horizontal_axis(&img)) == img,
            "case {case}: horizontal reflection is not an involution"
        );
        ensure!(
            augment::reflect_vertical_axis(&augment::reflect_vertical_axis(&img)) == img,
            "case {case}: vertical reflection is not an involution"
        );
        ensure!(augment::invert(&augment::invert(&img)) == img, "case {case}: inversion is not an involution");
    }
    let mut rng = seed::rng(seed::derive(s, "masks"));
    for case in 0..500 {
        let density = rng.random_range(0.02..0.9);
        let bits = (0..32 * 32).map(|_| rng.random_bool(density)).collect();
        let m = ForegroundMask::new(32, 32, bits);
        let r = rng.random_range(0..=3);
        ensure!(augment::dilate_mask(&m, r) == dilate_oracle(&m, r), "case {case}: dilation by {r} differs");
        ensure!(augment::erode_mask(&m, r) == erode_oracle(&m, r), "case {case}: erosion by {r} differs");
    }
    Ok("100 images: reflections and inversion are involutions; 500 masks match brute-force morphology".into())
}

// ------------------------------------------------------------ round trips

fn demo_manifest() -> Result<Manifest, String> {
    let label = |w: Option<&str>, t: NoveltyType, sub: &str, d: Difficulty, a: Option<Appearance>| SampleLabels {
        writer: w.map(String::from),
        transcript: Some("a quick \"fox\" é".into()),
        appearance: a,
        novelty_type: t,
        novelty_subtype: sub.into(),
        difficulty: d,
    };
    let records = vec![
        (label(Some("w1"), NoveltyType::None, "", Difficulty::Unassigned, Some(Appearance::OriginalWhite))),
        (label(Some("w2"), NoveltyType::Writer, "writer", Difficulty::Hard, None)),
        (label(None, NoveltyType::Background, "Coffee Stain", Difficulty::Easy, Some(Appearance::Antique))),
        (label(Some("w1"), NoveltyType::Letter, "InvertColor", Difficulty::Medium, Some(Appearance::InvertColor))),
        (label(Some("w1"), NoveltyType::Pen, "Rainbow", Difficulty::Medium, Some(Appearance::Other("sepia".into())))),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, labels)| ManifestRecord {
        id: format!("s{i}"),
        image: format!("images/s{i}.png").into(),
        labels,
    })
    .collect();
    let alphabet = "a quick\"foxé".chars().collect();
    lib(Manifest::new(
        records,
        alphabet,
        ["w1".to_string()].into(),
        ["w2".to_string()].into(),
    ))
}

fn round_trips(s: u64) -> Check {
    let manifest = demo_manifest()?;
    let text = manifest.to_jsonl();
    let back = lib(Manifest::parse_jsonl(&text))?;
    ensure!(back == manifest, "manifest changed across a round trip");
    ensure!(back.to_jsonl() == text, "manifest text is not stable");

    let mut rng = seed::rng(seed::derive(s, "features"));
    let mut fs = FeatureSet::new("m-mean-hog-3", 4);
    for i in 0..50 {
        let v = (0..4).map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>()).collect();
        lib(fs.push(format!("f{i}"), v))?;
    }
    let bytes = fs.to_bytes();
    let back = lib(FeatureSet::from_bytes(&bytes, Path::new("<memory>")))?;
    ensure!(back == fs, "feature file changed across a round trip");
    ensure!(back.to_bytes() == bytes, "feature bytes are not stable");

    let mut rng = seed::rng(seed::derive(s, "evm"));
    let hp = EvmHyperparams {
        distance: Distance::Euclidean,
        tail_size: 40,
        ..Default::default()
    };
    let (train, _) = pentagon(&mut rng, 40);
    let mut model: EvmModel = lib(evm::fit(&train, "blobs", hp))?;
    model.threshold = Some(0.37);
    let bytes = model.to_bytes();
    let back = lib(EvmModel::from_bytes(&bytes, Path::new("<memory>")))?;
    ensure!(back == model, "EVM model changed across a round trip");
    ensure!(back.to_bytes() == bytes, "EVM bytes are not stable");
    for _ in 0..100 {
        let x = vec![rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        let (a, b) = (lib(model.scores(&x))?, lib(back.scores(&x))?);
        ensure!(
            a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()),
            "reloaded model scores differ"
        );
    }
    ensure!(
        lib(evm::fit(&train, "blobs", hp))?.to_bytes() == EvmModel { threshold: None, ..model.clone() }.to_bytes(),
        "refitting gave a different model"
    );

    let config = harness_config(0.5, vec![0.3], vec![256]);
    let pools = synthetic_pools(300, 100);
    let a = harness_streams(&config, &pools, 3, s)?;
    let b = harness_streams(&config, &pools, 3, s)?;
    ensure!(a == b, "stream generation is not deterministic");
    let jsonl = |streams: &[TestStream]| -> Result<String, String> {
        let mut out = String::new();
        for (i, st) in streams.iter().enumerate() {
            let agent = ScriptedAgent::by_phase(st, (0.2, 0.05), (0.8, 0.05), 0.5, i as u64);
            let run = lib(runner::run_test(&agent, st, &DetectorConfig::default()))?;
            out.push_str(&runner::records_to_jsonl(&run.records));
        }
        Ok(out)
    };
    ensure!(jsonl(&a)? == jsonl(&b)?, "runner output is not deterministic");
    Ok("manifest, feature file and EVM model round trips exact; generation and runs reproducible".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_follow_bell_numbers() {
        let counts: Vec<usize> = (1..=6).map(|n| partitions(n).len()).collect();
        assert_eq!(counts, [1, 2, 5, 15, 52, 203]);
    }

    #[test]
    fn oracles_agree_on_hand_cases() {
        assert_eq!(purity_oracle(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 0]), 4.0 / 6.0);
        assert_eq!(nmi_oracle(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(nmi_oracle(&[0, 1, 0, 1], &[0, 0, 1, 1]), 0.0);
        assert_eq!(levenshtein_oracle(&['k', 'i', 't'], &['s', 'i', 't', 's']), 2);
    }

    #[test]
    fn brute_force_morphology_on_a_point() {
        let mut bits = vec![false; 25];
        bits[12] = true;
        let m = ForegroundMask::new(5, 5, bits);
        assert_eq!(dilate_oracle(&m, 1).count(), 5);
        assert_eq!(erode_oracle(&m, 1).count(), 0);
        assert_eq!(erode_oracle(&m, 0), m);
    }

    #[test]
    fn eer_oracle_hand_case() {
        // known above 0.6, novel below 0.4: any threshold in between has zero error
        assert_eq!(eer_oracle(&[0.7, 0.9], &[0.1, 0.3]), 0.3f64.next_up());
        assert_eq!(eer_oracle(&[0.5], &[0.5]), 0.0);
    }

    #[test]
    fn unknown_criterion_is_rejected() {
        assert!(matches!(
            run_one(12, &SelfcheckOptions::default()),
            Err(SelfcheckError::UnknownCriterion(12))
        ));
    }

    #[test]
    fn cheap_criteria_pass() {
        let o = SelfcheckOptions::default();
        for id in [2, 4, 9, 10, 11] {
            let r = run_one(id, &o).unwrap();
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn summaries_are_reproducible() {
        let o = SelfcheckOptions {
            seed: 3,
            threshold_override: None,
        };
        assert_eq!(run_one(9, &o).unwrap().summary(), run_one(9, &o).unwrap().summary());
    }
}
